import json
import struct

import numpy as np
import pytest

from wcasynth.errors import CheckpointError, ConfigError
from wcasynth.io import (MAGIC, VERSION, BadMagicError, Config, ManifestError, TruncatedCheckpointError,
                         VersionMismatchError, config_from_dict, load_checkpoint, load_config, ppm_bytes, preset,
                         read_checkpoint, read_ppm, save_checkpoint, to_bytes, validate_config, write_ppm)
from wcasynth.tensor import ParamStore


def store():
    rng = np.random.default_rng(0)
    return ParamStore({"a.w": rng.normal(size=(2, 3)).astype(np.float32), "b": np.float32([1.5, -0.0, np.pi]),
                       "c.scalar": np.float32([7.0])})


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        s = store()
        save_checkpoint(s, {"x": 1}, 42, tmp_path / "m.wcad", rng_state={"k": [1, 2]})
        got, cfg, step = load_checkpoint(tmp_path / "m.wcad")
        assert (cfg, step) == ({"x": 1}, 42)
        assert got.names() == s.names()
        for (_, p), (_, q) in zip(s.items(), got.items()):
            assert p.data.tobytes() == q.data.tobytes()
        assert read_checkpoint(tmp_path / "m.wcad")[0]["rng_state"] == {"k": [1, 2]}

    def test_layout(self, tmp_path):
        s = store()
        save_checkpoint(s, {}, 3, tmp_path / "m.wcad")
        raw = (tmp_path / "m.wcad").read_bytes()
        assert raw[:4] == b"WCAD"
        version, hlen = struct.unpack("<IQ", raw[4:16])
        assert version == VERSION
        header = json.loads(raw[16:16 + hlen])
        assert [e["name"] for e in header["manifest"]] == ["a.w", "b", "c.scalar"]
        assert header["manifest"][0]["shape"] == [2, 3]
        payload = raw[16 + hlen:]
        assert payload == b"".join(p.data.astype("<f4").tobytes() for _, p in s.items())

    def test_bad_magic(self, tmp_path):
        save_checkpoint(store(), {}, 0, tmp_path / "m.wcad")
        raw = bytearray((tmp_path / "m.wcad").read_bytes())
        raw[0:4] = b"XXXX"
        (tmp_path / "m.wcad").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError, match="bad magic"):
            load_checkpoint(tmp_path / "m.wcad")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(store(), {}, 0, tmp_path / "m.wcad")
        raw = bytearray((tmp_path / "m.wcad").read_bytes())
        raw[4:8] = struct.pack("<I", VERSION + 1)
        (tmp_path / "m.wcad").write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(tmp_path / "m.wcad")

    def test_truncated(self, tmp_path):
        save_checkpoint(store(), {}, 0, tmp_path / "m.wcad")
        raw = (tmp_path / "m.wcad").read_bytes()
        for cut in (10, 30, len(raw) - 4):
            (tmp_path / "t.wcad").write_bytes(raw[:cut])
            with pytest.raises(TruncatedCheckpointError):
                load_checkpoint(tmp_path / "t.wcad")

    def test_shape_payload_mismatch(self, tmp_path):
        hb = json.dumps({"config": {}, "manifest": [{"name": "w", "shape": [2]}], "step": 0,
                         "rng_state": None}).encode()
        (tmp_path / "m.wcad").write_bytes(MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"\0" * 12)
        with pytest.raises(ManifestError):
            load_checkpoint(tmp_path / "m.wcad")

    def test_errors_are_distinct_checkpoint_errors(self):
        kinds = {BadMagicError, VersionMismatchError, TruncatedCheckpointError, ManifestError}
        assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)

    def test_atomic_no_temp_left(self, tmp_path):
        save_checkpoint(store(), {}, 0, tmp_path / "m.wcad")
        assert [p.name for p in tmp_path.iterdir()] == ["m.wcad"]


class TestPPM:
    def test_byte_formula(self):
        np.testing.assert_array_equal(to_bytes(np.array([-1.0, 1.0, 0.0, -2.0, 2.0])), [0, 255, 128, 0, 255])

    def test_header_exact(self):
        b = ppm_bytes(np.zeros((3, 2, 5)))
        assert b.startswith(b"P6\n5 2\n255\n")
        assert len(b) == len(b"P6\n5 2\n255\n") + 30

    def test_pixel_order(self):
        img = -np.ones((3, 1, 2))
        img[0, 0, 1] = 1.0
        assert ppm_bytes(img)[-6:] == bytes([0, 0, 0, 255, 0, 0])

    def test_roundtrip_bound(self, tmp_path):
        img = np.random.default_rng(0).uniform(-1, 1, (3, 7, 9))
        write_ppm(img, tmp_path / "a.ppm")
        back = read_ppm(tmp_path / "a.ppm")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1 / 127.5

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 128]))
        np.testing.assert_allclose(read_ppm(tmp_path / "c.ppm")[:, 0, 0], [1.0, -1.0, 128 / 127.5 - 1], atol=1e-6)

    @pytest.mark.parametrize("raw", [b"P5\n1 1\n255\n\0", b"P6\n1 x\n255\n\0\0\0", b"P6\n1 1\n65535\n\0\0\0",
                                     b"P6\n2 2\n255\n\0", b""])
    def test_malformed(self, tmp_path, raw):
        (tmp_path / "m.ppm").write_bytes(raw)
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "m.ppm")

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            ppm_bytes(np.zeros((4, 2, 2)))


class TestConfig:
    def test_defaults_validate(self):
        validate_config(Config())

    def test_paper_protocol(self):
        cfg = preset("paper-protocol")
        validate_config(cfg)
        t = cfg.training
        assert (t.epochs, t.lr, t.batch, cfg.sampling.ddim_steps) == (20, 1e-5, 4, 20)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("huge")

    @pytest.mark.parametrize("data,msg", [({"trainig": {}}, "config: unknown"),
                                          ({"training": {"lr": 1e-3, "lrr": 1}}, "training: unknown")])
    def test_unknown_keys(self, data, msg):
        with pytest.raises(ConfigError, match=msg):
            config_from_dict(data)

    @pytest.mark.parametrize("data", [
        {"dataset": {"size": 24}},
        {"dataset": {"n": 5}},
        {"diffusion": {"beta_start": 0.2, "beta_end": 0.1}},
        {"control": {"variant": "lora"}},
        {"control": {"window_sizes": 16}},
        {"control": {"window_sizes": [2, 4]}},
        {"model": {"base_channels": 10}},
        {"sampling": {"ddim_steps": 500}},
        {"training": {"batch": 0}},
        {"training": {"steps": 0, "epochs": 0}},
        {"eval": {"bench_repeats": 2}},
        {"eval": {"variants": ["wca", "wca"]}},
        {"diffusion": {"latent_mode": True}},
    ])
    def test_validation_rejects(self, data):
        with pytest.raises(ConfigError):
            validate_config(config_from_dict(data))

    def test_to_dict_roundtrip(self):
        cfg = preset("paper-protocol")
        assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_load_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_train_steps_from_epochs(self):
        cfg = config_from_dict({"dataset": {"n": 20}, "training": {"steps": 0, "epochs": 3, "batch": 4}})
        assert cfg.train_steps == 3 * 5
