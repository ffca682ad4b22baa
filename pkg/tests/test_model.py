"""Network assembly, parameter accounting and checkpoint files."""
import json
import struct

import numpy as np
import pytest

from mamapp import functional as F
from mamapp.model import (CHECKPOINT_MAGIC, CheckpointError, ConfigError, MamAppConfig, build,
                          count_params, extract_features, forward, load_checkpoint, predict_proba,
                          read_checkpoint, save_checkpoint, summarize_params)
from mamapp.tensor import DimensionError, Tensor


@pytest.fixture(scope="module")
def small_cfg():
    return MamAppConfig(input_size=(16, 16, 3))


@pytest.fixture
def images(rng):
    return rng.random((2, 3, 16, 16)).astype(np.float32)


class TestConfig:
    def test_defaults(self):
        cfg = MamAppConfig()
        assert cfg.input_size == (256, 256, 3) and cfg.stem_channels == (16, 32)
        assert (cfg.num_blocks, cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank) == (5, 32, 32, 16, 2)
        assert (cfg.lr, cfg.weight_decay, cfg.label_smoothing, cfg.batch_size) == (1e-3, 1e-5, 0.1, 32)
        assert cfg.token_grid() == (64, 64)

    def test_d_model_must_match_stem(self):
        with pytest.raises(ConfigError, match="d_model"):
            MamAppConfig(d_model=16).validate()

    def test_num_classes_floor(self):
        with pytest.raises(ConfigError, match="num_classes"):
            MamAppConfig(num_classes=1).validate()

    def test_lists_every_violation(self):
        with pytest.raises(ConfigError) as exc:
            MamAppConfig(num_classes=1, num_blocks=0).validate()
        assert "num_classes" in str(exc.value) and "num_blocks" in str(exc.value)

    def test_dict_roundtrip(self):
        cfg = MamAppConfig(num_classes=3, input_size=(64, 64, 3))
        assert MamAppConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            MamAppConfig.from_dict({"bogus": 1})


class TestShapes:
    def test_reference_shape_chain(self, rng):
        model = build(MamAppConfig())
        trace = []
        out = forward(model, rng.random((1, 3, 256, 256)).astype(np.float32))
        model(Tensor(rng.random((1, 3, 256, 256)).astype(np.float32)), trace=trace)
        shapes = dict(trace)
        assert shapes["stem1"] == (1, 16, 128, 128)
        assert shapes["stem2"] == (1, 32, 64, 64)
        assert shapes["tokens"] == (1, 4096, 32)
        assert all(shapes[f"block{i}"] == (1, 4096, 32) for i in range(5))
        assert shapes["norm"] == (1, 4096, 32)
        assert shapes["gap"] == (1, 32)
        assert out.shape == (1, 4)

    def test_wrong_size_rejected(self, small_cfg):
        with pytest.raises(DimensionError, match="never resized"):
            build(small_cfg)(Tensor(np.zeros((1, 3, 17, 16))))

    def test_potato_head(self):
        model = build(MamAppConfig(num_classes=3, input_size=(16, 16, 3)))
        assert model.head.weight.shape == (3, 32)

    def test_features_and_logits(self, small_cfg, images):
        model = build(small_cfg)
        feats = extract_features(model, images)
        assert feats.shape == (2, 32)
        logits = forward(model, images)
        np.testing.assert_array_equal(F.linear(Tensor(feats), model.head.weight, model.head.bias).data,
                                      logits.data)

    def test_duplicate_rows_identical(self, small_cfg, images):
        batch = np.stack([images[0], images[0]])
        feats = extract_features(build(small_cfg), batch)
        np.testing.assert_array_equal(feats[0], feats[1])

    def test_eval_is_pure(self, small_cfg, images):
        model = build(small_cfg)
        a = forward(model, images).data
        b = forward(model, images).data
        np.testing.assert_array_equal(a, b)

    def test_probabilities(self, small_cfg, images):
        model = build(small_cfg)
        p = predict_proba(model, images)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(p.argmax(axis=1), forward(model, images).data.argmax(axis=1))


class TestParams:
    def test_closed_form_counts(self):
        total, breakdown = count_params(build(MamAppConfig()))
        assert breakdown["head"] == 32 * 4 + 4
        assert breakdown["stem.conv1"] == 3 * 3 * 3 * 16 + 16
        assert breakdown["stem.conv2"] == 3 * 3 * 16 * 32 + 32
        assert breakdown["blocks.0.mixer.in_proj"] == 32 * 64 + 64
        assert breakdown["blocks.0.mixer.ssm.x_proj"] == 32 * (2 + 2 * 16)
        assert breakdown["blocks.0.mixer.ssm"] == 32 * 16 + 32   # A_log and D
        assert total == 30_980

    def test_seed_independent(self):
        cfg = MamAppConfig()
        assert count_params(build(cfg, seed=0))[0] == count_params(build(cfg, seed=5))[0]

    def test_group_summary(self):
        _, breakdown = count_params(build(MamAppConfig()))
        groups = summarize_params(breakdown)
        assert groups["blocks.0"] == 5120 and groups["norm"] == 64
        assert sum(groups.values()) == 30_980

    def test_same_seed_bit_identical(self, small_cfg):
        a, b = build(small_cfg), build(small_cfg)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()

    def test_decay_flags(self):
        model = build(MamAppConfig())
        no_decay = {n for n, p in model.named_parameters() if not p.decay}
        assert "head.bias" in no_decay and "stem.bn1.weight" in no_decay
        assert "blocks.0.norm.weight" in no_decay and "blocks.0.mixer.ssm.A_log" in no_decay
        assert "head.weight" not in no_decay and "stem.conv1.weight" not in no_decay


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, small_cfg, images, tmp_path):
        model = build(small_cfg)
        forward(model, images, mode="train")        # moves running stats off their init
        save_checkpoint(model, small_cfg, tmp_path / "m.ckpt")
        loaded, cfg = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg == small_cfg
        assert forward(loaded, images).data.tobytes() == forward(model, images).data.tobytes()

    def test_layout(self, small_cfg, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(small_cfg), small_cfg, path, meta={"epoch": 3})
        raw = path.read_bytes()
        assert raw[:8] == CHECKPOINT_MAGIC
        assert struct.unpack("<I", raw[8:12])[0] == 1
        n = struct.unpack("<Q", raw[12:20])[0]
        header = json.loads(raw[20:20 + n])
        assert header["meta"] == {"epoch": 3} and header["num_classes"] == 4
        _, meta, tensors = read_checkpoint(path)
        assert meta == {"epoch": 3}
        assert tensors["head.weight"].shape == (4, 32)

    def test_bad_magic(self, small_cfg, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(small_cfg), small_cfg, path)
        data = bytearray(path.read_bytes())
        data[0:8] = b"NOTMAMAP"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, small_cfg, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(small_cfg), small_cfg, path)
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_truncated(self, small_cfg, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(small_cfg), small_cfg, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch_names_tensor(self, small_cfg, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(small_cfg), small_cfg, path)
        with pytest.raises(CheckpointError, match="head.weight"):
            load_checkpoint(path, small_cfg.replace(num_classes=3))
