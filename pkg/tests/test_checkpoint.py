import os

import numpy as np
import pytest

from mimkit.checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_teacher_checkpoint,
    save_checkpoint,
)
from mimkit.errors import (
    BadMagic,
    GridMismatch,
    IoError,
    MissingCheckpoint,
    VersionMismatch,
)
from mimkit.objectives import LossKind, NormKind
from mimkit.teachers import TeacherSpec
from mimkit.train import OptimizerState, TrainConfig
from mimkit.vit import ViTConfig, init_params


def toy_vit():
    return ViTConfig(layers=1, hidden=16, ffn_hidden=32, heads=2, patch_size=8,
                     image_size=16, target_dim=16, drop_path_rate=0.0)


def toy_train_config():
    return TrainConfig(teacher=TeacherSpec("pixel", per_patch_ln=True),
                       norm=NormKind("l2"), loss=LossKind("cosine"),
                       total_steps=7, batch_size=2, warmup_steps=1,
                       mask_strategy="random", seed=5)


class TestRoundTrip:
    def test_params_bit_exact(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(0))
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, params, seed=3, step=17)
        back = load_checkpoint(path)
        assert back.params.digest() == params.digest()
        assert back.seed == 3 and back.step == 17
        assert back.params.config == toy_vit()

    def test_optimizer_state_round_trip(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(1))
        state = OptimizerState.initial(params)
        rng = np.random.default_rng(2)
        state = OptimizerState(
            m={n: rng.standard_normal(t.shape).astype(np.float32) for n, t in params.items()},
            v={n: rng.random(t.shape).astype(np.float32) for n, t in params.items()},
            step=42)
        path = str(tmp_path / "opt.ckpt")
        save_checkpoint(path, params, opt_state=state)
        back = load_checkpoint(path)
        assert back.opt_state.step == 42
        for name in params.names():
            np.testing.assert_array_equal(back.opt_state.m[name], state.m[name])
            np.testing.assert_array_equal(back.opt_state.v[name], state.v[name])

    def test_train_config_round_trip(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(3))
        cfg = toy_train_config()
        path = str(tmp_path / "cfg.ckpt")
        save_checkpoint(path, params, train_config=cfg)
        assert load_checkpoint(path).train_config == cfg

    def test_float64_params(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(4), dtype=np.float64)
        path = str(tmp_path / "f64.ckpt")
        save_checkpoint(path, params)
        back = load_checkpoint(path)
        assert back.params.dtype == np.float64
        assert back.params.digest() == params.digest()

    def test_save_is_deterministic(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(5))
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(a, params, seed=1)
        save_checkpoint(b, params, seed=1)
        assert open(a, "rb").read() == open(b, "rb").read()


class TestFailClosed:
    def test_truncated_file(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(6))
        path = str(tmp_path / "trunc.ckpt")
        save_checkpoint(path, params)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:len(blob) // 2])
        with pytest.raises((BadMagic, IoError)):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        open(path, "wb").write(b"JUNKJUNKJUNK")
        with pytest.raises(BadMagic):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(7))
        path = str(tmp_path / "v2.ckpt")
        save_checkpoint(path, params)
        blob = bytearray(open(path, "rb").read())
        blob[4] = 99
        open(path, "wb").write(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_checkpoint(str(tmp_path / "nope.ckpt"))

    def test_failed_write_leaves_no_file(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(8))
        target = tmp_path / "no_dir" / "model.ckpt"
        with pytest.raises(IoError):
            save_checkpoint(str(target), params)
        assert not target.exists()
        assert not list(tmp_path.glob("*.ckpt"))


class TestTeacherLoading:
    def test_grid_check(self, tmp_path):
        params = init_params(toy_vit(), np.random.default_rng(9))
        path = str(tmp_path / "teacher.ckpt")
        save_checkpoint(path, params)
        out = load_teacher_checkpoint(path, (2, 2))
        assert not any(t.requires_grad for _, t in out.items())
        with pytest.raises(GridMismatch):
            load_teacher_checkpoint(path, (4, 4))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(MissingCheckpoint):
            load_teacher_checkpoint(str(tmp_path / "absent.ckpt"), (2, 2))
