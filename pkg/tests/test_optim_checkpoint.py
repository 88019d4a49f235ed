import struct

import numpy as np
import pytest

from dsfernet import ops
from dsfernet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from dsfernet.config import OptimConfig, RunConfig
from dsfernet.errors import ConfigError, DataError, NumericError
from dsfernet.optim import Adam, adam_step, is_decayed, linear_lr
from dsfernet.params import ParameterStore
from dsfernet.tensor import backward


def store(**arrays):
    ps = ParameterStore()
    for k, v in arrays.items():
        ps.add(k.replace("__", "/"), v)
    return ps


def test_linear_schedule():
    assert linear_lr(1e-3, 0, 3000) == 1e-3
    assert linear_lr(1e-3, 1500, 3000) == pytest.approx(5e-4)
    assert linear_lr(1e-3, 3000, 3000) == 0.0
    assert linear_lr(1e-3, 4000, 3000) == 0.0
    lrs = [linear_lr(0.1, i, 50) for i in range(60)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_decay_targets():
    assert is_decayed("encoder/stage1/conv1/kernel")
    assert is_decayed("dsfr4/w_d") and is_decayed("dsfr5/w_s")
    assert not is_decayed("decoder/head/bias")
    assert not is_decayed("encoder/stage1/conv1/bn/gamma")


def test_zero_gradient_applies_only_decay():
    ps = store(a__kernel=np.full(3, 2.0), a__bias=np.full(3, 2.0))
    for t in ps.values():
        t.grad = np.zeros_like(t.data)
    Adam(ps, OptimConfig(weight_decay=0.1)).step(0.5)
    np.testing.assert_array_equal(ps["a/kernel"].data, np.full(3, 2.0 * (1 - 0.05)))
    np.testing.assert_array_equal(ps["a/bias"].data, np.full(3, 2.0))


def test_quadratic_converges():
    ps = store(x=np.array([0.0]))
    opt = Adam(ps, OptimConfig(lr0=0.05, weight_decay=0.0))
    x = ps["x"]
    for _ in range(2000):
        ps.zero_grad()
        d = ops.sub(x, 3.0)
        backward(ops.sum(ops.mul(d, d)))
        adam_step(ps, opt, 0.05)
    assert abs(x.data[0] - 3.0) < 0.01


def test_schedule_endpoint_freezes_parameters():
    ps = store(w__kernel=np.array([1.0, -2.0]))
    ps["w/kernel"].grad = np.array([0.3, 0.7])
    opt = Adam(ps, OptimConfig(weight_decay=1e-5))
    opt.step(linear_lr(1e-3, 100, 100))
    np.testing.assert_array_equal(ps["w/kernel"].data, [1.0, -2.0])


def test_nan_gradient_names_parameter():
    ps = store(good=np.zeros(2), bad__kernel=np.zeros(2))
    ps["bad/kernel"].grad = np.array([0.0, np.nan])
    with pytest.raises(NumericError, match="bad/kernel"):
        Adam(ps, OptimConfig()).step(1e-3)


def test_bias_correction_first_step():
    ps = store(p=np.array([1.0]))
    ps["p"].grad = np.array([4.0])
    Adam(ps, OptimConfig(weight_decay=0.0, adam_epsilon=0.0)).step(0.1)
    # first bias-corrected step has magnitude lr regardless of gradient scale
    assert ps["p"].data[0] == pytest.approx(0.9, abs=1e-15)


# ------------------------------------------------------------------ checkpoints

def make_ckpt(cfg=None):
    rng = np.random.default_rng(0)
    return Checkpoint(
        config=cfg or RunConfig(),
        params={"a/kernel": rng.normal(size=(2, 3, 3, 3)), "b": rng.normal(size=4)},
        buffers={"a/bn/running_mean": rng.normal(size=2)},
        optimizer={"a/kernel/adam_m": rng.normal(size=(2, 3, 3, 3))},
        optimizer_step=7,
        iteration=12,
        val_metrics={"F1": 0.5},
        class_weights=(0.1, 0.9),
    )


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = make_ckpt()
    save_checkpoint(ck, tmp_path / "x.ckpt")
    back = load_checkpoint(tmp_path / "x.ckpt", expect=RunConfig())
    for group in ("params", "buffers", "optimizer"):
        a, b = getattr(ck, group), getattr(back, group)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k]) and a[k].shape == b[k].shape
    assert back.iteration == 12 and back.optimizer_step == 7
    assert back.val_metrics == {"F1": 0.5} and back.class_weights == (0.1, 0.9)
    assert back.config.to_dict() == ck.config.to_dict()


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(make_ckpt(), tmp_path / "x.ckpt")
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == b"DSFERCKP"
    version, n = struct.unpack("<IQ", raw[8:20])
    assert version == 1
    assert b"config_hash" in raw[20:20 + n]


def test_architecture_mismatch_rejected(tmp_path):
    save_checkpoint(make_ckpt(), tmp_path / "x.ckpt")
    other = RunConfig()
    other.dsfr.proj_dim = 16
    with pytest.raises(ConfigError, match="architecture"):
        load_checkpoint(tmp_path / "x.ckpt", expect=other)
    # training-only settings do not change the architecture hash
    tweaked = RunConfig()
    tweaked.optim.lr0 = 0.5
    load_checkpoint(tmp_path / "x.ckpt", expect=tweaked)


def test_bad_magic(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a checkpoint at all")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "junk")
