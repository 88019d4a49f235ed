"""Encoder, decoder and whole-network wiring."""

import numpy as np
import pytest

from dsfernet import ops
from dsfernet.config import DecoderConfig, EncoderConfig, RunConfig, tiny_preset
from dsfernet.decoder import cf_block, concat_block, decode, init_decoder
from dsfernet.encoder import encode, encode_pair, init_encoder
from dsfernet.errors import ShapeError
from dsfernet.model import DsferNet
from dsfernet.nn import Network
from dsfernet.tensor import Tensor, backward

from oracles import batchnorm_train_loops, conv2d_loops

SMALL = EncoderConfig(stage_widths=[2, 3, 4, 4, 4], convs_per_stage=[1, 1, 2, 1, 1])


def small_cfg(**dsfr):
    cfg = RunConfig()
    cfg.encoder = EncoderConfig(stage_widths=[2, 3, 4, 4, 4], convs_per_stage=[1, 1, 2, 1, 1])
    cfg.dsfr.proj_dim = 3
    for k, v in dsfr.items():
        setattr(cfg.dsfr, k, v)
    return cfg


def images(seed, n=2, size=32):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, size, size)), rng.random((n, 3, size, size))


# ------------------------------------------------------------------ encoder

def test_encoder_stage_shapes():
    net = Network(0)
    init_encoder(net, SMALL)
    feats = encode(net, SMALL, Tensor(np.random.default_rng(0).random((3, 48, 32))))
    assert [f.shape for f in feats] == [(2, 48, 32), (3, 24, 16), (4, 12, 8), (4, 6, 4), (4, 3, 2)]


def test_encoder_rejects_indivisible_size():
    net = Network(0)
    init_encoder(net, SMALL)
    with pytest.raises(ShapeError):
        encode(net, SMALL, Tensor(np.zeros((3, 40, 32))))
    with pytest.raises(ShapeError):
        encode_pair(net, SMALL, Tensor(np.zeros((3, 32, 32))), Tensor(np.zeros((3, 16, 32))))


def test_encoder_layer_count_and_names():
    net = Network(0)
    init_encoder(net, EncoderConfig())
    kernels = [k for k in net.params if k.endswith("/kernel")]
    assert len(kernels) == sum(EncoderConfig().convs_per_stage)
    assert net.params["encoder/stage1/conv1/kernel"].shape == (8, 3, 3, 3)
    assert net.params["encoder/stage5/conv3/kernel"].shape == (64, 64, 3, 3)


def test_identical_inputs_give_identical_pairs():
    net = Network(1)
    init_encoder(net, SMALL)
    x, _ = images(1)
    pyr = encode_pair(net, SMALL, Tensor(x), Tensor(x.copy()))
    for a, b in pyr.stages:
        assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("seed", range(3))
def test_swap_equivariance(seed):
    net = Network(seed)
    init_encoder(net, SMALL)
    x1, x2 = images(seed)
    a = encode_pair(net, SMALL, Tensor(x1), Tensor(x2))
    b = encode_pair(net, SMALL, Tensor(x2), Tensor(x1))
    for (p1, p2), (q1, q2) in zip(a.stages, b.swapped().stages):
        assert np.array_equal(p1.data, q1.data) and np.array_equal(p2.data, q2.data)


def test_branches_share_parameters():
    net = Network(2)
    init_encoder(net, SMALL)
    x1, x2 = images(2)
    pyr = encode_pair(net, SMALL, Tensor(x1), Tensor(x2))
    # gradient from branch 1 alone and branch 2 alone land in the same tensor
    net.params.zero_grad()
    backward(ops.sum(pyr.pair(5)[0]))
    g1 = net.params["encoder/stage1/conv1/kernel"].grad.copy()
    pyr = encode_pair(net, SMALL, Tensor(x1), Tensor(x2))
    net.params.zero_grad()
    backward(ops.add(ops.sum(pyr.pair(5)[0]), ops.sum(pyr.pair(5)[1])))
    g12 = net.params["encoder/stage1/conv1/kernel"].grad
    assert not np.allclose(g1, g12)
    # moving the shared kernel moves both branches
    before = encode_pair(net, SMALL, Tensor(x1), Tensor(x1))
    net.params["encoder/stage1/conv1/kernel"].data *= 1.5
    after = encode_pair(net, SMALL, Tensor(x1), Tensor(x1))
    assert np.array_equal(after.pair(3)[0].data, after.pair(3)[1].data)
    assert not np.array_equal(before.pair(3)[0].data, after.pair(3)[0].data)


# ------------------------------------------------------------------ decoder

def cf_oracle(net, stage, f1, f2, mask, up):
    """Step-by-step recomposition for one batched CF block using loop oracles."""
    p = net.params

    def conv_bn_relu(prefix, x):
        k = p[f"{prefix}/kernel"].data
        y = np.stack([conv2d_loops(xi, k, np.zeros(k.shape[0]), padding=1) for xi in x])
        y = batchnorm_train_loops(y, p[f"{prefix}/bn/gamma"].data, p[f"{prefix}/bn/beta"].data, 1e-5)
        return np.maximum(y, 0)

    y = conv_bn_relu(f"decoder/cf{stage}/f1", np.concatenate([f1, f2], axis=1)) * mask
    return conv_bn_relu(f"decoder/cf{stage}/f2", np.concatenate([y, up], axis=1))


def test_cf_block_matches_composition_oracle():
    rng = np.random.default_rng(3)
    net = Network(3)
    init_decoder(net, SMALL, DecoderConfig())
    for name, t in net.params.items():
        if name.endswith("bn/gamma") or name.endswith("bn/beta"):
            t.data = rng.normal(size=t.shape)
    f1, f2 = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=(2, 4, 4, 4))
    mask = rng.random((2, 1, 4, 4))
    up = rng.normal(size=(2, 4, 4, 4))
    out = cf_block(net, 4, Tensor(f1), Tensor(f2), Tensor(mask), Tensor(up))
    np.testing.assert_allclose(out.data, cf_oracle(net, 4, f1, f2, mask, up), atol=1e-12)


def test_ones_mask_is_identity():
    rng = np.random.default_rng(4)
    net = Network(4)
    init_decoder(net, SMALL, DecoderConfig())
    f1, f2, up = (Tensor(rng.normal(size=(2, 4, 4, 4))) for _ in range(3))
    masked = cf_block(net, 4, f1, f2, Tensor(np.ones((2, 1, 4, 4))), up)
    plain = cf_block(net, 4, f1, f2, None, up)
    assert np.array_equal(masked.data, plain.data)


def test_zero_mask_removes_f1_path():
    rng = np.random.default_rng(5)
    net = Network(5)
    init_decoder(net, SMALL, DecoderConfig())
    up = Tensor(rng.normal(size=(2, 4, 4, 4)))
    zero = Tensor(np.zeros((2, 1, 4, 4)))
    a = cf_block(net, 4, Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(2, 4, 4, 4))), zero, up)
    b = cf_block(net, 4, Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(2, 4, 4, 4))), zero, up)
    assert np.array_equal(a.data, b.data)
    net.params.zero_grad()
    backward(ops.sum(ops.mul(a, rng.normal(size=a.shape))))
    for n in ("decoder/cf4/f1/kernel", "decoder/cf4/f1/bn/gamma", "decoder/cf4/f1/bn/beta"):
        g = net.params[n].grad
        assert g is None or not np.any(g)
    assert np.any(net.params["decoder/cf4/f2/kernel"].grad)


def test_mask_shape_mismatch():
    net = Network(0)
    init_decoder(net, SMALL, DecoderConfig())
    f = Tensor(np.zeros((1, 4, 4, 4)))
    with pytest.raises(ShapeError):
        cf_block(net, 4, f, f, Tensor(np.ones((1, 1, 2, 2))), f)
    init_decoder(n2 := Network(0), SMALL, DecoderConfig(fusion="concat"))
    with pytest.raises(ShapeError):
        concat_block(n2, 4, f, f, Tensor(np.ones((1, 1, 2, 2))), f)


def test_stage5_block_has_no_upsampled_input():
    net = Network(0)
    init_decoder(net, SMALL, DecoderConfig())
    assert net.params["decoder/cf5/f2/kernel"].shape == (4, 4, 3, 3)
    assert net.params["decoder/cf4/f2/kernel"].shape == (4, 8, 3, 3)
    assert net.params["decoder/cf1/f1/kernel"].shape == (2, 4, 3, 3)
    assert net.params["decoder/head/kernel"].shape == (2, 2, 1, 1)


def test_concat_block_wiring():
    rng = np.random.default_rng(6)
    net = Network(6)
    init_decoder(net, SMALL, DecoderConfig(fusion="concat"))
    assert net.params["decoder/concat4/f/kernel"].shape == (4, 12, 3, 3)
    f1, f2, up = (rng.normal(size=(2, 4, 4, 4)) for _ in range(3))
    mask = rng.random((2, 1, 4, 4))
    out = concat_block(net, 4, Tensor(f1), Tensor(f2), Tensor(mask), Tensor(up))
    ref = net.conv_bn_relu("decoder/concat4/f", Tensor(np.concatenate([np.concatenate([f1, f2], 1) * mask, up], 1)))
    assert np.array_equal(out.data, ref.data)


def test_zero_parameters_give_constant_logits():
    net = Network(7)
    init_encoder(net, SMALL)
    init_decoder(net, SMALL, DecoderConfig())
    for t in net.params.values():
        t.data = np.zeros_like(t.data)
    x1, x2 = images(7)
    logits = decode(net, DecoderConfig(), encode_pair(net, SMALL, Tensor(x1), Tensor(x2)), {}).data
    assert logits.shape == (2, 2, 32, 32)
    assert np.all(logits == logits[:, :, :1, :1])


# ------------------------------------------------------------------ full network

def test_shape_law_256():
    cfg = tiny_preset()
    net = DsferNet(cfg, seed=0)
    x1, x2 = images(0, n=1, size=256)
    out = net(x1, x2)
    assert out.dsfr[4].retrieved_map.shape == (1, 1, 32, 32)
    assert out.dsfr[5].retrieved_map.shape == (1, 1, 16, 16)
    assert out.dsfr[4].intermediate_map.shape == (1, 2, 32, 32)
    assert out.pyramid.pair(4)[0].shape == (1, 32, 32, 32)
    assert out.logits.shape == (1, 2, 256, 256)


def test_network_without_retrieval_has_no_dsfr_params():
    cfg = small_cfg(enabled=False)
    net = DsferNet(cfg)
    assert not any(k.startswith("dsfr") for k in net.params)
    out = net(*images(0))
    assert out.dsfr == {}
    assert out.logits.shape == (2, 2, 32, 32)


def test_stage_projections_are_not_shared():
    net = DsferNet(small_cfg())
    assert net.params["dsfr4/w_d"] is not net.params["dsfr5/w_d"]
    assert net.params["dsfr4/w_s"].shape == (4, 3)


def test_construction_is_seeded():
    a, b = DsferNet(small_cfg(), seed=11), DsferNet(small_cfg(), seed=11)
    for (k, t), (_, u) in zip(a.params.items(), b.params.items()):
        assert np.array_equal(t.data, u.data), k
