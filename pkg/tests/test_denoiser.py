import os

import numpy as np
import pytest

from lace import autograd as ag
from lace.denoiser import (
    CheckpointConfigError,
    CheckpointVersionError,
    CorruptCheckpointError,
    Denoiser,
    DenoiserConfig,
    DenoiserError,
    adaln,
    attention,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    timestep_embedding,
)

SMALL = DenoiserConfig(num_classes=3, seq_len=4, embed_dim=8, n_layers=2, n_heads=2, ffn_dim=16, time_embed_dim=8)


def randomized(cfg, seed=0, scale=0.3):
    """A model whose zero-initialised AdaLN heads are replaced by random weights."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    for k, v in params.items():
        if not np.any(v):
            params[k] = rng.normal(0, scale, v.shape)
    return Denoiser(cfg, params)


def group_rel_error(analytic, numeric):
    den = np.linalg.norm(numeric)
    return np.linalg.norm(analytic - numeric) / den if den > 1e-8 else np.linalg.norm(analytic)


def fd_grad(f, x, idx, h=1e-5):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


# autograd primitives


def _check_op(build, *shapes, seed=0, tol=1e-7):
    rng = np.random.default_rng(seed)
    vals = [rng.normal(size=s) for s in shapes]
    proj = None

    def value():
        nonlocal proj
        tape = ag.Tape(record=False)
        out = build(*[tape.const(v) for v in vals]).value
        if proj is None:
            proj = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float(np.sum(out * proj))

    value()
    tape = ag.Tape()
    nodes = [tape.leaf(v) for v in vals]
    out = build(*nodes)
    grads = tape.backward(out, proj)
    for v, n in zip(vals, nodes):
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            num[idx] = fd_grad(value, v, idx)
        assert group_rel_error(grads[n], num) <= tol


@pytest.mark.parametrize(
    "build,shapes",
    [
        (lambda a, b: a + b, [(3, 4), (4,)]),
        (lambda a, b: a - b, [(2, 3, 4), (1, 4)]),
        (lambda a, b: a * b, [(3, 4), (3, 1)]),
        (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
        (lambda a, b: a @ b, [(2, 2, 3, 4), (2, 2, 4, 3)]),
        (lambda a: ag.silu(a), [(3, 5)]),
        (lambda a: ag.softmax(a, -1), [(2, 3, 5)]),
        (lambda a: ag.normalize(a), [(2, 3, 6)]),
        (lambda a: ag.square(a).sum(axis=1), [(3, 4)]),
        (lambda a: ag.mean(a, axis=0, keepdims=True), [(3, 4)]),
        (lambda a: ag.transpose(a, (0, 2, 1)).reshape(2, -1), [(2, 3, 4)]),
        (lambda a: 2.0 - a, [(3,)]),
    ],
)
def test_primitive_gradients(build, shapes):
    _check_op(build, *shapes)


def test_stale_tape_reuse():
    tape = ag.Tape()
    x = tape.leaf(np.ones(3))
    y = (x * 2.0).sum()
    tape.backward(y)
    with pytest.raises(ag.StaleTapeError):
        tape.backward(y)
    with pytest.raises(ag.StaleTapeError):
        tape.leaf(np.ones(2))


def test_linear_subnetwork_closed_form(rng):
    X = rng.normal(size=(20, 3))
    W = rng.normal(size=(3, 2))
    Y = rng.normal(size=(20, 2))
    tape = ag.Tape()
    w = tape.leaf(W)
    loss = ag.square(tape.const(X) @ w - tape.const(Y)).sum()
    g = tape.backward(loss)[w]
    np.testing.assert_allclose(g, 2 * X.T @ (X @ W - Y), rtol=1e-12)


def test_custom_op_and_unreached_nodes(rng):
    tape = ag.Tape()
    a = tape.leaf(rng.normal(size=3))
    b = tape.leaf(rng.normal(size=3))
    out = ag.custom(np.sin(a.value), [a], lambda g: (g * np.cos(a.value),)).sum()
    grads = tape.backward(out)
    np.testing.assert_allclose(grads[a], np.cos(a.value))
    assert not np.any(grads[b])


# AdaLN and attention


def _adaln_setup(seed, zero_heads=False):
    cfg = SMALL
    m = randomized(cfg, seed)
    p = {k: v for k, v in m.params.items() if k.startswith("blocks.0.ln1")}
    if zero_heads:
        p = {k: (np.zeros_like(v) if k.endswith(("w2", "b2")) else v) for k, v in p.items()}
    return cfg, p


def test_adaln_zero_heads_is_layer_norm(rng):
    cfg, p = _adaln_setup(0, zero_heads=True)
    x = rng.normal(size=(2, 4, cfg.embed_dim))
    tape = ag.Tape(record=False)
    out = adaln(tape.const(x), tape.const(timestep_embedding([3, 900], 8)), {k: tape.const(v) for k, v in p.items()}, "blocks.0.ln1").value
    mu = x.mean(-1, keepdims=True)
    ln = (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ln, atol=1e-12)


def test_adaln_constant_input_returns_shift():
    cfg, p = _adaln_setup(1)
    x = np.full((2, 4, cfg.embed_dim), 0.7)
    temb = timestep_embedding([3, 900], 8)
    tape = ag.Tape(record=False)
    P = {k: tape.const(v) for k, v in p.items()}
    out = adaln(tape.const(x), tape.const(temb), P, "blocks.0.ln1").value
    h = temb @ p["blocks.0.ln1.beta.w1"] + p["blocks.0.ln1.beta.b1"]
    fb = (h / (1 + np.exp(-h))) @ p["blocks.0.ln1.beta.w2"] + p["blocks.0.ln1.beta.b2"]
    np.testing.assert_allclose(out, np.broadcast_to(fb[:, None, :], out.shape), atol=1e-12)


def _block_grad_check(fn, names, seed):
    cfg = SMALL
    m = randomized(cfg, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, cfg.embed_dim))
    temb = timestep_embedding([5, 600], 8)
    proj = rng.normal(size=x.shape)

    def value():
        tape = ag.Tape(record=False)
        P = {k: tape.const(v) for k, v in m.params.items()}
        return float(np.sum(fn(tape.const(x), tape.const(temb), P).value * proj))

    tape = ag.Tape()
    P = {k: tape.leaf(v) for k, v in m.params.items()}
    xn = tape.leaf(x)
    grads = tape.backward(fn(xn, tape.const(temb), P), proj)
    for name in names + ["x"]:
        arr = x if name == "x" else m.params[name]
        node = xn if name == "x" else P[name]
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            num[idx] = fd_grad(value, arr, idx)
        assert group_rel_error(grads[node], num) <= 1e-3, name


@pytest.mark.parametrize("seed", [0, 1])
def test_adaln_gradients(seed):
    names = [k for k in param_shapes(SMALL) if k.startswith("blocks.0.ln1")]
    _block_grad_check(lambda x, t, p: adaln(x, t, p, "blocks.0.ln1"), names, seed)


@pytest.mark.parametrize("seed", [0, 1])
def test_attention_gradients(seed):
    names = [k for k in param_shapes(SMALL) if k.startswith("blocks.0.attn")]
    _block_grad_check(lambda x, t, p: attention(x, p, "blocks.0.attn", 2), names, seed)


# full network


def test_network_gradients_all_parameters():
    m = randomized(SMALL, 3)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, SMALL.input_dim))
    t = np.array([7, 420])
    loss = lambda: float(np.sum(m(x, t) ** 2))  # noqa: E731
    fp = m.forward(x, t, input_grad=True)
    grads, gx = Denoiser.backward(fp, 2 * fp.eps_hat)
    for name, arr in m.params.items():
        flat = list(np.ndindex(arr.shape))
        pick = [flat[i] for i in rng.choice(len(flat), size=min(6, len(flat)), replace=False)]
        num = np.array([fd_grad(loss, arr, idx) for idx in pick])
        ana = np.array([grads[name][idx] for idx in pick])
        assert group_rel_error(ana, num) <= 1e-3, name
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        num[idx] = fd_grad(loss, x, idx)
    assert group_rel_error(gx, num) <= 1e-3


def test_zero_decoder_outputs_zero(rng):
    m = Denoiser.create(SMALL, 0)
    m.params["dec.w2"][:] = 0
    m.params["dec.b2"][:] = 0
    assert not np.any(m(rng.normal(size=(3, 4, SMALL.input_dim)), 10))


def test_shape_contract_and_single_item(rng):
    m = Denoiser.create(SMALL, 0)
    assert m(rng.normal(size=(5, 4, 8)), np.arange(1, 6)).shape == (5, 4, 8)
    assert m(rng.normal(size=(4, 8)), 3).shape == (4, 8)
    with pytest.raises(DenoiserError):
        m(rng.normal(size=(2, 4, 7)), 3)


def test_permutation_equivariance_without_positions(rng):
    from dataclasses import replace

    m = randomized(replace(SMALL, positional=False), 4, 0.1)
    assert "enc.pos" not in m.params
    x = rng.normal(size=(2, 4, 8))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(m(x[:, perm], 50), m(x, 50)[:, perm], atol=1e-12)
    p = randomized(SMALL, 4, 0.1)
    assert p.params["enc.pos"].shape == (4, 8)
    assert not np.allclose(p(x[:, perm], 50), p(x, 50)[:, perm])


def test_forward_deterministic(rng):
    m = Denoiser.create(SMALL, 0)
    x = rng.normal(size=(2, 4, 8))
    np.testing.assert_array_equal(m(x, 5), m(x, 5))
    np.testing.assert_array_equal(m(x, 5), m.forward(x, 5).eps_hat)


def test_nan_parameters_fail_fast(rng):
    m = Denoiser.create(SMALL, 0)
    m.params["enc.w1"][0, 0] = np.nan
    with pytest.raises(DenoiserError, match="enc.w1"):
        m(rng.normal(size=(1, 4, 8)), 1)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(5, embed_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(0)
    big = DenoiserConfig.paper_scale(5)
    assert (big.n_layers, big.n_heads, big.ffn_dim) == (4, 16, 2048)


def test_time_embedding_shape():
    e = timestep_embedding(np.array([1, 500, 1000]), 16)
    assert e.shape == (3, 16) and np.all(np.abs(e) <= 1)


# checkpoints


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    m = randomized(SMALL, 5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, {"schedule_hash": "abc", "canvas": [3, 4]})
    back, extra = load_checkpoint(path, expect_num_classes=3, expect_max_len=4)
    assert extra == {"schedule_hash": "abc", "canvas": [3, 4]}
    assert back.config == m.config
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    x = rng.normal(size=(2, 4, 8))
    assert np.array_equal(back(x, 9), m(x, 9))
    assert not [p for p in os.listdir(tmp_path) if p.startswith(".tmp")]


def test_checkpoint_mismatched_classes(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(Denoiser.create(SMALL, 0), path)
    with pytest.raises(CheckpointConfigError):
        load_checkpoint(path, expect_num_classes=5)
    with pytest.raises(CheckpointConfigError):
        load_checkpoint(path, expect_max_len=25)


def test_checkpoint_checksum_flip(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(Denoiser.create(SMALL, 0), path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_and_garbage(tmp_path):
    import struct
    import zlib

    path = tmp_path / "m.ckpt"
    save_checkpoint(Denoiser.create(SMALL, 0), path)
    data = bytearray(path.read_bytes()[:-4])
    data[8:12] = struct.pack("<I", 99)
    data += struct.pack("<I", zlib.crc32(bytes(data)) & 0xFFFFFFFF)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
