"""Transformer noise predictor with adaptive-layer-norm time conditioning.

The network maps a batch of states ``(B, L, N + 5)`` and timesteps ``(B,)``
to predicted noise of the same shape. A learned per-row embedding is added
after the input encoder; with ``positional=False`` the map is equivariant to
permutations of the ``L`` element rows.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Node, Tape

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LACECKPT"
CHECKPOINT_VERSION = 1


class DenoiserError(RuntimeError):
    pass


class CheckpointError(DenoiserError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    num_classes: int
    seq_len: int = 25
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    time_embed_dim: int = 64
    positional: bool = True

    def __post_init__(self):
        for name in ("num_classes", "seq_len", "embed_dim", "n_layers", "n_heads", "ffn_dim", "time_embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def input_dim(self) -> int:
        return self.num_classes + 5

    @classmethod
    def paper_scale(cls, num_classes: int, embed_dim: int = 1024) -> "DenoiserConfig":
        return cls(num_classes, 25, embed_dim, 4, 16, 2048, 128)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding ``(B,) -> (B, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _adaln_names(prefix: str) -> list[str]:
    return [f"{prefix}.{net}.{p}" for net in ("gamma", "beta") for p in ("w1", "b1", "w2", "b2")]


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes."""
    E, F, D, Tm = cfg.embed_dim, cfg.ffn_dim, cfg.input_dim, cfg.time_embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "enc.w1": (D, E),
        "enc.b1": (E,),
        "enc.w2": (E, E),
        "enc.b2": (E,),
    }
    if cfg.positional:
        shapes["enc.pos"] = (cfg.seq_len, E)

    def adaln(prefix):
        for name in _adaln_names(prefix):
            part = name.rsplit(".", 1)[1]
            shapes[name] = {"w1": (Tm, E), "b1": (E,), "w2": (E, E), "b2": (E,)}[part]

    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        adaln(f"{p}.ln1")
        for m in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{m}"] = (E, E)
            shapes[f"{p}.attn.b{m}"] = (E,)
        adaln(f"{p}.ln2")
        shapes[f"{p}.ffn.w1"] = (E, F)
        shapes[f"{p}.ffn.b1"] = (F,)
        shapes[f"{p}.ffn.w2"] = (F, E)
        shapes[f"{p}.ffn.b2"] = (E,)
    adaln("final")
    shapes.update({"dec.w1": (E, E), "dec.b1": (E,), "dec.w2": (E, D), "dec.b2": (D,)})
    return shapes


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, zero AdaLN output layers."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        last = name.rsplit(".", 1)[1]
        zero_out = (".gamma." in name or ".beta." in name) and last in ("w2", "b2")
        if len(shape) == 1 or zero_out:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _linear(x: Node, p: dict[str, Node], prefix: str, w: str = "w", b: str = "b") -> Node:
    return x @ p[f"{prefix}.{w}"] + p[f"{prefix}.{b}"]


def _mlp(x: Node, p: dict[str, Node], prefix: str) -> Node:
    h = ag.silu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def adaln(x: Node, temb: Node, p: dict[str, Node], prefix: str) -> Node:
    """``(1 + f_gamma(v)) * normalize(x) + f_beta(v)`` per token.

    ``x`` is ``(B, L, E)`` and ``temb`` is ``(B, Tm)``; the time networks
    produce one scale/shift per batch item, shared by its ``L`` tokens.
    """
    B = x.shape[0]
    gamma = _mlp(temb, p, f"{prefix}.gamma").reshape(B, 1, -1)
    beta = _mlp(temb, p, f"{prefix}.beta").reshape(B, 1, -1)
    return (1.0 + gamma) * ag.normalize(x) + beta


def attention(x: Node, p: dict[str, Node], prefix: str, n_heads: int) -> Node:
    B, L, E = x.shape
    dh = E // n_heads

    def heads(m):
        h = _linear(x, p, prefix, f"w{m}", f"b{m}").reshape(B, L, n_heads, dh)
        return ag.transpose(h, (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    out = ag.softmax(scores, axis=-1) @ v
    out = ag.transpose(out, (0, 2, 1, 3)).reshape(B, L, E)
    return _linear(out, p, prefix, "wo", "bo")


def forward_nodes(cfg: DenoiserConfig, p: dict[str, Node], x: Node, t) -> Node:
    tape = x.tape
    temb = tape.const(timestep_embedding(t, cfg.time_embed_dim))
    h = _mlp(x, p, "enc")
    if cfg.positional:
        h = h + p["enc.pos"]
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}"
        h = h + attention(adaln(h, temb, p, f"{pre}.ln1"), p, f"{pre}.attn", cfg.n_heads)
        h = h + _mlp(adaln(h, temb, p, f"{pre}.ln2"), p, f"{pre}.ffn")
    h = adaln(h, temb, p, "final")
    return _mlp(h, p, "dec")


@dataclass
class ForwardPass:
    """A recorded forward pass ready for :meth:`Denoiser.backward`."""

    tape: Tape
    output: Node
    params: dict[str, Node]
    x: Node

    @property
    def eps_hat(self) -> np.ndarray:
        return self.output.value


@dataclass
class Denoiser:
    config: DenoiserConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0) -> "Denoiser":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def _check(self, x: np.ndarray):
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != cfg.input_dim:
            raise DenoiserError(f"expected (B, L, {cfg.input_dim}) input, got {x.shape}")
        bad = [k for k, v in self.params.items() if not np.all(np.isfinite(v))]
        if bad:
            raise DenoiserError(f"non-finite values in parameters: {', '.join(bad[:5])}")

    def __call__(self, x_t: np.ndarray, t) -> np.ndarray:
        """Predict noise without recording gradients."""
        squeeze = np.ndim(x_t) == 2
        x = np.asarray(x_t, dtype=np.float64)[None] if squeeze else np.asarray(x_t, dtype=np.float64)
        self._check(x)
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        tape = Tape(record=False)
        p = {k: tape.const(v) for k, v in self.params.items()}
        out = forward_nodes(self.config, p, tape.const(x), t).value
        return out[0] if squeeze else out

    def forward(self, x_t: np.ndarray, t, input_grad: bool = False) -> ForwardPass:
        """Record a forward pass on a fresh tape for later backward."""
        x = np.asarray(x_t, dtype=np.float64)
        self._check(x)
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        tape = Tape()
        p = {k: tape.leaf(v) for k, v in self.params.items()}
        xn = tape.leaf(x, requires_grad=input_grad)
        return ForwardPass(tape, forward_nodes(self.config, p, xn, t), p, xn)

    @staticmethod
    def backward(fp: ForwardPass, loss_grad: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
        """Parameter gradients (and input gradient when recorded) for ``d loss / d eps_hat``."""
        grads = fp.tape.backward(fp.output, loss_grad)
        pg = {k: np.array(grads[n]) for k, n in fp.params.items()}
        xg = np.array(grads[fp.x]) if fp.x.requires_grad else None
        return pg, xg

    def iter_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.params.items()

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Denoiser":
        return Denoiser(self.config, {k: v.copy() for k, v in self.params.items()})


def save_checkpoint(model: Denoiser, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write ``magic | version | header length | header JSON | float64 blobs | CRC32``.

    ``extra`` lands in the header verbatim (schedule, constraint settings, ...).
    """
    shapes = param_shapes(model.config)
    if set(shapes) != set(model.params):
        raise CheckpointConfigError("parameter set does not match the config")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "num_classes": model.config.num_classes,
        "max_len": model.config.seq_len,
        "params": [{"name": k, "shape": list(s)} for k, s in shapes.items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<II", CHECKPOINT_VERSION, len(hbytes))
    body += hbytes
    for name in shapes:
        body += np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    atomic_write_bytes(path, bytes(body))


def load_checkpoint(
    path: str | os.PathLike,
    expect_num_classes: int | None = None,
    expect_max_len: int | None = None,
) -> tuple[Denoiser, dict]:
    """Read a checkpoint; returns the model and the header's ``extra`` dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:8] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(data[16 : 16 + hlen])
    cfg = DenoiserConfig(**header["config"])
    if expect_num_classes is not None and cfg.num_classes != expect_num_classes:
        raise CheckpointConfigError(f"checkpoint has N={cfg.num_classes}, expected {expect_num_classes}")
    if expect_max_len is not None and cfg.seq_len != expect_max_len:
        raise CheckpointConfigError(f"checkpoint has L={cfg.seq_len}, expected {expect_max_len}")
    offset = 16 + hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        offset += 8 * n
    if offset != len(data) - 4:
        raise CorruptCheckpointError(f"{path}: unexpected payload length")
    return Denoiser(cfg, params), header.get("extra", {})


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
