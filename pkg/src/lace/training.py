"""Two-phase training: plain denoising first, then with aesthetic constraints."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import constraints as C
from .conditioning import COMPLETE_FRAC_MAX, sample_training_mask
from .denoiser import Denoiser, DenoiserConfig, save_checkpoint
from .diffusion import NoiseSchedule, make_linear_schedule
from .layout import Layout, encode_batch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_simple", "l_mse", "c_alg", "c_olp", "lr")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


class TrainingDivergedError(TrainingError):
    pass


# "literal": plain MSE on x0_pred, an implicit 1/alpha_bar weight on the noise
# error that reaches ~2.5e4 at t=T. "min-snr": per-item weight min(1, SNR_t),
# identical to literal wherever alpha_bar >= 0.5.
MSE_WEIGHTINGS = ("literal", "min-snr")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    phase2_learning_rate: float | None = 3e-5  # None reuses learning_rate
    phase2_warmup_steps: int | None = 0  # None reuses warmup_steps
    phase1_steps: int = 3000
    phase2_steps: int = 2000
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    use_overlap: bool = True
    alignment_kind: str = "global"
    beta_w: float = C.DEFAULT_BETA_W
    orientation: str = C.SMALL_T_ACTIVE
    simple_loss_unmasked_only: bool = False
    mse_weight: float = 1.0
    mse_weighting: str = "min-snr"
    complete_frac_max: float = COMPLETE_FRAC_MAX
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 0
    log_every: int = 100
    sample_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.phase1_steps < 0 or self.phase2_steps < 0 or self.warmup_steps < 0:
            raise ValueError("batch size must be positive and step counts non-negative")
        if self.learning_rate <= 0 or (self.phase2_learning_rate is not None and self.phase2_learning_rate <= 0):
            raise ValueError("learning rates must be positive")
        if self.phase2_warmup_steps is not None and self.phase2_warmup_steps < 0:
            raise ValueError("phase2_warmup_steps must be non-negative")
        if self.alignment_kind not in ("local", "global"):
            raise ValueError("alignment_kind must be 'local' or 'global'")
        if self.mse_weighting not in MSE_WEIGHTINGS:
            raise ValueError(f"mse_weighting must be one of {MSE_WEIGHTINGS}")
        if self.mse_weight < 0:
            raise ValueError("mse_weight must be non-negative")
        if self.orientation not in C.ORIENTATIONS:
            raise ValueError(f"orientation must be one of {C.ORIENTATIONS}")

    def phase_lr(self, phase: int) -> tuple[float, int]:
        """Base learning rate and warmup length for ``phase``."""
        if phase == 1:
            return self.learning_rate, self.warmup_steps
        lr = self.learning_rate if self.phase2_learning_rate is None else self.phase2_learning_rate
        wu = self.warmup_steps if self.phase2_warmup_steps is None else self.phase2_warmup_steps
        return lr, wu

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def weight_schedule(self) -> C.ConstraintWeightSchedule:
        return C.ConstraintWeightSchedule(self.diffusion_steps, self.beta_w, self.orientation)


@dataclass
class CorpusArrays:
    """A corpus stacked for training."""

    x0: np.ndarray  # (M, L, N + 5)
    n_real: np.ndarray  # (M,)
    num_classes: int

    @classmethod
    def from_layouts(cls, layouts: Sequence[Layout]) -> "CorpusArrays":
        if not layouts:
            raise TrainingError("empty corpus")
        return cls(encode_batch(layouts), np.array([lay.n_real for lay in layouts]), layouts[0].num_classes)

    def __len__(self):
        return len(self.n_real)

    @property
    def max_len(self) -> int:
        return self.x0.shape[1]


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    """Linear warmup then half-cycle cosine decay to zero over ``total`` steps."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class StepResult:
    l_simple: float
    l_mse: float
    c_alg: float
    c_olp: float
    c_weighted: float
    total: float
    grad_norm: float = 0.0
    lr: float = 0.0


def batch_loss_and_grad(
    model,
    x0: np.ndarray,
    n_real: np.ndarray,
    t: np.ndarray,
    noise: np.ndarray,
    masks: np.ndarray,
    schedule: NoiseSchedule,
    config: TrainConfig,
    omega: np.ndarray,
) -> tuple[StepResult, dict[str, np.ndarray]]:
    """Loss terms and parameter gradients for one batch with fixed randomness.

    ``model`` needs ``forward(x, t) -> pass`` (with ``.eps_hat``) and
    ``backward(pass, d_loss/d_eps_hat) -> (param_grads, _)``.
    """
    B = x0.shape[0]
    N = x0.shape[-1] - 5
    ab = schedule.alpha_bars[t][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    x_hat = np.where(masks != 0, x0, x_t)

    fp = model.forward(x_hat, t)
    eps_hat = fp.eps_hat
    x0_pred = (x_hat - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)

    per_item = x0[0].size
    resid = eps_hat - noise
    if config.simple_loss_unmasked_only:
        keep = (masks == 0).astype(np.float64)
        resid = resid * keep
    l_simple = float(np.sum(resid * resid)) / (B * per_item)
    d_eps = 2.0 * resid / (B * per_item)

    err = x0_pred - x0
    if config.mse_weighting == "min-snr":
        w = np.minimum(1.0, ab / (1.0 - ab))
    else:
        w = np.ones_like(ab)
    l_mse = float(np.sum(w * err * err)) / (B * per_item)
    d_x0 = 2.0 * config.mse_weight * w * err / (B * per_item)

    boxes = x0_pred[..., N + 1 :]
    if config.alignment_kind == "local":
        c_alg, g_alg = C.local_alignment_batch(boxes, n_real)
    else:
        c_alg, g_alg = C.global_alignment_batch(boxes, x0[..., N + 1 :], n_real)
    if config.use_overlap:
        c_olp, g_olp = C.overlap_batch(boxes, n_real)
    else:
        c_olp, g_olp = np.zeros(B), np.zeros_like(boxes)
    c_weighted = float(np.mean(omega * (c_alg + c_olp)))
    if np.any(omega != 0):
        d_x0[..., N + 1 :] += (omega / B)[:, None, None] * (g_alg + g_olp)
    d_eps = d_eps + d_x0 * (-np.sqrt(1.0 - ab) / np.sqrt(ab))

    res = StepResult(
        l_simple,
        l_mse,
        float(np.mean(c_alg)),
        float(np.mean(c_olp)),
        c_weighted,
        l_simple + config.mse_weight * l_mse + c_weighted,
    )
    for name in ("l_simple", "l_mse", "c_weighted"):
        if not math.isfinite(getattr(res, name)):
            raise NonFiniteLossError(f"non-finite {name}: {getattr(res, name)}")
    grads, _ = model.backward(fp, d_eps)
    return res, grads


def draw_batch(rng: np.random.Generator, corpus: CorpusArrays, config: TrainConfig, T: int):
    """Sample items, timesteps, noise and per-item task masks."""
    idx = rng.integers(len(corpus), size=config.batch_size)
    x0 = corpus.x0[idx]
    n_real = corpus.n_real[idx]
    t = rng.integers(1, T + 1, size=config.batch_size)
    noise = rng.standard_normal(x0.shape)
    masks = np.stack(
        [
            sample_training_mask(rng, int(n), corpus.max_len, corpus.num_classes, config.complete_frac_max)[1]
            for n in n_real
        ]
    )
    return x0, n_real, t, noise, masks


def training_step(
    model,
    optimizer: Adam,
    corpus: CorpusArrays,
    rng: np.random.Generator,
    config: TrainConfig,
    schedule: NoiseSchedule,
    omega_table: np.ndarray,
    lr: float,
) -> StepResult:
    """One optimizer update; ``omega_table`` holds the constraint weight per timestep."""
    x0, n_real, t, noise, masks = draw_batch(rng, corpus, config, schedule.T)
    res, grads = batch_loss_and_grad(model, x0, n_real, t, noise, masks, schedule, config, omega_table[t])
    res.grad_norm = clip_grads(grads, config.grad_clip)
    res.lr = lr
    optimizer.step(model.params, grads, lr)
    return res


@dataclass
class TrainResult:
    model: Denoiser
    phase1_model: Denoiser
    schedule: NoiseSchedule
    history: list[dict] = field(default_factory=list)


def checkpoint_extra(config: TrainConfig, schedule: NoiseSchedule, canvas=(1, 1), phase: int = 2) -> dict:
    from .diffusion import schedule_hash

    return {
        "schedule": schedule.to_json(),
        "schedule_hash": schedule_hash(schedule),
        "beta_w": config.beta_w,
        "orientation": config.orientation,
        "canvas": list(canvas),
        "phase": phase,
        "train_config": asdict(config),
    }


def train(
    corpus: CorpusArrays | Sequence[Layout],
    config: TrainConfig,
    model_config: DenoiserConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    canvas: tuple[int, int] = (1, 1),
    init_model: Denoiser | None = None,
) -> TrainResult:
    """Run phase 1 (no constraints) then phase 2 (constraints on).

    Writes ``phase1.ckpt``, ``final.ckpt`` and ``metrics.csv`` to ``out_dir``
    when given.
    """
    if not isinstance(corpus, CorpusArrays):
        corpus = CorpusArrays.from_layouts(corpus)
    schedule = config.schedule()
    if init_model is not None:
        model = init_model.copy()
    else:
        cfg = model_config or DenoiserConfig(corpus.num_classes, corpus.max_len)
        if cfg.num_classes != corpus.num_classes or cfg.seq_len != corpus.max_len:
            raise TrainingError(
                f"model expects N={cfg.num_classes}, L={cfg.seq_len}; corpus has "
                f"N={corpus.num_classes}, L={corpus.max_len}"
            )
        model = Denoiser.create(cfg, config.seed)
    optimizer = Adam(model.params, config.adam_betas, config.adam_eps)
    omega_on = config.weight_schedule().weights()
    omega_off = np.zeros_like(omega_on)
    history: list[dict] = []
    writer = None
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

    phase1_model = model
    step = 0
    baseline = None
    above = 0
    try:
        for phase, steps, omega in ((1, config.phase1_steps, omega_off), (2, config.phase2_steps, omega_on)):
            base_lr, warmup = config.phase_lr(phase)
            for k in range(steps):
                rng = np.random.default_rng([config.seed, step])
                lr = lr_at(k, steps, base_lr, warmup)
                res = training_step(model, optimizer, corpus, rng, config, schedule, omega, lr)
                row = {"step": step, "phase": phase, **asdict(res)}
                history.append(row)
                if writer is not None:
                    writer.writerow([step, res.l_simple, res.l_mse, res.c_alg, res.c_olp, lr])
                if baseline is None:
                    baseline = res.total
                above = above + 1 if res.total > 10 * baseline else 0
                if above >= 100:
                    raise TrainingDivergedError(
                        f"loss above 10x its initial value ({baseline:.4g}) for 100 steps at step {step}: "
                        f"l_simple={res.l_simple:.4g} l_mse={res.l_mse:.4g} c={res.c_weighted:.4g}"
                    )
                if config.log_every and step % config.log_every == 0:
                    log.info(
                        "phase %d step %d loss %.4f (simple %.4f mse %.4f alg %.4f olp %.4f) lr %.2e",
                        phase, step, res.total, res.l_simple, res.l_mse, res.c_alg, res.c_olp, lr,
                    )
                if config.sample_every and step % config.sample_every == 0 and step > 0:
                    _log_sample_quality(model, schedule, corpus, step)
                step += 1
                if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(
                        model, os.path.join(out_dir, f"step{step:06d}.ckpt"), checkpoint_extra(config, schedule, canvas, phase)
                    )
            if phase == 1:
                phase1_model = model.copy()
                if out_dir is not None:
                    save_checkpoint(phase1_model, os.path.join(out_dir, "phase1.ckpt"), checkpoint_extra(config, schedule, canvas, 1))
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "final.ckpt"), checkpoint_extra(config, schedule, canvas, 2))
    return TrainResult(model, phase1_model, schedule, history)


def _log_sample_quality(model: Denoiser, schedule: NoiseSchedule, corpus: CorpusArrays, step: int, n: int = 16) -> None:
    from .generate import sample_states
    from .metrics import alignment_metric_arrays, overlap_metric_arrays
    from .layout import decode_state

    x = sample_states(model, schedule, n, num_steps=20, seed=step)
    labels, boxes = decode_state(x, corpus.num_classes)
    n_real = (labels != corpus.num_classes).sum(axis=1)
    order = np.argsort(labels == corpus.num_classes, axis=1, kind="stable")
    boxes = np.take_along_axis(boxes, order[..., None], axis=1)
    log.info(
        "step %d sample alignment %.4f overlap %.4f",
        step,
        alignment_metric_arrays(boxes, n_real),
        overlap_metric_arrays(boxes, n_real),
    )


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
