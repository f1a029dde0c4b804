"""Sampling layouts for each generation task from a trained denoiser."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .conditioning import TaskKind, mask_for
from .constraints import ConstraintWeightSchedule, solve_tau
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample
from .layout import Element, Layout, decode_state, encode_batch


def _batched(model: Denoiser, chunk: int):
    def run(x, t):
        if x.shape[0] <= chunk:
            return model(x, t)
        return np.concatenate([model(x[i : i + chunk], t[i : i + chunk]) for i in range(0, x.shape[0], chunk)])

    return run


def sample_states(
    model: Denoiser,
    schedule: NoiseSchedule,
    n: int,
    num_steps: int = 100,
    seed: int = 0,
    eta: float = 0.0,
    condition: tuple[np.ndarray, np.ndarray] | None = None,
    chunk: int = 256,
) -> np.ndarray:
    cfg = model.config
    shape = (n, cfg.seq_len, cfg.input_dim)
    return ddim_sample(
        _batched(model, chunk),
        schedule,
        SamplerConfig(num_steps, eta, seed),
        shape=shape,
        condition=condition,
    )


def states_to_layouts(states: np.ndarray, canvas=(1, 1)) -> list[Layout]:
    """Decode a batch; real elements are moved ahead of padding rows."""
    n = states.shape[-1] - 5
    labels, boxes = decode_state(states, n)
    out = []
    for lab, bx in zip(labels, boxes):
        real = [Element(int(c), tuple(float(v) for v in b)) for c, b in zip(lab, bx) if c != n]
        pad = (Element(n, (0.0, 0.0, 0.0, 0.0)),) * (len(lab) - len(real))
        out.append(Layout(tuple(real) + pad, n, tuple(canvas), len(real)))
    return out


def build_condition(
    task: TaskKind | str,
    layouts: Sequence[Layout],
    seed: int = 0,
    complete_frac_max: float = 0.2,
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    x0 = encode_batch(layouts)
    masks = np.stack(
        [mask_for(task, lay.n_real, lay.max_len, lay.num_classes, rng, complete_frac_max) for lay in layouts]
    )
    return masks, x0


def generate(
    model: Denoiser,
    schedule: NoiseSchedule,
    task: TaskKind | str = TaskKind.UNCOND,
    count: int | None = None,
    conditions: Sequence[Layout] | None = None,
    num_steps: int = 100,
    seed: int = 0,
    eta: float = 0.0,
    canvas=(1, 1),
    complete_frac_max: float = 0.2,
) -> list[Layout]:
    """Generate layouts for one task.

    Conditional tasks take their known attributes from ``conditions`` and
    produce one output per condition layout.
    """
    task = TaskKind(task)
    if task is TaskKind.REFINEMENT:
        raise ValueError("use refine() for the refinement task")
    if task is TaskKind.UNCOND:
        if count is None:
            raise ValueError("count is required for unconditional sampling")
        states = sample_states(model, schedule, count, num_steps, seed, eta)
        return states_to_layouts(states, canvas)
    if not conditions:
        raise ValueError(f"task {task.value} needs condition layouts")
    cond = build_condition(task, conditions, seed, complete_frac_max)
    states = sample_states(model, schedule, len(conditions), num_steps, seed, eta, condition=cond)
    return states_to_layouts(states, conditions[0].canvas)


def refine(
    model: Denoiser,
    schedule: NoiseSchedule,
    layouts: Sequence[Layout],
    weight_schedule: ConstraintWeightSchedule,
    omega: float = 0.1,
    num_steps: int = 100,
    seed: int = 0,
    tau: int | None = None,
) -> list[Layout]:
    """Treat noisy layouts as the diffusion state at ``tau`` and denoise from there.

    ``tau`` defaults to the step where the constraint weight reaches
    ``omega``. Labels and the element count stay fixed through a label mask.
    """
    if tau is None:
        tau = solve_tau(weight_schedule, omega)
    masks, x0 = build_condition(TaskKind.REFINEMENT, layouts, seed)
    states = ddim_sample(
        _batched(model, 256),
        schedule,
        SamplerConfig(num_steps, 0.0, seed),
        condition=(masks, x0),
        x_start=x0,
        t_start=tau,
    )
    return states_to_layouts(states, layouts[0].canvas)
