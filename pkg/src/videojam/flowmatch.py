"""Flow-matching core: interpolation path, velocity target, loss, schedules,
and the Euler ODE sampler with guided branch evaluation.

Training pairs a clean signal x1 with Gaussian noise x0 along the linear
path x_t = t*x1 + (1-t)*x0 and regresses the constant path velocity
x1 - x0. Sampling integrates the learned velocity field from t=0 to t=1
with explicit Euler steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .guidance import BranchSet, GuidanceConfig, cfg, gate_motion_guidance, inner_guidance, ip2p_guidance
from .jamdit import Prediction

SCHEDULE_KINDS = ("uniform", "quadratic")


def interpolate(x1, x0, t: float):
    """Noisy latent t*x1 + (1-t)*x0 on the linear path; works on numpy
    arrays and torch tensors alike."""
    if x1.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x1.shape)} vs {tuple(x0.shape)}")
    if not (0.0 <= float(t) <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t * x1 + (1.0 - t) * x0


def velocity_target(x1, x0):
    """Path velocity x1 - x0 (independent of t)."""
    if x1.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x1.shape)} vs {tuple(x0.shape)}")
    return x1 - x0


@dataclass
class VelocityTarget:
    """Regression target pair; v_d is None for appearance-only training."""

    v_x: Tensor
    v_d: Tensor | None = None


def fm_loss(
    pred: Prediction,
    target: VelocityTarget,
    motion_mask: bool,
    motion_weight: float = 0.5,
) -> Tensor:
    """Velocity-matching loss: MSE over appearance channels, plus, when
    motion_mask is set, MSE over motion channels; the two means combine
    with weights (1 - motion_weight, motion_weight), equal by default."""
    if pred.u_x.shape != target.v_x.shape:
        raise ValueError(
            f"appearance shape mismatch: {tuple(pred.u_x.shape)} vs {tuple(target.v_x.shape)}"
        )
    loss_x = ((pred.u_x - target.v_x) ** 2).mean()
    if motion_mask:
        if pred.u_d is None or target.v_d is None:
            raise ValueError("motion_mask set but prediction or target has no motion channels")
        if pred.u_d.shape != target.v_d.shape:
            raise ValueError(
                f"motion shape mismatch: {tuple(pred.u_d.shape)} vs {tuple(target.v_d.shape)}"
            )
        loss_d = ((pred.u_d - target.v_d) ** 2).mean()
        loss = (1.0 - motion_weight) * loss_x + motion_weight * loss_d
    else:
        loss = loss_x
    if not bool(torch.isfinite(loss)):
        raise FloatingPointError("non-finite velocity-matching loss")
    return loss


@dataclass
class TimestepSchedule:
    knots: np.ndarray  # t_0 = 0 < t_1 < ... < t_N = 1
    kind: str = "uniform"

    def __post_init__(self) -> None:
        self.knots = np.asarray(self.knots, dtype=np.float64)
        if self.knots.ndim != 1 or len(self.knots) < 2:
            raise ValueError("schedule needs at least two knots")
        if self.knots[0] != 0.0 or self.knots[-1] != 1.0:
            raise ValueError(f"schedule endpoints must be exactly 0 and 1, got {self.knots[[0, -1]]}")
        if not (np.diff(self.knots) > 0).all():
            raise ValueError("schedule knots must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return len(self.knots) - 1


def make_schedule(n_steps: int = 100, kind: str = "uniform") -> TimestepSchedule:
    """uniform: t_k = k/N. quadratic: t_k = 1 - (1 - k/N)^2, which spaces
    knots densely near t=1."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"kind {kind!r} not in {SCHEDULE_KINDS}")
    frac = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    knots = frac if kind == "uniform" else 1.0 - (1.0 - frac) ** 2
    return TimestepSchedule(knots, kind)


def _guided_velocity(
    model,
    x: Tensor,
    d: Tensor,
    cond: int | None,
    t: float,
    w1: float,
    w2: float,
    rule: str,
) -> Prediction:
    u_full = model(x, d, cond, t)
    if rule == "cfg":
        return cfg(u_full, model(x, d, None, t), w1)
    u_no_text = model(x, d, None, t)
    if rule == "ip2p":
        branches = BranchSet(
            u_full=u_full, u_no_text=u_no_text, u_none=model(x, torch.zeros_like(d), None, t)
        )
        # ip2p orders its conditions motion first, text second
        return ip2p_guidance(branches, w1=w2, w2=w1)
    if w2 == 0.0:
        # gated steps skip the no-flow branch; algebraically identical
        return cfg(u_full, u_no_text, w1)
    branches = BranchSet(
        u_full=u_full, u_no_text=u_no_text, u_no_flow=model(x, torch.zeros_like(d), cond, t)
    )
    return inner_guidance(branches, w1, w2)


def euler_sample(
    model,
    shape: tuple[int, int, int, int],
    cond: int | None,
    guidance: GuidanceConfig,
    schedule: TimestepSchedule,
    seed: int,
    t_start: float = 0.0,
    x_init: np.ndarray | Tensor | None = None,
    d_init: np.ndarray | Tensor | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the guided velocity field from t_start to 1.

    By default the state starts from independent standard-normal draws for
    the video and motion channels (deterministic given ``seed``). Passing
    x_init/d_init with t_start > 0 resumes from a partially noised pair
    using the schedule knots above t_start. Returns the final video and
    motion prediction, both clamped to [-1, 1].

    ``model`` is called as ``model(x, d, cond_or_None, t)`` and must return
    a joint :class:`Prediction`; the number of calls per step depends on
    the guidance rule and the motion gate.
    """
    if not (0.0 <= t_start <= 1.0):
        raise ValueError(f"t_start must lie in [0, 1], got {t_start}")
    rng = np.random.default_rng(seed)
    noise_x = rng.standard_normal(shape).astype(np.float32)
    noise_d = rng.standard_normal(shape).astype(np.float32)
    if x_init is None:
        x = torch.from_numpy(noise_x)
        d = torch.from_numpy(noise_d)
    else:
        x = torch.as_tensor(np.asarray(x_init), dtype=torch.float32).clone()
        d = torch.as_tensor(np.asarray(d_init), dtype=torch.float32).clone()
    if tuple(x.shape) != tuple(shape) or tuple(d.shape) != tuple(shape):
        raise ValueError(f"state shapes {tuple(x.shape)}, {tuple(d.shape)} != {tuple(shape)}")

    knots = [t_start] + [float(k) for k in schedule.knots if k > t_start + 1e-12]
    n_steps = len(knots) - 1
    with torch.no_grad():
        for k in range(n_steps):
            t_k, dt = knots[k], knots[k + 1] - knots[k]
            w1, w2 = gate_motion_guidance(k, n_steps, guidance)
            guided = _guided_velocity(model, x, d, cond, t_k, w1, w2, guidance.rule)
            x = x + dt * guided.u_x
            d = d + dt * guided.u_d
            if not (torch.isfinite(x).all() and torch.isfinite(d).all()):
                raise FloatingPointError(f"non-finite sampler state at step {k} (t={t_k:.4f})")
    video = x.clamp(-1.0, 1.0).cpu().numpy()
    flow_video = d.clamp(-1.0, 1.0).cpu().numpy()
    return video, flow_video
