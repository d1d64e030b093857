"""Guidance rules that combine conditional branch predictions at inference.

Branch naming: ``u_full`` conditions on both the class and the motion
input, ``u_no_text`` drops the class, ``u_no_flow`` drops the motion
input, and ``u_none`` (only needed by the ip2p rule) drops both.

In the guidance config, ``w1`` is always the text (class) weight and
``w2`` the motion weight. The ip2p formula takes its arguments in the
opposite roles (its first weight scales the motion-conditioning term),
so the sampler passes (w2, w1) when that rule is selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .jamdit import Prediction

GUIDANCE_RULES = ("inner", "cfg", "ip2p")


@dataclass
class GuidanceConfig:
    w1: float = 5.0  # text (class) guidance weight
    w2: float = 3.0  # motion guidance weight
    rule: str = "inner"
    motion_gate_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not (math.isfinite(self.w1) and math.isfinite(self.w2)):
            raise ValueError(f"guidance weights must be finite, got {self.w1}, {self.w2}")
        if self.rule not in GUIDANCE_RULES:
            raise ValueError(f"rule {self.rule!r} not in {GUIDANCE_RULES}")
        if not (0.0 <= self.motion_gate_fraction <= 1.0):
            raise ValueError(f"motion_gate_fraction must be in [0, 1], got {self.motion_gate_fraction}")


@dataclass
class BranchSet:
    u_full: Prediction
    u_no_text: Prediction | None = None
    u_no_flow: Prediction | None = None
    u_none: Prediction | None = None


def _check_like(a: Prediction, b: Prediction, name: str) -> None:
    if b is None:
        raise ValueError(f"missing branch {name}")
    if a.u_x.shape != b.u_x.shape:
        raise ValueError(f"branch {name} shape {tuple(b.u_x.shape)} != {tuple(a.u_x.shape)}")
    if (a.u_d is None) != (b.u_d is None):
        raise ValueError(f"branch {name} motion channels disagree with u_full")


def _combine(pairs: list[tuple[float, Prediction]]) -> Prediction:
    u_x = pairs[0][0] * pairs[0][1].u_x
    for w, p in pairs[1:]:
        u_x = u_x + w * p.u_x
    if pairs[0][1].u_d is None:
        return Prediction(u_x=u_x)
    u_d = pairs[0][0] * pairs[0][1].u_d
    for w, p in pairs[1:]:
        u_d = u_d + w * p.u_d
    return Prediction(u_x=u_x, u_d=u_d)


def inner_guidance(branches: BranchSet, w1: float, w2: float) -> Prediction:
    """(1 + w1 + w2) * u_full - w1 * u_no_text - w2 * u_no_flow, applied to
    appearance and motion channels alike."""
    full = branches.u_full
    _check_like(full, branches.u_no_text, "u_no_text")
    _check_like(full, branches.u_no_flow, "u_no_flow")
    return _combine(
        [(1.0 + w1 + w2, full), (-w1, branches.u_no_text), (-w2, branches.u_no_flow)]
    )


def cfg(u_cond: Prediction, u_uncond: Prediction, w: float) -> Prediction:
    """Classifier-free extrapolation (1 + w) * u_cond - w * u_uncond."""
    _check_like(u_cond, u_uncond, "u_uncond")
    return _combine([(1.0 + w, u_cond), (-w, u_uncond)])


def ip2p_guidance(branches: BranchSet, w1: float, w2: float) -> Prediction:
    """Two-condition compositional rule used as an ablation baseline:
    u_none + w1 * (u_no_text - u_none) + w2 * (u_full - u_no_text).

    Here w1 scales the motion-conditioning step and w2 the text step
    (the conditions are ordered motion first, text second).
    """
    full = branches.u_full
    _check_like(full, branches.u_no_text, "u_no_text")
    _check_like(full, branches.u_none, "u_none")
    none, no_text = branches.u_none, branches.u_no_text
    u_x = none.u_x + w1 * (no_text.u_x - none.u_x) + w2 * (full.u_x - no_text.u_x)
    if full.u_d is None:
        return Prediction(u_x=u_x)
    u_d = none.u_d + w1 * (no_text.u_d - none.u_d) + w2 * (full.u_d - no_text.u_d)
    return Prediction(u_x=u_x, u_d=u_d)


def gate_motion_guidance(step_index: int, n_steps: int, config: GuidanceConfig) -> tuple[float, float]:
    """Effective (w1, w2) at a sampler step: motion guidance is active only
    for the first ceil(motion_gate_fraction * n_steps) steps."""
    if not (0 <= step_index < n_steps):
        raise ValueError(f"step_index {step_index} out of range [0, {n_steps})")
    if step_index < math.ceil(config.motion_gate_fraction * n_steps):
        return (config.w1, config.w2)
    return (config.w1, 0.0)
