"""Diagnostic experiments: frame-shuffle loss sensitivity, partial
re-noising (SDEdit-style), and the motion-coherence report.

All probes derive their randomness from an explicit seed, and paired
designs (original vs permuted input, guidance variant A vs B) share the
identical noise draws so differences isolate the intervention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import flowfield, flowmatch
from .flowfield import FlowField, decode_flow_rgb, endpoint_error, estimate_flow_blockmatch
from .guidance import GuidanceConfig
from .jamdit import JamDiT, Prediction
from .synthdata import DatasetItem, shuffle_frames
from .trainer import PreparedItem, derive_seed, prepare_items


@dataclass
class ProbeCurve:
    """Mean loss change under frame shuffling, bucketed by timestep."""

    centers: np.ndarray
    mean_delta: np.ndarray
    counts: np.ndarray
    tag: str  # "base" | "videojam"

    def mean_delta_between(self, lo: float, hi: float) -> float:
        """Mean over buckets whose centers lie in (lo, hi]."""
        mask = (self.centers > lo) & (self.centers <= hi)
        if not mask.any():
            raise ValueError(f"no buckets in ({lo}, {hi}]")
        return float(self.mean_delta[mask].mean())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_bucket", "delta_loss"])
            for c, d in zip(self.centers, self.mean_delta):
                writer.writerow([f"{c:.4f}", f"{d:.8f}"])


def shuffle_loss_probe(
    model: JamDiT,
    items: list[DatasetItem],
    n_buckets: int = 10,
    samples_per_bucket: int = 16,
    seed: int = 0,
    sigma: float = flowfield.DEFAULT_SIGMA,
    motion_weight: float = 0.5,
    use_identity_permutation: bool = False,
) -> ProbeCurve:
    """Loss on a frame-permuted input minus loss on the original, per
    timestep bucket, using the model's own training loss.

    Both variants share the same noise draw and timestep. For a joint
    model the paired flow video is permuted with the same permutation;
    a base model sees only the permuted video. Setting
    ``use_identity_permutation`` replaces the permutation with the
    identity (a self-check: every delta becomes exactly zero).
    """
    if not items:
        raise ValueError("empty holdout set")
    prepared = prepare_items(items, sigma)
    joint = model.joint_mode
    tag = "videojam" if joint else "base"
    rng = np.random.default_rng(derive_seed(seed, "shuffleprobe"))
    centers = (np.arange(n_buckets) + 0.5) / n_buckets
    mean_delta = np.zeros(n_buckets)

    model.eval()
    with torch.no_grad():
        for b in range(n_buckets):
            lo, hi = b / n_buckets, (b + 1) / n_buckets
            xs, ds, vxs, vds, ys, ts = [], [], [], [], [], []
            masks = []
            for s in range(samples_per_bucket):
                item = prepared[int(rng.integers(0, len(prepared)))]
                t = float(rng.uniform(lo, hi))
                x0 = torch.from_numpy(rng.standard_normal(item.video.shape).astype(np.float32))
                d0 = torch.from_numpy(rng.standard_normal(item.video.shape).astype(np.float32))
                if use_identity_permutation:
                    perm = np.arange(item.video.shape[0])
                else:
                    _, perm = shuffle_frames(item.video.numpy(), derive_seed(seed, "perm", b, s))
                for x1, d1 in ((item.video, item.flow_video), (item.video[perm], item.flow_video[perm])):
                    xs.append(flowmatch.interpolate(x1, x0, t))
                    vxs.append(flowmatch.velocity_target(x1, x0))
                    if joint:
                        ds.append(flowmatch.interpolate(d1, d0, t))
                        vds.append(flowmatch.velocity_target(d1, d0))
                    ys.append(item.class_id)
                    ts.append(t)
                    masks.append(joint)
            x = torch.stack(xs)
            y = torch.tensor(ys, dtype=torch.long)
            t_vec = torch.tensor(ts, dtype=torch.float32)
            if joint:
                pred = model.forward_joint(x, torch.stack(ds), y, t_vec)
            else:
                pred = model.forward_base(x, y, t_vec)
            losses = []
            for i in range(len(xs)):
                p = Prediction(u_x=pred.u_x[i], u_d=None if pred.u_d is None else pred.u_d[i])
                tgt = flowmatch.VelocityTarget(v_x=vxs[i], v_d=vds[i] if joint else None)
                losses.append(float(flowmatch.fm_loss(p, tgt, masks[i], motion_weight)))
            deltas = [losses[2 * s + 1] - losses[2 * s] for s in range(samples_per_bucket)]
            mean_delta[b] = float(np.mean(deltas))

    return ProbeCurve(
        centers=centers,
        mean_delta=mean_delta,
        counts=np.full(n_buckets, samples_per_bucket),
        tag=tag,
    )


@dataclass
class SdeditResult:
    t_start: float
    video: np.ndarray
    flow_video: np.ndarray
    endpoint_err: float  # block-match flow distance between output and source


def sdedit_probe(
    model: JamDiT,
    source_video: np.ndarray,
    source_flow: FlowField,
    start_ts: list[float],
    guidance: GuidanceConfig,
    schedule: flowmatch.TimestepSchedule,
    class_id: int | None = None,
    seed: int = 0,
    sigma: float = flowfield.DEFAULT_SIGMA,
    block: int = 4,
    radius: int = 3,
) -> list[SdeditResult]:
    """Noise the source pair to each start timestep and resume sampling.

    The same noise draw is shared across start timesteps, so the series
    isolates how much source structure each noise level preserves. Each
    result records the endpoint error between block-matching flow of the
    output and of the source (lower = more structure retained).
    """
    for t in start_ts:
        if not (0.0 <= t <= 1.0):
            raise ValueError(f"start timestep {t} outside [0, 1]")
    flow = source_flow if source_flow.padded else flowfield.pad_flow(source_flow)
    d1 = flowfield.encode_flow_rgb(flow, sigma).astype(np.float32)
    x1 = np.asarray(source_video, dtype=np.float32)
    rng = np.random.default_rng(derive_seed(seed, "sdedit"))
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    d0 = rng.standard_normal(x1.shape).astype(np.float32)
    source_bm = estimate_flow_blockmatch(x1, block, radius)

    results = []
    for t_star in start_ts:
        video, fv = flowmatch.euler_sample(
            model,
            x1.shape,
            class_id,
            guidance,
            schedule,
            seed=derive_seed(seed, "sdedit"),
            t_start=t_star,
            x_init=flowmatch.interpolate(x1, x0, t_star),
            d_init=flowmatch.interpolate(d1, d0, t_star),
        )
        ee = endpoint_error(estimate_flow_blockmatch(video, block, radius), source_bm)
        results.append(SdeditResult(t_start=t_star, video=video, flow_video=fv, endpoint_err=ee))
    return results


def flow_consistency_error(
    video: np.ndarray,
    flow_video: np.ndarray,
    block: int = 4,
    radius: int = 3,
    sigma: float = flowfield.DEFAULT_SIGMA,
) -> float:
    """Endpoint error between the decoded motion prediction and the
    block-matching flow of the generated video (transition frames only)."""
    decoded = decode_flow_rgb(flow_video, sigma)
    measured = estimate_flow_blockmatch(video, block, radius)
    n = measured.data.shape[0]
    return endpoint_error(decoded.data[:n], measured.data)


def dynamic_degree(video: np.ndarray, block: int = 4, radius: int = 3) -> float:
    """Mean estimated flow magnitude: how much motion the video contains."""
    flow = estimate_flow_blockmatch(video, block, radius).data
    return float(np.hypot(flow[..., 0], flow[..., 1]).mean())


def motion_smoothness(video: np.ndarray) -> float:
    """Mean magnitude of the temporal second difference of pixel values."""
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 3:
        raise ValueError("need at least 3 frames for a second difference")
    second = video[2:] - 2.0 * video[1:-1] + video[:-2]
    return float(np.abs(second).mean())


def default_guidance_variants() -> list[tuple[str, GuidanceConfig]]:
    return [
        ("inner", GuidanceConfig(rule="inner")),
        ("inner_w2_0", GuidanceConfig(rule="inner", w2=0.0)),
        ("ip2p", GuidanceConfig(rule="ip2p")),
        ("cfg", GuidanceConfig(rule="cfg")),
    ]


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)
    guidance: dict[str, dict] = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        cols = ["variant", "class_id", "sample", "flow_consistency", "dynamic_degree", "smoothness"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([row[c] for c in cols])

    def summary_text(self) -> str:
        lines = ["variant            flow_consistency  dynamic_degree  smoothness  n"]
        for name, agg in self.aggregates.items():
            lines.append(
                f"{name:<18} {agg['flow_consistency']:>16.6f} {agg['dynamic_degree']:>15.6f} "
                f"{agg['smoothness']:>11.6f}  {int(agg['n'])}"
            )
        return "\n".join(lines) + "\n"


def coherence_report(
    model: JamDiT,
    shape: tuple[int, int, int, int],
    class_ids: list[int],
    n_per_class: int,
    variants: list[tuple[str, GuidanceConfig]] | None = None,
    schedule: flowmatch.TimestepSchedule | None = None,
    seed: int = 0,
    sigma: float = flowfield.DEFAULT_SIGMA,
    block: int = 4,
    radius: int = 3,
) -> MetricsReport:
    """Sample videos per class under each guidance variant and score them.

    Sample (class, index) pairs reuse the same seed across variants, so
    the initial noise is bitwise identical and metric differences isolate
    the guidance rule.
    """
    if not model.joint_mode:
        raise ValueError("coherence report requires a joint checkpoint")
    variants = variants if variants is not None else default_guidance_variants()
    schedule = schedule or flowmatch.make_schedule(20)
    report = MetricsReport()
    for name, gcfg in variants:
        report.guidance[name] = {
            "w1": gcfg.w1, "w2": gcfg.w2, "rule": gcfg.rule,
            "motion_gate_fraction": gcfg.motion_gate_fraction,
        }
        per_variant = []
        for class_id in class_ids:
            for idx in range(n_per_class):
                sample_seed = derive_seed(seed, "coherence", class_id, idx)
                video, fv = flowmatch.euler_sample(
                    model, shape, class_id, gcfg, schedule, seed=sample_seed
                )
                row = {
                    "variant": name,
                    "class_id": class_id,
                    "sample": idx,
                    "flow_consistency": flow_consistency_error(video, fv, block, radius, sigma),
                    "dynamic_degree": dynamic_degree(video, block, radius),
                    "smoothness": motion_smoothness(video),
                }
                for key in ("flow_consistency", "dynamic_degree", "smoothness"):
                    v = row[key]
                    if not np.isfinite(v) or v < 0:
                        raise FloatingPointError(f"metric {key} = {v} for {name}/{class_id}/{idx}")
                report.rows.append(row)
                per_variant.append(row)
        report.aggregates[name] = {
            "flow_consistency": float(np.mean([r["flow_consistency"] for r in per_variant])),
            "dynamic_degree": float(np.mean([r["dynamic_degree"] for r in per_variant])),
            "smoothness": float(np.mean([r["smoothness"] for r in per_variant])),
            "n": float(len(per_variant)),
        }
    return report
