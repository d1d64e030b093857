"""Training loop for base pretraining and joint fine-tuning.

Every stochastic choice in a run (batch composition, timesteps, noise,
condition dropout) derives from (seed, step index), so runs replay
bit-identically and a resumed run continues the exact loss sequence of an
uninterrupted one.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import flowfield, flowmatch, formats
from .jamdit import JamDiT, ModelConfig, Prediction, extend_joint, init_base
from .synthdata import Dataset, DatasetItem, load_dataset

TRAIN_MODES = ("base", "videojam")


def derive_seed(base: int, *keys: int | str) -> int:
    """Stable sub-seed for a labelled stream of draws."""
    ints = [k if isinstance(k, int) else int.from_bytes(k.encode(), "little") % 2**32 for k in keys]
    return int(np.random.SeedSequence(entropy=base, spawn_key=tuple(ints)).generate_state(1)[0])


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    p_drop_text: float = 0.3
    p_drop_flow: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 1000
    mode: str = "base"
    motion_loss_weight: float = 0.5
    sigma: float = flowfield.DEFAULT_SIGMA

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("p_drop_text", "p_drop_flow"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode {self.mode!r} not in {TRAIN_MODES}")
        if not (0.0 <= self.motion_loss_weight <= 1.0):
            raise ValueError(f"motion_loss_weight must lie in [0, 1], got {self.motion_loss_weight}")


@dataclass
class DropoutDecision:
    drop_text: bool
    drop_flow: bool


def sample_dropout(rng: np.random.Generator, p_text: float, p_flow: float) -> DropoutDecision:
    """Independent per-item condition dropout draws."""
    for name, p in (("p_text", p_text), ("p_flow", p_flow)):
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return DropoutDecision(
        drop_text=bool(rng.random() < p_text),
        drop_flow=bool(rng.random() < p_flow),
    )


@dataclass
class PreparedItem:
    video: torch.Tensor  # (T, H, W, 3), float32
    flow_video: torch.Tensor  # (T, H, W, 3) encoded+padded flow, float32
    class_id: int


def prepare_items(items: list[DatasetItem], sigma: float = flowfield.DEFAULT_SIGMA) -> list[PreparedItem]:
    """Convert dataset items to tensors, encoding flows to RGB once."""
    prepared = []
    for item in items:
        flow = item.flow if item.flow.padded else flowfield.pad_flow(item.flow)
        fv = flowfield.encode_flow_rgb(flow, sigma).astype(np.float32)
        prepared.append(
            PreparedItem(
                video=torch.from_numpy(np.ascontiguousarray(item.video)),
                flow_video=torch.from_numpy(fv),
                class_id=item.class_id,
            )
        )
    return prepared


def make_optimizer(model: JamDiT, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )


def _batch_targets(
    items: list[PreparedItem],
    rng: np.random.Generator,
    config: TrainConfig,
    null_class_id: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, list[DropoutDecision]]:
    """Draw one training batch: noised inputs, velocity targets, conditions."""
    joint = config.mode == "videojam"
    xs, ds, vxs, vds, ys, ts = [], [], [], [], [], []
    decisions = []
    for item in items:
        t = float(rng.uniform(0.0, 1.0))
        decision = sample_dropout(rng, config.p_drop_text, 0.0 if not joint else config.p_drop_flow)
        decisions.append(decision)
        x0 = torch.from_numpy(rng.standard_normal(item.video.shape).astype(np.float32))
        xs.append(flowmatch.interpolate(item.video, x0, t))
        vxs.append(flowmatch.velocity_target(item.video, x0))
        if joint:
            d0 = torch.from_numpy(rng.standard_normal(item.video.shape).astype(np.float32))
            if decision.drop_flow:
                ds.append(torch.zeros_like(item.flow_video))
                vds.append(torch.zeros_like(item.flow_video))  # masked out of the loss
            else:
                ds.append(flowmatch.interpolate(item.flow_video, d0, t))
                vds.append(flowmatch.velocity_target(item.flow_video, d0))
        ys.append(null_class_id if decision.drop_text else item.class_id)
        ts.append(t)
    stack = lambda seq: torch.stack(seq) if seq else torch.empty(0)
    return (
        stack(xs),
        stack(ds),
        stack(vxs),
        stack(vds),
        torch.tensor(ys, dtype=torch.long),
        torch.tensor(ts, dtype=torch.float32),
        decisions,
    )


def train_step(
    model: JamDiT,
    optimizer: torch.optim.Optimizer,
    items: list[PreparedItem],
    step_index: int,
    config: TrainConfig,
) -> dict[str, float]:
    """One optimization step; deterministic given (config.seed, step_index)."""
    rng = np.random.default_rng(derive_seed(config.seed, "step", step_index))
    batch_idx = rng.integers(0, len(items), size=config.batch_size)
    batch = [items[i] for i in batch_idx]
    x, d, v_x, v_d, ys, ts, decisions = _batch_targets(
        batch, rng, config, model.config.null_class_id
    )

    optimizer.zero_grad(set_to_none=True)
    if config.mode == "videojam":
        pred = model.forward_joint(x, d, ys, ts)
    else:
        pred = model.forward_base(x, ys, ts)

    per_item = []
    loss_x_acc, loss_d_acc, n_motion = 0.0, 0.0, 0
    for i, decision in enumerate(decisions):
        item_pred = Prediction(
            u_x=pred.u_x[i], u_d=None if pred.u_d is None else pred.u_d[i]
        )
        target = flowmatch.VelocityTarget(
            v_x=v_x[i], v_d=None if pred.u_d is None else v_d[i]
        )
        motion_mask = config.mode == "videojam" and not decision.drop_flow
        item_loss = flowmatch.fm_loss(item_pred, target, motion_mask, config.motion_loss_weight)
        per_item.append(item_loss)
        with torch.no_grad():
            loss_x_acc += float(((item_pred.u_x - target.v_x) ** 2).mean())
            if motion_mask:
                loss_d_acc += float(((item_pred.u_d - target.v_d) ** 2).mean())
                n_motion += 1
    loss = torch.stack(per_item).mean()
    if not bool(torch.isfinite(loss)):
        raise FloatingPointError(f"non-finite loss at step {step_index}")
    loss.backward()
    optimizer.step()

    b = len(decisions)
    return {
        "loss": float(loss.detach()),
        "loss_x": loss_x_acc / b,
        "loss_d": loss_d_acc / n_motion if n_motion else 0.0,
        "dropped_text_frac": sum(dec.drop_text for dec in decisions) / b,
        "dropped_flow_frac": sum(dec.drop_flow for dec in decisions) / b,
    }


def save_checkpoint(
    model: JamDiT,
    path: str | Path,
    optimizer: torch.optim.Optimizer | None = None,
    step: int | None = None,
    extra: dict | None = None,
) -> None:
    """VJC1 checkpoint: model tensors (plus optimizer moments when given)
    and a JSON trailer with the model config and joint flag."""
    tensors: dict[str, np.ndarray] = {
        name: t.detach().cpu().numpy().astype(np.float32)
        for name, t in model.state_dict().items()
    }
    opt_step = None
    if optimizer is not None:
        named = dict(model.named_parameters())
        for name, param in named.items():
            state = optimizer.state.get(param)
            if not state:
                continue
            tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].cpu().numpy().astype(np.float32)
            tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy().astype(np.float32)
            opt_step = int(state["step"])
    meta = {
        "format": "jamdit-checkpoint",
        "config": {k: getattr(model.config, k) for k in ModelConfig.__dataclass_fields__},
        "joint_mode": model.joint_mode,
        "step": step,
        "opt_step": opt_step,
        "extra": extra or {},
    }
    formats.save_checkpoint_file(path, tensors, meta)


def load_checkpoint(path: str | Path) -> tuple[JamDiT, dict]:
    """Rebuild the model from a VJC1 checkpoint; returns (model, meta).

    meta["optimizer_tensors"] holds any saved optimizer moments keyed by
    parameter name; :func:`restore_optimizer` reinstates them.
    """
    tensors, meta = formats.load_checkpoint_file(path)
    if meta.get("format") != "jamdit-checkpoint":
        raise formats.FormatError(f"{path}: not a model checkpoint (format={meta.get('format')!r})")
    config = ModelConfig(**meta["config"])
    model = JamDiT(config, joint_mode=bool(meta["joint_mode"]))
    state = {}
    opt_tensors = {}
    for name, arr in tensors.items():
        if name.startswith("opt."):
            opt_tensors[name[len("opt.") :]] = arr
        else:
            state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    meta = dict(meta)
    meta["optimizer_tensors"] = opt_tensors
    return model, meta


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: JamDiT, meta: dict
) -> None:
    opt_tensors = meta.get("optimizer_tensors") or {}
    if not opt_tensors:
        return
    step = meta.get("opt_step") or 0
    for name, param in model.named_parameters():
        avg = opt_tensors.get(f"{name}.exp_avg")
        avg_sq = opt_tensors.get(f"{name}.exp_avg_sq")
        if avg is None or avg_sq is None:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(avg.copy()),
            "exp_avg_sq": torch.from_numpy(avg_sq.copy()),
        }


@dataclass
class TrainResult:
    checkpoint: Path
    loss_csv: Path
    losses: list[dict[str, float]] = field(default_factory=list)


def train(
    config: TrainConfig,
    dataset: Dataset | str | Path,
    out_dir: str | Path,
    model_config: ModelConfig | None = None,
    init_from: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the configured number of steps, logging a loss CSV and writing
    periodic plus final checkpoints. Returns paths and the loss records.

    mode="base" pretrains a fresh appearance-only model. mode="videojam"
    requires ``init_from`` (a base checkpoint), extends it to the joint
    format, and fine-tunes all weights.
    """
    config.validate()
    if isinstance(dataset, (str, Path)):
        dataset = load_dataset(dataset)
    if not dataset.train:
        raise ValueError("dataset has no training items")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_step = 0
    if resume_from is not None:
        model, meta = load_checkpoint(resume_from)
        expected_joint = config.mode == "videojam"
        if model.joint_mode != expected_joint:
            raise ValueError(f"checkpoint joint_mode={model.joint_mode} mismatches mode={config.mode}")
        optimizer = make_optimizer(model, config)
        restore_optimizer(optimizer, model, meta)
        start_step = int(meta.get("step") or 0)
    elif config.mode == "videojam":
        if init_from is None:
            raise ValueError("videojam mode requires init_from (a base checkpoint)")
        base, meta = load_checkpoint(init_from)
        if base.joint_mode:
            raise ValueError(f"{init_from} is already a joint checkpoint")
        model = extend_joint(base, seed=derive_seed(config.seed, "extend"))
        optimizer = make_optimizer(model, config)
    else:
        model = init_base(model_config or ModelConfig(), seed=derive_seed(config.seed, "init"))
        optimizer = make_optimizer(model, config)

    items = prepare_items(dataset.train, config.sigma)
    loss_csv = out_dir / "loss.csv"
    csv_mode = "a" if resume_from is not None and loss_csv.exists() else "w"
    records: list[dict[str, float]] = []
    with open(loss_csv, csv_mode, newline="") as fh:
        writer = csv.writer(fh)
        if csv_mode == "w":
            writer.writerow(["step", "loss", "loss_x", "loss_d", "dropped_text_frac", "dropped_flow_frac"])
        for step in range(start_step, config.steps):
            metrics = train_step(model, optimizer, items, step, config)
            records.append({"step": step, **metrics})
            writer.writerow(
                [
                    step,
                    f"{metrics['loss']:.8f}",
                    f"{metrics['loss_x']:.8f}",
                    f"{metrics['loss_d']:.8f}",
                    f"{metrics['dropped_text_frac']:.4f}",
                    f"{metrics['dropped_flow_frac']:.4f}",
                ]
            )
            done = step + 1
            if config.checkpoint_interval and done % config.checkpoint_interval == 0 and done < config.steps:
                save_checkpoint(model, out_dir / f"model_step{done:06d}.vjc", optimizer, step=done)

    final = out_dir / "model_final.vjc"
    save_checkpoint(model, final, optimizer, step=config.steps)
    return TrainResult(checkpoint=final, loss_csv=loss_csv, losses=records)


def finite_difference_check(
    loss_fn,
    named_params: list[tuple[str, torch.nn.Parameter]],
    epsilon: float = 5e-4,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Core of :func:`grad_check`: compare ``loss_fn``'s backward gradients
    against central finite differences on randomly sampled coordinates.
    Returns max |fd - grad| / max(|fd|, |grad|, 1e-8)."""
    for _, p in named_params:
        if p.grad is not None:
            p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(derive_seed(seed, "fdcoords"))
    sizes = np.array([p.numel() for _, p in named_params])
    total = int(sizes.sum())
    chosen = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    max_rel = 0.0
    with torch.no_grad():
        for flat_idx in chosen:
            pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = int(flat_idx - offsets[pi])
            _, p = named_params[pi]
            flat = p.reshape(-1)
            orig = float(flat[local])
            analytic = float(p.grad.reshape(-1)[local])
            flat[local] = orig + epsilon
            loss_hi = float(loss_fn())
            flat[local] = orig - epsilon
            loss_lo = float(loss_fn())
            flat[local] = orig
            fd = (loss_hi - loss_lo) / (2.0 * epsilon)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel


def grad_check(
    model: JamDiT,
    items: list[PreparedItem],
    epsilon: float = 5e-4,
    n_coords: int = 200,
    seed: int = 0,
    motion_weight: float = 0.5,
) -> float:
    """Compare analytic gradients against central finite differences.

    Runs in double precision on a fixed micro-batch (no dropout). Samples
    at least ``n_coords`` parameter coordinates and returns the maximum
    relative error |fd - grad| / max(|fd|, |grad|, 1e-8).
    """
    model = copy.deepcopy(model).double()
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    joint = model.joint_mode

    xs, ds, vxs, vds, ys, ts = [], [], [], [], [], []
    for item in items:
        t = float(rng.uniform(0.05, 0.95))
        x0 = torch.from_numpy(rng.standard_normal(item.video.shape))
        x1 = item.video.double()
        xs.append(flowmatch.interpolate(x1, x0, t))
        vxs.append(flowmatch.velocity_target(x1, x0))
        if joint:
            d0 = torch.from_numpy(rng.standard_normal(item.video.shape))
            d1 = item.flow_video.double()
            ds.append(flowmatch.interpolate(d1, d0, t))
            vds.append(flowmatch.velocity_target(d1, d0))
        ys.append(item.class_id)
        ts.append(t)
    x = torch.stack(xs)
    v_x = torch.stack(vxs)
    y = torch.tensor(ys, dtype=torch.long)
    t = torch.tensor(ts, dtype=torch.float64)
    d = torch.stack(ds) if joint else None
    v_d = torch.stack(vds) if joint else None

    def loss_fn() -> torch.Tensor:
        if joint:
            pred = model.forward_joint(x, d, y, t)
            return flowmatch.fm_loss(pred, flowmatch.VelocityTarget(v_x, v_d), True, motion_weight)
        pred = model.forward_base(x, y, t)
        return flowmatch.fm_loss(pred, flowmatch.VelocityTarget(v_x), False)

    return finite_difference_check(
        loss_fn, list(model.named_parameters()), epsilon=epsilon, n_coords=n_coords, seed=seed
    )
