"""Deterministic synthetic videos of moving shapes with exact optical flow.

Scenes are flat shapes on a flat background, rasterized to pixel centers
with no antialiasing, so rigid integer translations move the foreground
mask exactly and the per-frame flow is known in closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flowfield import FlowField
from .formats import load_tensor, save_tensor

SHAPE_KINDS = ("square", "disc", "bar")
MOTION_KINDS = ("translate", "bounce", "rotate", "oscillate")

#: Number of conditioning classes: one per (shape, motion) combination.
N_CLASSES = len(SHAPE_KINDS) * len(MOTION_KINDS)

#: Default per-frame displacement bound, matching the default search radius
#: of the block-matching estimator.
DEFAULT_MAX_DISPLACEMENT = 3.0


def class_id_for(shape_kind: str, motion_kind: str) -> int:
    return SHAPE_KINDS.index(shape_kind) * len(MOTION_KINDS) + MOTION_KINDS.index(motion_kind)


@dataclass
class SceneSpec:
    """Full description of one scene; all outputs are pure functions of it."""

    shape_kind: str
    motion_kind: str
    size_px: int
    frames: int
    height: int
    width: int
    start_position: tuple[float, float]  # shape center, (x, y) in pixels
    velocity: tuple[float, float] = (0.0, 0.0)  # pixels/frame, (vx, vy)
    angular_rate: float = 0.0  # radians/frame, counter-clockwise in (x, y)
    fg_intensity: float = 1.0
    bg_intensity: float = -1.0
    max_displacement: float = DEFAULT_MAX_DISPLACEMENT

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.shape_kind not in SHAPE_KINDS:
            raise ValueError(f"shape_kind: {self.shape_kind!r} not in {SHAPE_KINDS}")
        if self.motion_kind not in MOTION_KINDS:
            raise ValueError(f"motion_kind: {self.motion_kind!r} not in {MOTION_KINDS}")
        if not (1 <= self.size_px < min(self.height, self.width)):
            raise ValueError(f"size_px: need 1 <= size_px < min(H, W), got {self.size_px}")
        if self.frames < 2:
            raise ValueError(f"frames: need at least 2, got {self.frames}")
        for name in ("fg_intensity", "bg_intensity"):
            v = getattr(self, name)
            if not np.isfinite(v) or not (-1.0 <= v <= 1.0):
                raise ValueError(f"{name}: must be finite and in [-1, 1], got {v}")
        if not all(np.isfinite(self.start_position)):
            raise ValueError(f"start_position: must be finite, got {self.start_position}")
        speed = float(np.hypot(*self.velocity))
        if self.motion_kind in ("translate", "bounce", "oscillate"):
            if speed > self.max_displacement:
                raise ValueError(
                    f"velocity: per-frame displacement {speed:.3f} exceeds "
                    f"max_displacement {self.max_displacement}"
                )
        if self.motion_kind == "rotate":
            # farthest foreground pixel travels along a chord of length
            # 2 r sin(|w|/2); keep that within the displacement bound
            r_max = self.size_px * np.sqrt(2.0) / 2.0
            chord = 2.0 * r_max * np.sin(abs(self.angular_rate) / 2.0)
            if chord > self.max_displacement:
                raise ValueError(
                    f"angular_rate: max pixel displacement {chord:.3f} exceeds "
                    f"max_displacement {self.max_displacement}"
                )

    @property
    def class_id(self) -> int:
        return class_id_for(self.shape_kind, self.motion_kind)


def _canonical_mask(spec: SceneSpec, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Membership test of the un-rotated shape, on center offsets (dx, dy).

    Square and bar use half-open [-s/2, s/2) extents so that an integer
    center yields exactly s covered pixel columns/rows.
    """
    s = spec.size_px
    half = s / 2.0
    if spec.shape_kind == "square":
        return (dx >= -half) & (dx < half) & (dy >= -half) & (dy < half)
    if spec.shape_kind == "disc":
        return dx * dx + dy * dy < half * half
    # bar: full width, one third height (at least one pixel)
    bh = max(1, s // 3) / 2.0
    return (dx >= -half) & (dx < half) & (dy >= -bh) & (dy < bh)


def _trajectory(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame shape centers (T, 2) in (x, y) and rotation angles (T,)."""
    T = spec.frames
    centers = np.zeros((T, 2))
    angles = np.zeros(T)
    c = np.array(spec.start_position, dtype=np.float64)
    centers[0] = c
    if spec.motion_kind == "translate":
        v = np.asarray(spec.velocity, dtype=np.float64)
        for k in range(1, T):
            centers[k] = centers[k - 1] + v
    elif spec.motion_kind == "bounce":
        v = np.array(spec.velocity, dtype=np.float64)
        half = spec.size_px / 2.0
        lo = np.array([half, half])
        hi = np.array([spec.width - half, spec.height - half])
        for k in range(1, T):
            c = c + v
            for ax in range(2):
                # reflect off whichever wall was crossed
                while c[ax] < lo[ax] or c[ax] > hi[ax]:
                    if c[ax] < lo[ax]:
                        c[ax] = 2 * lo[ax] - c[ax]
                    else:
                        c[ax] = 2 * hi[ax] - c[ax]
                    v[ax] = -v[ax]
            centers[k] = c
    elif spec.motion_kind == "oscillate":
        v = np.asarray(spec.velocity, dtype=np.float64)
        half_period = max(1, T // 4)
        for k in range(1, T):
            sign = 1.0 if ((k - 1) // half_period) % 2 == 0 else -1.0
            centers[k] = centers[k - 1] + sign * v
    elif spec.motion_kind == "rotate":
        centers[:] = c
        angles[:] = spec.angular_rate * np.arange(T)
    return centers, angles


def _foreground_mask(spec: SceneSpec, center: np.ndarray, angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    dx = xs - center[0]
    dy = ys - center[1]
    if angle != 0.0:
        # rotate offsets back into the shape's canonical frame
        ca, sa = np.cos(-angle), np.sin(-angle)
        dx, dy = ca * dx - sa * dy, sa * dx + ca * dy
    return _canonical_mask(spec, dx, dy)


def render_video(spec: SceneSpec) -> np.ndarray:
    """Rasterize the scene to a (T, H, W, 3) float32 video in [-1, 1]."""
    spec.validate()
    centers, angles = _trajectory(spec)
    video = np.full((spec.frames, spec.height, spec.width, 3), spec.bg_intensity, dtype=np.float32)
    for k in range(spec.frames):
        mask = _foreground_mask(spec, centers[k], angles[k])
        video[k][mask] = spec.fg_intensity
    return video


def analytic_flow(spec: SceneSpec) -> FlowField:
    """Exact forward flow: frame i holds each foreground pixel's displacement
    from frame i to frame i+1; background pixels carry zero. T-1 frames."""
    spec.validate()
    centers, angles = _trajectory(spec)
    T, H, W = spec.frames, spec.height, spec.width
    flow = np.zeros((T - 1, H, W, 2), dtype=np.float32)
    ys, xs = np.mgrid[0:H, 0:W]
    for i in range(T - 1):
        mask = _foreground_mask(spec, centers[i], angles[i])
        if spec.motion_kind == "rotate":
            w = angles[i + 1] - angles[i]
            dx = xs - centers[i][0]
            dy = ys - centers[i][1]
            ca, sa = np.cos(w), np.sin(w)
            u = (ca * dx - sa * dy) - dx
            v = (sa * dx + ca * dy) - dy
            flow[i, ..., 0] = np.where(mask, u, 0.0)
            flow[i, ..., 1] = np.where(mask, v, 0.0)
        else:
            d = centers[i + 1] - centers[i]
            flow[i, ..., 0] = np.where(mask, d[0], 0.0)
            flow[i, ..., 1] = np.where(mask, d[1], 0.0)
    return FlowField(flow, padded=False)


def shuffle_frames(video: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Reorder frames by a uniformly drawn non-identity permutation."""
    video = np.asarray(video)
    T = video.shape[0]
    if T < 2:
        raise ValueError(f"need at least 2 frames to shuffle, got {T}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(T)
    while (perm == np.arange(T)).all():
        perm = rng.permutation(T)
    return video[perm], perm


@dataclass
class DatasetConfig:
    n_train: int = 512
    n_holdout: int = 64
    frames: int = 8
    height: int = 16
    width: int = 16
    size_range: tuple[int, int] = (3, 6)
    max_displacement: float = DEFAULT_MAX_DISPLACEMENT

    def validate(self) -> None:
        if self.n_train < 0 or self.n_holdout < 0:
            raise ValueError("n_train/n_holdout: must be non-negative")
        if self.frames < 2:
            raise ValueError("frames: need at least 2")
        if self.size_range[0] < 1 or self.size_range[1] >= min(self.height, self.width):
            raise ValueError(f"size_range: {self.size_range} invalid for {self.height}x{self.width}")


def random_scene(config: DatasetConfig, index: int, seed: int) -> SceneSpec:
    """Scene for corpus item ``index``; classes cycle so the corpus is balanced."""
    rng = np.random.default_rng(seed + index)
    combo = index % N_CLASSES
    shape_kind = SHAPE_KINDS[combo // len(MOTION_KINDS)]
    motion_kind = MOTION_KINDS[combo % len(MOTION_KINDS)]
    size = int(rng.integers(config.size_range[0], config.size_range[1] + 1))

    margin = size / 2.0 + 1
    cx = int(rng.integers(int(np.ceil(margin)), int(config.width - margin) + 1))
    cy = int(rng.integers(int(np.ceil(margin)), int(config.height - margin) + 1))

    velocity = (0.0, 0.0)
    angular_rate = 0.0
    if motion_kind == "rotate":
        r_max = size * np.sqrt(2.0) / 2.0
        w_cap = 2.0 * np.arcsin(min(1.0, config.max_displacement / (2.0 * r_max)))
        angular_rate = float(rng.choice([-1, 1]) * rng.uniform(0.15, min(0.9, 0.95 * w_cap)))
    else:
        while velocity == (0.0, 0.0):
            vx = int(rng.integers(-2, 3))
            vy = int(rng.integers(-2, 3))
            if np.hypot(vx, vy) <= config.max_displacement:
                velocity = (float(vx), float(vy))

    # a spectrum of fg/bg contrasts: low-contrast shapes stay ambiguous under
    # noise until late timesteps, so denoising them rewards temporal context
    bg = float(rng.uniform(-1.0, -0.05))
    fg = float(min(1.0, bg + rng.uniform(0.15, 1.0)))

    return SceneSpec(
        shape_kind=shape_kind,
        motion_kind=motion_kind,
        size_px=size,
        frames=config.frames,
        height=config.height,
        width=config.width,
        start_position=(float(cx), float(cy)),
        velocity=velocity,
        angular_rate=angular_rate,
        fg_intensity=fg,
        bg_intensity=bg,
        max_displacement=config.max_displacement,
    )


def build_dataset(
    out_dir: str | Path,
    config: DatasetConfig | None = None,
    seed: int = 0,
    overwrite: bool = False,
) -> Path:
    """Write the corpus and its manifest; returns the manifest path.

    Item i uses seed ``seed + i`` (holdout items continue the index range),
    so re-running with the same seed reproduces byte-identical files.
    """
    config = config or DatasetConfig()
    config.validate()
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not overwrite:
        raise OSError(f"{manifest_path} already exists; pass overwrite to replace it")
    out_dir.mkdir(parents=True, exist_ok=True)

    def emit(index: int) -> dict:
        spec = random_scene(config, index, seed)
        video_name = f"item_{index:05d}_video.vjt"
        flow_name = f"item_{index:05d}_flow.vjt"
        save_tensor(out_dir / video_name, render_video(spec))
        save_tensor(out_dir / flow_name, analytic_flow(spec).data)
        return {"video": video_name, "flow": flow_name, "class_id": spec.class_id}

    train = [emit(i) for i in range(config.n_train)]
    holdout = [emit(config.n_train + j) for j in range(config.n_holdout)]
    manifest = {
        "seed": seed,
        "resolution": [config.height, config.width],
        "frames": config.frames,
        "train": train,
        "holdout": holdout,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


@dataclass
class DatasetItem:
    video: np.ndarray  # (T, H, W, 3)
    flow: FlowField  # unpadded, T-1 frames
    class_id: int


@dataclass
class Dataset:
    train: list[DatasetItem]
    holdout: list[DatasetItem]
    frames: int
    height: int
    width: int
    seed: int = 0
    manifest_path: Path | None = None


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    frames = int(manifest["frames"])
    height, width = (int(v) for v in manifest["resolution"])

    def load_items(entries: list[dict]) -> list[DatasetItem]:
        items = []
        for entry in entries:
            video = load_tensor(root / entry["video"])
            flow = load_tensor(root / entry["flow"])
            if video.shape != (frames, height, width, 3):
                raise ValueError(f"{entry['video']}: shape {video.shape} disagrees with manifest")
            items.append(
                DatasetItem(
                    video=video.astype(np.float32),
                    flow=FlowField(flow.astype(np.float32), padded=flow.shape[0] == frames),
                    class_id=int(entry["class_id"]),
                )
            )
        return items

    return Dataset(
        train=load_items(manifest["train"]),
        holdout=load_items(manifest["holdout"]),
        frames=frames,
        height=height,
        width=width,
        seed=int(manifest.get("seed", 0)),
        manifest_path=manifest_path,
    )
