"""Optical flow representation: normalization, RGB codec, block matching.

A flow field stores per-pixel displacements (u, v) in pixels, u horizontal
and v vertical, where frame i describes the transition from video frame i
to frame i+1. Fields therefore have T-1 frames natively and are padded
with one trailing zero frame before they enter the video pipeline.

The RGB encoding maps angle to hue and normalized magnitude to value
(black = no motion), continuously and invertibly below the magnitude cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SIGMA = 0.15


@dataclass
class FlowField:
    """(T_f, H, W, 2) displacements plus whether the zero pad was applied."""

    data: np.ndarray
    padded: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 2:
            raise ValueError(f"flow data must be (T, H, W, 2), got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def flow_cap(height: int, width: int, sigma: float = DEFAULT_SIGMA) -> float:
    """Magnitude at which the normalized magnitude saturates to 1."""
    return sigma * float(np.sqrt(height * height + width * width))


def _flow_array(flow: FlowField | np.ndarray) -> np.ndarray:
    return flow.data if isinstance(flow, FlowField) else np.asarray(flow)


def normalize_flow(
    flow: FlowField | np.ndarray, sigma: float = DEFAULT_SIGMA
) -> tuple[np.ndarray, np.ndarray]:
    """Return (m, alpha): capped normalized magnitude and direction angle.

    m = min(1, |d| / (sigma * sqrt(H^2 + W^2))), alpha = arctan2(v, u) in
    (-pi, pi], with alpha = 0 for zero flow.
    """
    data = _flow_array(flow)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not np.isfinite(data).all():
        raise ValueError("flow contains non-finite values")
    h, w = data.shape[-3], data.shape[-2]
    u, v = data[..., 0], data[..., 1]
    m = np.minimum(1.0, np.hypot(u, v) / flow_cap(h, w, sigma))
    alpha = np.arctan2(v, u)
    alpha = np.where(alpha == -np.pi, np.pi, alpha)
    return m, alpha


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = np.stack(
        [
            np.stack([v, t, p], axis=-1),
            np.stack([q, v, p], axis=-1),
            np.stack([p, v, t], axis=-1),
            np.stack([p, q, v], axis=-1),
            np.stack([t, p, v], axis=-1),
            np.stack([v, p, q], axis=-1),
        ],
        axis=0,
    )
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def _rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(mx > 0, delta / mx, 0.0)
        hr = np.where(delta > 0, ((g - b) / delta) % 6.0, 0.0)
        hg = np.where(delta > 0, (b - r) / delta + 2.0, 0.0)
        hb = np.where(delta > 0, (r - g) / delta + 4.0, 0.0)
    h = np.where(mx == r, hr, np.where(mx == g, hg, hb)) / 6.0
    return h % 1.0, s, mx


def encode_flow_rgb(flow: FlowField, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Encode a padded flow field as a (T, H, W, 3) video in [-1, 1].

    Hue carries the angle ((alpha + pi) / 2 pi), value carries m, saturation
    is 1; zero flow encodes as exact black (-1, -1, -1). Continuous valued,
    so decoding recovers sub-cap flows exactly up to float rounding.
    """
    if not flow.padded:
        raise ValueError("flow has T-1 frames; call pad_flow before encoding")
    m, alpha = normalize_flow(flow, sigma)
    hue = (alpha + np.pi) / (2.0 * np.pi)
    rgb = _hsv_to_rgb(hue, np.ones_like(m), m)
    return (rgb * 2.0 - 1.0).astype(np.float64)


def decode_flow_rgb(flow_video: np.ndarray, sigma: float = DEFAULT_SIGMA) -> FlowField:
    """Invert :func:`encode_flow_rgb`. Pixels within 1e-6 of black decode to
    zero; saturated pixels decode to the cap magnitude (a lower bound)."""
    fv = np.asarray(flow_video, dtype=np.float64)
    if fv.ndim != 4 or fv.shape[-1] != 3:
        raise ValueError(f"flow video must be (T, H, W, 3), got {fv.shape}")
    if not np.isfinite(fv).all():
        raise ValueError("flow video contains non-finite values")
    if fv.min() < -1.0 - 1e-4 or fv.max() > 1.0 + 1e-4:
        raise ValueError(
            f"flow video values outside [-1, 1] (range [{fv.min():.4g}, {fv.max():.4g}])"
        )
    rgb = np.clip((fv + 1.0) / 2.0, 0.0, 1.0)
    hue, _, value = _rgb_to_hsv(rgb)
    h, w = fv.shape[1], fv.shape[2]
    alpha = hue * 2.0 * np.pi - np.pi
    mag = value * flow_cap(h, w, sigma)
    zero = value <= 5e-7  # within 1e-6 of the all-black code in [-1, 1] units
    u = np.where(zero, 0.0, mag * np.cos(alpha))
    v = np.where(zero, 0.0, mag * np.sin(alpha))
    return FlowField(np.stack([u, v], axis=-1), padded=True)


def pad_flow(flow: FlowField) -> FlowField:
    """Append one all-zero trailing frame so the field spans T video frames."""
    if flow.padded:
        raise ValueError("flow is already padded")
    zeros = np.zeros_like(flow.data[:1])
    return FlowField(np.concatenate([flow.data, zeros], axis=0), padded=True)


def estimate_flow_blockmatch(video: np.ndarray, block: int = 4, radius: int = 3) -> FlowField:
    """Exhaustive SAD block matching between consecutive frames.

    Every block in frame i is compared against frame i+1 at all integer
    displacements in [-radius, radius]^2 (windows index toroidally, so
    rigid wrap-around shifts are recovered exactly even at borders).
    Ties go to the smallest displacement magnitude, then lexicographic
    (u, v). All pixels of a block share its displacement.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise ValueError(f"video must be (T, H, W, C), got {video.shape}")
    T, H, W = video.shape[:3]
    if T < 2:
        raise ValueError(f"need at least 2 frames, got {T}")
    if block < 1 or H % block or W % block:
        raise ValueError(f"block {block} must divide H={H} and W={W}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")

    candidates = [(du, dv) for dv in range(-radius, radius + 1) for du in range(-radius, radius + 1)]
    candidates.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))

    gh, gw = H // block, W // block
    flow = np.zeros((T - 1, H, W, 2), dtype=np.float64)
    for i in range(T - 1):
        cur, nxt = video[i], video[i + 1]
        best_sad = np.full((gh, gw), np.inf)
        best = np.zeros((gh, gw, 2))
        for du, dv in candidates:
            shifted = np.roll(nxt, shift=(-dv, -du), axis=(0, 1))
            diff = np.abs(cur - shifted).sum(axis=-1)
            sad = diff.reshape(gh, block, gw, block).sum(axis=(1, 3))
            better = sad < best_sad
            best_sad = np.where(better, sad, best_sad)
            best[better] = (du, dv)
        flow[i] = np.repeat(np.repeat(best, block, axis=0), block, axis=1)
    return FlowField(flow, padded=False)


def endpoint_error(a: FlowField | np.ndarray, b: FlowField | np.ndarray) -> float:
    """Mean Euclidean distance between corresponding displacement vectors."""
    da, db = _flow_array(a), _flow_array(b)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch: {da.shape} vs {db.shape}")
    diff = da.astype(np.float64) - db.astype(np.float64)
    return float(np.hypot(diff[..., 0], diff[..., 1]).mean())
