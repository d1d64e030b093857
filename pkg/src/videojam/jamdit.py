"""Tiny video diffusion transformer with a joint appearance-motion mode.

The base model maps a noisy video to a velocity prediction through
patchify -> linear in-projection -> attention blocks -> linear
out-projection -> unpatchify. The joint extension widens the two
projections to carry a motion channel group alongside the video: the new
input columns start at zero, so a freshly extended model reproduces the
base model's video prediction exactly and ignores the motion input until
fine-tuned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .synthdata import N_CLASSES


@dataclass
class ModelConfig:
    patch_t: int = 1
    patch: int = 2
    embed_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = N_CLASSES
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        for name in ("patch_t", "patch", "embed_dim", "n_blocks", "n_heads", "n_classes", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def null_class_id(self) -> int:
        """Reserved id for the unconditional (dropped) class embedding."""
        return self.n_classes

    @property
    def patch_dim(self) -> int:
        """Features per patch for one signal: patch_t * patch^2 * in_channels."""
        return self.patch_t * self.patch * self.patch * self.in_channels


@dataclass
class Prediction:
    """Velocity prediction; u_d is None for base (appearance-only) models."""

    u_x: Tensor
    u_d: Tensor | None = None


def patchify(x: Tensor, patch_t: int, patch: int) -> Tensor:
    """(..., T, H, W, C) -> (..., n_tokens, patch_t*patch^2*C), row-major
    in (t, h, w) patch order. Lossless; see :func:`unpatchify`."""
    t, h, w, c = x.shape[-4:]
    if t % patch_t or h % patch or w % patch:
        raise ValueError(f"patch ({patch_t},{patch},{patch}) does not divide shape {(t, h, w)}")
    gt, gh, gw = t // patch_t, h // patch, w // patch
    lead = x.shape[:-4]
    n = len(lead)
    x = x.reshape(*lead, gt, patch_t, gh, patch, gw, patch, c)
    order = tuple(range(n)) + tuple(i + n for i in (0, 2, 4, 1, 3, 5, 6))
    x = x.permute(order)
    return x.reshape(*lead, gt * gh * gw, patch_t * patch * patch * c)


def unpatchify(tokens: Tensor, patch_t: int, patch: int, t: int, h: int, w: int, c: int) -> Tensor:
    """Inverse of :func:`patchify` for the given output dimensions."""
    gt, gh, gw = t // patch_t, h // patch, w // patch
    if tokens.shape[-2] != gt * gh * gw or tokens.shape[-1] != patch_t * patch * patch * c:
        raise ValueError(
            f"token shape {tuple(tokens.shape[-2:])} does not match target {(t, h, w, c)}"
        )
    lead = tokens.shape[:-2]
    n = len(lead)
    x = tokens.reshape(*lead, gt, gh, gw, patch_t, patch, patch, c)
    order = tuple(range(n)) + tuple(i + n for i in (0, 3, 1, 4, 2, 5, 6))
    x = x.permute(order)
    return x.reshape(*lead, t, h, w, c)


def _sincos_features(pos: Tensor, dim: int) -> Tensor:
    """Standard sinusoidal features of a position vector, dim must be even."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = pos.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def positional_embedding_3d(gt: int, gh: int, gw: int, dim: int) -> Tensor:
    """Fixed sinusoidal embedding for a (gt, gh, gw) token grid, row-major."""
    dim_t = 2 * ((dim // 4) // 2)
    dim_h = 2 * (((dim - dim_t) // 2) // 2)
    dim_w = dim - dim_t - dim_h
    tt, hh, ww = torch.meshgrid(
        torch.arange(gt, dtype=torch.float64),
        torch.arange(gh, dtype=torch.float64),
        torch.arange(gw, dtype=torch.float64),
        indexing="ij",
    )
    emb = torch.cat(
        [
            _sincos_features(tt.reshape(-1), dim_t),
            _sincos_features(hh.reshape(-1), dim_h),
            _sincos_features(ww.reshape(-1), dim_w),
        ],
        dim=-1,
    )
    return emb.to(torch.float32)


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of t in [0, 1] (scaled by 1000) through a 2-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = nn.Linear(freq_dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: Tensor) -> Tensor:
        feats = _sincos_features(t * 1000.0, self.freq_dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(feats)))


class TransformerBlock(nn.Module):
    """Pre-LN block: spatiotemporal self-attention over all video tokens,
    cross-attention to the condition tokens, then an MLP."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn_qkv = nn.Linear(dim, 3 * dim)
        self.attn_proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_q = nn.Linear(dim, dim)
        self.cross_kv = nn.Linear(dim, 2 * dim)
        self.cross_proj = nn.Linear(dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp_fc1 = nn.Linear(dim, hidden)
        self.mlp_fc2 = nn.Linear(hidden, dim)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        b, n, d = x.shape
        q, k, v = self.attn_qkv(self.norm1(x)).chunk(3, dim=-1)
        attn = F.scaled_dot_product_attention(self._heads(q), self._heads(k), self._heads(v))
        x = x + self.attn_proj(attn.transpose(1, 2).reshape(b, n, d))

        q = self._heads(self.cross_q(self.norm2(x)))
        k, v = self.cross_kv(cond).chunk(2, dim=-1)
        attn = F.scaled_dot_product_attention(q, self._heads(k), self._heads(v))
        x = x + self.cross_proj(attn.transpose(1, 2).reshape(b, n, d))

        return x + self.mlp_fc2(F.gelu(self.mlp_fc1(self.norm3(x))))


class JamDiT(nn.Module):
    """Base (video-only) or joint (video + motion) velocity predictor.

    Conditioning enters as two cross-attended tokens: a class embedding
    (id ``config.null_class_id`` is the learned unconditional embedding)
    and a timestep embedding.
    """

    def __init__(self, config: ModelConfig, joint_mode: bool = False):
        super().__init__()
        self.config = config
        self.joint_mode = joint_mode
        width = config.patch_dim * (2 if joint_mode else 1)
        self.w_in = nn.Linear(width, config.embed_dim)
        self.class_embed = nn.Embedding(config.n_classes + 1, config.embed_dim)
        self.time_embed = TimestepEmbedder(config.embed_dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.n_heads, config.mlp_ratio)
            for _ in range(config.n_blocks)
        )
        self.final_norm = nn.LayerNorm(config.embed_dim)
        self.w_out = nn.Linear(config.embed_dim, width)
        self._pos_cache: dict[tuple[int, int, int], Tensor] = {}

    def _positional(self, gt: int, gh: int, gw: int) -> Tensor:
        key = (gt, gh, gw)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_embedding_3d(gt, gh, gw, self.config.embed_dim)
        p = self.w_in.weight
        return self._pos_cache[key].to(device=p.device, dtype=p.dtype)

    def _condition(self, y: Tensor, t: Tensor) -> Tensor:
        return torch.stack([self.class_embed(y), self.time_embed(t)], dim=1)

    def _validate_inputs(self, x: Tensor, y: Tensor, t: Tensor) -> None:
        cfg = self.config
        if x.ndim != 5 or x.shape[-1] != cfg.in_channels:
            raise ValueError(f"expected (B, T, H, W, {cfg.in_channels}) input, got {tuple(x.shape)}")
        if ((y < 0) | (y > cfg.n_classes)).any():
            raise ValueError(
                f"unknown class id in {y.tolist()}; valid ids are 0..{cfg.n_classes - 1} "
                f"plus null id {cfg.null_class_id}"
            )
        if ((t < 0) | (t > 1)).any():
            raise ValueError(f"timesteps must lie in [0, 1], got {t.tolist()}")

    def _coerce(
        self, x: Tensor, y: int | Tensor | None, t: float | Tensor
    ) -> tuple[Tensor, Tensor, Tensor, bool]:
        batched = x.ndim == 5
        if not batched:
            x = x.unsqueeze(0)
        b = x.shape[0]
        dtype = self.w_in.weight.dtype
        device = self.w_in.weight.device
        x = x.to(device=device, dtype=dtype)
        if isinstance(y, Tensor) and y.numel() == 1:
            y = int(y.item())
        if isinstance(t, Tensor) and t.numel() == 1:
            t = float(t.item())
        if y is None:
            y = torch.full((b,), self.config.null_class_id, dtype=torch.long, device=device)
        elif not isinstance(y, Tensor):
            y = torch.full((b,), int(y), dtype=torch.long, device=device)
        else:
            y = y.to(device=device, dtype=torch.long).reshape(b)
        if not isinstance(t, Tensor):
            t = torch.full((b,), float(t), dtype=dtype, device=device)
        else:
            t = t.to(device=device, dtype=dtype).reshape(b)
        return x, y, t, batched

    def _run(self, tokens: Tensor, y: Tensor, t: Tensor, grid: tuple[int, int, int]) -> Tensor:
        h = self.w_in(tokens) + self._positional(*grid)
        cond = self._condition(y, t)
        for block in self.blocks:
            h = block(h, cond)
        return self.w_out(self.final_norm(h))

    def forward_base(self, x: Tensor, y: int | Tensor | None, t: float | Tensor) -> Prediction:
        if self.joint_mode:
            raise ValueError("model is in joint mode; use forward_joint")
        cfg = self.config
        x, y, t, batched = self._coerce(x, y, t)
        self._validate_inputs(x, y, t)
        T, H, W, C = x.shape[1:]
        tokens = patchify(x, cfg.patch_t, cfg.patch)
        out = self._run(tokens, y, t, (T // cfg.patch_t, H // cfg.patch, W // cfg.patch))
        u_x = unpatchify(out, cfg.patch_t, cfg.patch, T, H, W, C)
        return Prediction(u_x=u_x if batched else u_x.squeeze(0))

    def forward_joint(
        self, x: Tensor, d: Tensor | None, y: int | Tensor | None, t: float | Tensor
    ) -> Prediction:
        if not self.joint_mode:
            raise ValueError("model is in base mode; use forward_base or extend_joint first")
        cfg = self.config
        x, y, t, batched = self._coerce(x, y, t)
        if d is None:
            d = torch.zeros_like(x)  # the dropped-motion signal
        else:
            if d.ndim == 4:
                d = d.unsqueeze(0)
            d = d.to(device=x.device, dtype=x.dtype)
        if d.shape != x.shape:
            raise ValueError(f"motion input shape {tuple(d.shape)} != video shape {tuple(x.shape)}")
        self._validate_inputs(x, y, t)
        T, H, W, C = x.shape[1:]
        tokens = torch.cat(
            [patchify(x, cfg.patch_t, cfg.patch), patchify(d, cfg.patch_t, cfg.patch)], dim=-1
        )
        out = self._run(tokens, y, t, (T // cfg.patch_t, H // cfg.patch, W // cfg.patch))
        u_x = unpatchify(out[..., : cfg.patch_dim], cfg.patch_t, cfg.patch, T, H, W, C)
        u_d = unpatchify(out[..., cfg.patch_dim :], cfg.patch_t, cfg.patch, T, H, W, C)
        if not batched:
            u_x, u_d = u_x.squeeze(0), u_d.squeeze(0)
        return Prediction(u_x=u_x, u_d=u_d)

    def forward(
        self,
        x: Tensor,
        d: Tensor | None = None,
        y: int | Tensor | None = None,
        t: float | Tensor = 0.0,
    ) -> Prediction:
        if self.joint_mode:
            return self.forward_joint(x, d, y, t)
        if d is not None:
            raise ValueError("base model takes no motion input")
        return self.forward_base(x, y, t)


def _reset_parameters(model: JamDiT, generator: torch.Generator, std: float = 0.02) -> None:
    """Deterministic init: N(0, std) weights, zero biases, unit norm scales."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=generator, dtype=torch.float32) * std)


def init_base(config: ModelConfig | None = None, seed: int = 0) -> JamDiT:
    """Fresh appearance-only model with a seed-determined initialization."""
    model = JamDiT(config or ModelConfig(), joint_mode=False)
    _reset_parameters(model, torch.Generator().manual_seed(seed))
    return model


def extend_joint(base: JamDiT, seed: int = 0) -> JamDiT:
    """Widen a base model to the dual video+motion format.

    The in-projection gains all-zero columns for the motion features (video
    features first, motion second), so the extended model's video prediction
    initially equals the base model's for any motion input. The
    out-projection gains fresh rows drawn with the base init scheme. All
    other weights are copied by value.
    """
    if base.joint_mode:
        raise ValueError("model is already joint")
    cfg = base.config
    joint = JamDiT(cfg, joint_mode=True)
    generator = torch.Generator().manual_seed(seed)
    state = {k: v.clone() for k, v in base.state_dict().items()}
    pd = cfg.patch_dim
    w_in = torch.zeros(cfg.embed_dim, 2 * pd)
    w_in[:, :pd] = state["w_in.weight"]
    state["w_in.weight"] = w_in
    w_out = torch.randn((2 * pd, cfg.embed_dim), generator=generator) * 0.02
    w_out[:pd] = state["w_out.weight"]
    state["w_out.weight"] = w_out
    b_out = torch.zeros(2 * pd)
    b_out[:pd] = state["w_out.bias"]
    state["w_out.bias"] = b_out
    joint.load_state_dict(state)
    return joint


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
