"""Camera/LiDAR feature fusion with global-context Modality Look-Up gates.

Stage one concatenates both modalities and runs a residual block.  Stage two
builds, per modality, a channel gate and a spatial gate from pooled contexts
of the fused and the modality features, applies their sum to the modality's
pre-fusion features, and adds the processed result back onto the fused map.
Two gate flavours exist: a CBAM-style one (MLP on channel context, conv on
space context) and a cross-attention one over pooled token sets.
"""

from __future__ import annotations

import contextlib

from dataclasses import dataclass

import numpy as np

from lacrange.autodiff import layers as L
from lacrange.autodiff import tensor as T
from lacrange.autodiff.layers import Block
from lacrange.autodiff.tensor import Tensor
from lacrange.errors import ConfigError, DimensionError

MLU_KINDS = ("cbam", "xattn")
STRATEGY_TOKENS = ("cbam", "xattn", "combined")
# spatial token grid for the cross-attention gate
TOKEN_GRID = (4, 16)


@dataclass
class ModalityFeatures:
    pre: Tensor           # [C, H, W]
    ctx_space: Tensor     # [2, H, W]  avg and max over channels
    ctx_channel: Tensor   # [2C]       avg and max over space

    @classmethod
    def from_pre(cls, pre) -> "ModalityFeatures":
        pre = T.as_tensor(pre)
        return cls(pre, L.pool_global(pre, "channel"), L.pool_global(pre, "space"))

    @property
    def channels(self) -> int:
        return self.pre.shape[0]


@dataclass
class FusedContext:
    fused: Tensor
    ctx_space: Tensor
    ctx_channel: Tensor

    @classmethod
    def from_fused(cls, fused) -> "FusedContext":
        fused = T.as_tensor(fused)
        return cls(fused, L.pool_global(fused, "channel"), L.pool_global(fused, "space"))


@dataclass(frozen=True)
class MLUStrategy:
    stages: tuple

    def __post_init__(self):
        bad = [s for s in self.stages if s not in MLU_KINDS]
        if bad or not self.stages:
            raise ConfigError(f"MLU stages must be drawn from {MLU_KINDS}, got {self.stages}")

    @classmethod
    def from_token(cls, token: str, num_stages: int = 4) -> "MLUStrategy":
        """``cbam`` / ``xattn`` everywhere, or ``combined``: CBAM on the shallow half."""
        if token == "combined":
            n_cbam = num_stages // 2
            return cls(("cbam",) * n_cbam + ("xattn",) * (num_stages - n_cbam))
        if token in MLU_KINDS:
            return cls((token,) * num_stages)
        raise ConfigError(f"unknown MLU strategy {token!r}; expected one of {STRATEGY_TOKENS}")

    def check(self, num_stages: int):
        if len(self.stages) != num_stages:
            raise ConfigError(f"strategy has {len(self.stages)} entries for {num_stages} stages")


# ---------------------------------------------------------------------------
# initial fusion
# ---------------------------------------------------------------------------

class ResBlock(Block):
    """conv3x3-bn-leaky-conv3x3-bn plus a 1x1 projected skip."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv_a = L.conv_params(cin, cout, 3, rng)
        self.bn_a = L.batchnorm_params(cout)
        self.conv_b = L.conv_params(cout, cout, 3, rng)
        self.bn_b = L.batchnorm_params(cout)
        self.skip = L.conv_params(cin, cout, 1, rng)

    def __call__(self, x) -> Tensor:
        y = T.leaky_relu(L.bn(self.bn_a, L.apply_conv2d(self.conv_a, x), self))
        y = L.bn(self.bn_b, L.apply_conv2d(self.conv_b, y), self)
        return y + L.apply_conv2d(self.skip, x)


def initial_fuse(cam, lidar, params: ResBlock) -> FusedContext:
    cam, lidar = T.as_tensor(cam), T.as_tensor(lidar)
    if cam.ndim != 3 or lidar.ndim != 3 or cam.shape[1:] != lidar.shape[1:]:
        raise DimensionError(f"camera {cam.shape} and LiDAR {lidar.shape} maps differ spatially")
    return FusedContext.from_fused(params(T.concat([cam, lidar], axis=0)))


# ---------------------------------------------------------------------------
# Modality Look-Up
# ---------------------------------------------------------------------------

def _align_channel_ctx(f_ctx: Tensor, align: L.LayerParams | None) -> Tensor:
    """Map the fused channel context [2Cf] onto the modality's length [2C]."""
    if align is None:
        return f_ctx
    cf = f_ctx.shape[0] // 2
    return T.reshape(L.apply_mlp(align, T.reshape(f_ctx, (2, cf))), (-1,))


def _apply_gates(channel_gate: Tensor, space_gate: Tensor, pre: Tensor) -> Tensor:
    c = channel_gate.shape[0]
    h, w = pre.shape[1:]
    bracket = T.reshape(channel_gate, (c, 1, 1)) + T.reshape(space_gate, (1, h, w))
    return bracket * pre


class CbamMLU(Block):
    def __init__(self, c_fused: int, c_mod: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or max(c_mod // 2, 4)
        self.align = None if c_fused == c_mod else L.mlp_params(c_fused, c_mod, rng, "linear")
        self.mlp1 = L.mlp_params(2 * c_mod, hidden, rng)
        self.mlp2 = L.mlp_params(hidden, c_mod, rng, "linear")
        self.conv = L.conv_params(2, 1, 3, rng)


def mlu_cbam(F: FusedContext, M: ModalityFeatures, params: CbamMLU) -> Tensor:
    """``[BC_s(sig(MLP(M_c + F_c))) + BC_c(sig(Conv(M_s + F_s)))] * M_pre``."""
    fc = _align_channel_ctx(F.ctx_channel, params.align)
    if fc.shape != M.ctx_channel.shape:
        raise DimensionError(f"channel contexts {fc.shape} vs {M.ctx_channel.shape}")
    if F.ctx_space.shape != M.ctx_space.shape:
        raise DimensionError(f"space contexts {F.ctx_space.shape} vs {M.ctx_space.shape}")
    ch = T.sigmoid(L.apply_mlp(params.mlp2, L.apply_mlp(params.mlp1, M.ctx_channel + fc)))
    sp = T.sigmoid(L.apply_conv2d(params.conv, M.ctx_space + F.ctx_space))
    return _apply_gates(ch, sp, M.pre)


class XattnMLU(Block):
    def __init__(self, c_fused: int, c_mod: int, rng: np.random.Generator, dim: int = 16,
                 hidden: int = 16, token_grid: tuple = TOKEN_GRID):
        self.token_grid = tuple(token_grid)
        self.align = None if c_fused == c_mod else L.mlp_params(c_fused, c_mod, rng, "linear")
        # channel tokens: one per channel, features (avg, max)
        self.q_c = L.attention_proj_params(2, dim, rng)
        self.k_c = L.attention_proj_params(2, dim, rng)
        self.v_c = L.attention_proj_params(2, dim, rng)
        self.out_c = L.attention_proj_params(dim, dim, rng)
        self.mlp1 = L.mlp_params(dim, hidden, rng)
        self.mlp2 = L.mlp_params(hidden, 1, rng, "linear")
        # spatial tokens: one per pooled cell, features (avg, max)
        self.q_s = L.attention_proj_params(2, dim, rng)
        self.k_s = L.attention_proj_params(2, dim, rng)
        self.v_s = L.attention_proj_params(2, dim, rng)
        self.out_s = L.attention_proj_params(dim, dim, rng)
        self.conv = L.conv_params(dim, 1, 3, rng)


def token_grid_for(h: int, w: int, grid: tuple) -> tuple:
    return min(grid[0], h), min(grid[1], w)


def channel_tokens(ctx_channel: Tensor) -> Tensor:
    """[2C] (avg block, max block) -> [C, 2] tokens."""
    c = ctx_channel.shape[0] // 2
    return T.transpose(T.reshape(ctx_channel, (2, c)))


def space_tokens(ctx_space: Tensor, grid: tuple) -> Tensor:
    """[2, H, W] -> adaptive-average pooled [Ph*Pw, 2] tokens."""
    pooled = T.adaptive_avg_pool(ctx_space, *grid)
    return T.transpose(T.reshape(pooled, (2, -1)))


def xattn_core(q_tokens: Tensor, kv_tokens: Tensor, q_p, k_p, v_p, out_p) -> Tensor:
    """Embed pooled tokens and attend; cost depends only on the token counts."""
    q = L.apply_mlp(q_p, q_tokens)
    k = L.apply_mlp(k_p, kv_tokens)
    v = L.apply_mlp(v_p, kv_tokens)
    return L.attend_cross(q, k, v, out_p)


def mlu_xattn(F: FusedContext, M: ModalityFeatures, params: XattnMLU) -> Tensor:
    """Cross-attention gates: fused contexts query the modality's pooled contexts."""
    fc = _align_channel_ctx(F.ctx_channel, params.align)
    if fc.shape != M.ctx_channel.shape:
        raise DimensionError(f"channel contexts {fc.shape} vs {M.ctx_channel.shape}")
    if F.ctx_space.shape != M.ctx_space.shape:
        raise DimensionError(f"space contexts {F.ctx_space.shape} vs {M.ctx_space.shape}")
    att_c = xattn_core(channel_tokens(fc), channel_tokens(M.ctx_channel),
                       params.q_c, params.k_c, params.v_c, params.out_c)
    ch = T.sigmoid(T.reshape(L.apply_mlp(params.mlp2, L.apply_mlp(params.mlp1, att_c)), (-1,)))

    h, w = M.pre.shape[1:]
    grid = token_grid_for(h, w, params.token_grid)
    att_s = xattn_core(space_tokens(F.ctx_space, grid), space_tokens(M.ctx_space, grid),
                       params.q_s, params.k_s, params.v_s, params.out_s)
    att_map = T.reshape(T.transpose(att_s), (att_s.shape[1],) + grid)
    sp = T.sigmoid(L.apply_conv2d(params.conv, T.upsample_bilinear(att_map, h, w)))
    return _apply_gates(ch, sp, M.pre)


MLU_FUNCS = {"cbam": mlu_cbam, "xattn": mlu_xattn}


def make_mlu(kind: str, c_fused: int, c_mod: int, rng: np.random.Generator) -> Block:
    if kind == "cbam":
        return CbamMLU(c_fused, c_mod, rng)
    if kind == "xattn":
        return XattnMLU(c_fused, c_mod, rng)
    raise ConfigError(f"unknown MLU kind {kind!r}")


# ---------------------------------------------------------------------------
# full fusion stage
# ---------------------------------------------------------------------------

class CFFStage(Block):
    """Initial fusion, both look-ups and the two conv blocks for one encoder stage.

    With ``use_mlu=False`` the stage reduces to the residual initial fusion.
    """

    def __init__(self, c_cam: int, c_lidar: int, c_fused: int, kind: str,
                 rng: np.random.Generator, use_mlu: bool = True):
        self.kind = kind
        self.use_mlu = use_mlu
        self.fuse = ResBlock(c_cam + c_lidar, c_fused, rng)
        if use_mlu:
            self.mlu_cam = make_mlu(kind, c_fused, c_cam, rng)
            self.mlu_lidar = make_mlu(kind, c_fused, c_lidar, rng)
            self.post = [
                {"conv": L.conv_params(c_cam + c_lidar, c_fused, 3, rng), "bn": L.batchnorm_params(c_fused)},
                {"conv": L.conv_params(c_fused, c_fused, 3, rng), "bn": L.batchnorm_params(c_fused)},
            ]

    def __call__(self, cam, lidar, timer=None) -> Tensor:
        return cff_forward(cam, lidar, self.kind, self, timer)


def cff_forward(cam, lidar, strategy, params: CFFStage, timer=None) -> Tensor:
    """``fused + convs(concat(C_comp, L_comp))``.

    ``strategy`` is the MLU kind for this stage (a string) or an
    :class:`MLUStrategy` paired with ``params.stage_index``.  ``timer`` (an
    object with a ``stage(name)`` context manager) times the two look-ups.
    """
    kind = strategy
    if isinstance(strategy, MLUStrategy):
        kind = strategy.stages[getattr(params, "stage_index", 0)]
    if kind != params.kind:
        raise ConfigError(f"stage built for {params.kind!r} MLU, asked to run {kind!r}")
    F = initial_fuse(cam, lidar, params.fuse)
    if not params.use_mlu:
        return F.fused
    mlu = MLU_FUNCS[kind]
    with timer.stage("mlu") if timer is not None else contextlib.nullcontext():
        c_comp = mlu(F, ModalityFeatures.from_pre(cam), params.mlu_cam)
        l_comp = mlu(F, ModalityFeatures.from_pre(lidar), params.mlu_lidar)
    x = T.concat([c_comp, l_comp], axis=0)
    for blk in params.post:
        x = T.leaky_relu(L.bn(blk["bn"], L.apply_conv2d(blk["conv"], x), params))
    return F.fused + x
