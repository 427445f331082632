"""Plug-and-play refinement head: RV logits in, per-point labels out."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lacrange.autodiff import tensor as T
from lacrange.autodiff.layers import Block
from lacrange.autodiff.tensor import Tensor
from lacrange.errors import ConfigError, DimensionError
from lacrange.point_refine.nafa import COARSE, FINE, CylGrid, NAFAParams, nafa_logits
from lacrange.point_refine.sr2fa import SR2FAParams, sr2fa_forward


@dataclass
class RefineConfig:
    hidden: int = 16
    feat_channels: int = 16
    lam: float = 1.0
    window: int = 7
    k: int = 8
    k_nafa: int = 7
    window_nafa: int = 7
    grids: list = field(default_factory=lambda: [list(COARSE.bins), list(FINE.bins)])
    rho_max: float = 60.0
    z_min: float = -4.0
    z_max: float = 4.0
    use_sr2fa: bool = True
    init: str = "random"          # random | passthrough
    init_gain: float = 5.0
    init_noise: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.init not in ("random", "passthrough"):
            raise ConfigError(f"unknown head init {self.init!r}")
        if len(self.grids) < 1:
            raise ConfigError("need at least one voxel grid")

    def cyl_grids(self) -> tuple:
        return tuple(CylGrid(tuple(b), self.rho_max, self.z_min, self.z_max) for b in self.grids)


class RefineParams(Block):
    """All learnable weights of the head plus its hyper-parameters."""

    def __init__(self, c_low: int, c_dec: int, num_classes: int, cfg: RefineConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.num_classes = num_classes
        self.c_low, self.c_dec = c_low, c_dec
        self.sr2fa = SR2FAParams(c_low, c_dec, cfg.feat_channels, num_classes, rng, cfg.hidden,
                                 cfg.lam, cfg.window, cfg.k)
        self.nafa = NAFAParams(cfg.feat_channels, num_classes, rng, cfg.hidden, cfg.k_nafa,
                               cfg.window_nafa, cfg.cyl_grids())
        if cfg.init == "passthrough":
            passthrough_init(self, cfg.init_gain, cfg.init_noise)

    @property
    def lam(self) -> float:
        return self.sr2fa.lam


def logits_to_probs(rv_logits) -> np.ndarray:
    """``[C, H, W]`` logits -> ``[H, W, C]`` probabilities (constant, no gradient)."""
    x = np.asarray(rv_logits.data if isinstance(rv_logits, Tensor) else rv_logits, dtype=np.float64)
    x = x - x.max(axis=0, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=0, keepdims=True)).transpose(1, 2, 0)


def refine_point_logits(rv_logits, rv_low_feats, rv_dec_feats, ri, cloud, params: RefineParams,
                        cache: dict | None = None) -> Tensor:
    """Differentiable per-point logits ``[N, C]``; used for training the head."""
    probs = logits_to_probs(rv_logits)
    if probs.shape[:2] != ri.mask.shape:
        raise DimensionError(f"logits {probs.shape[:2]} do not match range image {ri.mask.shape}")
    if probs.shape[2] != params.num_classes:
        raise DimensionError(f"head built for {params.num_classes} classes, logits have {probs.shape[2]}")
    feats = sr2fa_forward(rv_low_feats, rv_dec_feats, probs, ri, params.sr2fa,
                          aggregate=params.cfg.use_sr2fa, cache=cache)
    return nafa_logits(cloud, feats, probs, ri, params.nafa.grids, params.nafa, cache)


def refine_points(rv_logits, rv_low_feats, rv_dec_feats, ri, cloud, params: RefineParams,
                  cache: dict | None = None) -> np.ndarray:
    """softmax -> SR2FA -> 3D-NAFA -> argmax, evaluated without a tape."""
    with T.no_grad():
        logits = refine_point_logits(rv_logits, rv_low_feats, rv_dec_feats, ri, cloud, params, cache)
    return np.argmax(logits.data, axis=1)


def passthrough_init(params: RefineParams, gain: float = 50.0, noise: float = 0.0) -> RefineParams:
    """Weights under which the head averages its neighbors' probabilities.

    Every weight is scaled by ``noise`` (zero by default) and identity paths
    are added that carry the probability channels through the NAFA encoder,
    the voxel skip MLPs and the classifier; the SR2FA residual starts at
    zero gain.  With ``noise == 0`` and
    ``k_nafa == 1`` every surviving point receives its own pixel's argmax,
    i.e. the back-projected label.
    """
    for p in params.parameters():
        p.data = p.data * noise
    c = params.num_classes
    nafa = params.nafa
    f = params.cfg.feat_channels
    h = nafa.pfe.weights[0].shape[1]
    if h < c:
        raise ConfigError("pass-through needs hidden >= num_classes")
    eye = np.eye(c)
    nafa.pfe.weights[0].data[f:f + c, :c] += eye
    for mlps in nafa.scales:
        mlps.mlp_out.weights[0].data[:c, :c] += eye
    nafa.cls1.weights[0].data[:c, :c] += eye
    nafa.cls2.weights[0].data[:c, :c] += gain * eye
    params.sr2fa.delta_scale.weights[0].data[:] = 0.0
    for bn in (params.sr2fa.post_bn,):
        bn.weights[0].data[:] = 1.0
    return params
