"""Dual-metric neighbor aggregation on the range image with confidence blending.

Each masked pixel picks neighbors twice: by semantic-probability distance
and by range/remission distance.  A per-branch point feature encoder turns
the neighbors' feature distances into one softmax weight per neighbor; the
weighted sums of neighbor features are blended by the neighborhood's mean
semantic confidence and added to the center feature.
"""

from __future__ import annotations

import math

import numpy as np

from lacrange.autodiff import layers as L
from lacrange.autodiff import tensor as T
from lacrange.autodiff.layers import Block
from lacrange.autodiff.tensor import Tensor
from lacrange.errors import ConfigError, DimensionError, EmptySetError
from lacrange.point_refine.neighbors import NeighborSet, select_neighbors_batch
from lacrange.rv_projection import gather_window

R2_DIMS = 8   # |dxyz| (3), |drange|, |dremission|, |dRGB| (3)
_NEG = -1e30


# ---------------------------------------------------------------------------
# point feature encoder
# ---------------------------------------------------------------------------

def pfe_apply(neighbor_feats, params: L.LayerParams, valid: np.ndarray | None = None) -> Tensor:
    """Per-neighbor MLP, then concat with max and mean pools over neighbors.

    ``neighbor_feats`` is ``[..., k, D]``; the output is ``[..., k, 3D']``.
    ``valid`` (shape ``[..., k]``) excludes padding from both pools; sets
    without any valid entry pool to zeros.
    """
    x = T.as_tensor(neighbor_feats)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise EmptySetError("point feature encoder needs at least one neighbor")
    h = L.apply_mlp(params, x)
    k = h.shape[-2]
    if valid is None:
        mx = T.max_(h, axis=-2, keepdims=True)
        avg = T.mean(h, axis=-2, keepdims=True)
    else:
        v = np.asarray(valid, dtype=bool)[..., None]
        any_v = v.any(axis=-2, keepdims=True)
        mx = T.max_(T.where(v, h, _NEG), axis=-2, keepdims=True)
        mx = T.where(any_v, mx, 0.0)
        cnt = np.maximum(v.sum(axis=-2, keepdims=True), 1).astype(h.dtype)
        avg = T.sum_(h * v.astype(h.dtype), axis=-2, keepdims=True) / cnt
    reps = (1,) * (h.ndim - 2) + (k, 1)
    ones = np.ones(reps[:-1] + (1,), dtype=h.dtype)
    return T.concat([h, mx * ones, avg * ones], axis=-1)


class BranchParams(Block):
    """PFE plus the MLP that reduces each neighbor to one logit."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.pfe = L.mlp_params(d_in, hidden, rng)
        self.mlp1 = L.mlp_params(3 * hidden, hidden, rng)
        self.mlp2 = L.mlp_params(hidden, 1, rng, "linear")

    def logits(self, feature_distances, valid=None) -> Tensor:
        z = pfe_apply(feature_distances, self.pfe, valid)
        return T.reshape(L.apply_mlp(self.mlp2, L.apply_mlp(self.mlp1, z)), z.shape[:-1])


def aggregate_branch(neighbors: NeighborSet | np.ndarray, feature_distances, neighbor_values,
                     params: BranchParams) -> tuple[Tensor, np.ndarray]:
    """Softmax-weighted sum of neighbor values; one weight per neighbor.

    ``feature_distances`` is ``[N, k, D]`` and ``neighbor_values`` is
    ``[N, k, Dv]``; ``neighbors`` supplies the validity of each slot (a
    NeighborSet or a boolean ``[N, k]`` array).  Returns ``[N, Dv]`` and a
    per-target flag that is true where the set was empty (output zero).
    """
    valid = neighbors.valid if isinstance(neighbors, NeighborSet) else np.asarray(neighbors, bool)
    values = T.as_tensor(neighbor_values)
    if values.shape[:2] != valid.shape:
        raise DimensionError(f"values {values.shape} do not match neighbor slots {valid.shape}")
    empty = ~valid.any(axis=1)
    if valid.shape[1] == 0:
        return Tensor(np.zeros((valid.shape[0],) + values.shape[2:])), empty
    w = T.masked_softmax(params.logits(feature_distances, valid), valid, axis=-1)
    delta = T.sum_(T.reshape(w, w.shape + (1,)) * values, axis=1)
    return delta, empty


# ---------------------------------------------------------------------------
# semantic confidence
# ---------------------------------------------------------------------------

def pixel_confidence(probs: np.ndarray) -> np.ndarray:
    """``1 + sum_c S log S / log C`` along the last axis, with ``0 log 0 = 0``."""
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[-1]
    if c < 2:
        raise ConfigError("semantic confidence needs at least two classes")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return 1.0 + plogp.sum(axis=-1) / math.log(c)


def mean_confidence(probs) -> float:
    """Mean pixel confidence of a neighborhood given as ``[n, C]`` probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EmptySetError("mean confidence needs a non-empty neighborhood")
    return float(np.clip(pixel_confidence(probs).mean(), 0.0, 1.0))


def window_confidence(probs: np.ndarray, mask: np.ndarray, rows, cols, window: int) -> np.ndarray:
    """Mean confidence over the masked pixels of each target's window (target included)."""
    conf = pixel_confidence(probs)
    cr, cc, ok = gather_window(np.asarray(rows), np.asarray(cols), mask, window)
    vals = np.where(ok, conf[cr, cc], 0.0)
    n = np.maximum(ok.sum(axis=1), 1)
    return np.clip(vals.sum(axis=1) / n, 0.0, 1.0)


def fusion_weights(phi, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """(weight on the range-remission branch, weight on the semantic branch)."""
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    w_s = np.exp(-lam * (1.0 - np.asarray(phi, dtype=np.float64)))
    return 1.0 - w_s, w_s


def confidence_fuse(delta_s, delta_r2, phi, lam: float) -> Tensor:
    """``(1 - e^{-lam(1-phi)}) delta_r2 + e^{-lam(1-phi)} delta_s``.

    ``phi`` is a scalar or one value per row of the deltas.
    """
    delta_s, delta_r2 = T.as_tensor(delta_s), T.as_tensor(delta_r2)
    if delta_s.shape != delta_r2.shape:
        raise DimensionError(f"branch outputs differ: {delta_s.shape} vs {delta_r2.shape}")
    w_r, w_s = fusion_weights(phi, lam)
    if w_s.ndim:
        w_s = w_s.reshape(w_s.shape + (1,) * (delta_s.ndim - w_s.ndim))
        w_r = w_r.reshape(w_s.shape)
    return delta_r2 * w_r.astype(delta_s.dtype) + delta_s * w_s.astype(delta_s.dtype)


# ---------------------------------------------------------------------------
# full module
# ---------------------------------------------------------------------------

class SR2FAParams(Block):
    def __init__(self, c_low: int, c_dec: int, c_feat: int, num_classes: int, rng: np.random.Generator,
                 hidden: int = 16, lam: float = 1.0, window: int = 7, k: int = 8):
        if lam < 0:
            raise ConfigError("lambda must be non-negative")
        self.lam = lam
        self.window = window
        self.k = k
        self.fuse = L.conv_params(c_low + c_dec, c_feat, 1, rng)
        self.branch_s = BranchParams(num_classes, hidden, rng)
        self.branch_r2 = BranchParams(R2_DIMS, hidden, rng)
        self.delta_scale = L.scale_params(c_feat)     # per-channel gain on the aggregated residual
        self.post_conv = L.conv_params(c_feat, c_feat, 3, rng)
        self.post_bn = L.batchnorm_params(c_feat)


def fuse_inputs(low_feats, decoder_feats, params: SR2FAParams) -> Tensor:
    low, dec = T.as_tensor(low_feats), T.as_tensor(decoder_feats)
    if low.shape[1:] != dec.shape[1:]:
        raise DimensionError(f"low-level {low.shape} and decoder {dec.shape} maps differ spatially")
    return T.leaky_relu(L.apply_conv2d(params.fuse, T.concat([low, dec], axis=0)))


def _pixel_rows(feat: Tensor) -> Tensor:
    c, h, w = feat.shape
    return T.reshape(T.transpose(feat, (1, 2, 0)), (h * w, c))


def _pixel_map(rows_feat: Tensor, h: int, w: int) -> Tensor:
    return T.transpose(T.reshape(rows_feat, (h, w, rows_feat.shape[1])), (2, 0, 1))


def r2_distances(ri, rows, cols, nbrs: NeighborSet) -> np.ndarray:
    """|dxyz|, |drange|, |dremission|, |dRGB| of each neighbor against its target."""
    names = ["x", "y", "z", "range", "remission"]
    chans = [ri.channel(n) for n in names]
    rgb = ["r", "g", "b"]
    chans += [ri.channel(n) if n in ri.channel_names else np.zeros(ri.mask.shape) for n in rgb]
    stack = np.stack(chans, axis=-1)                       # [H, W, 8]
    d = np.abs(stack[nbrs.rows, nbrs.cols] - stack[rows, cols][:, None, :])
    return np.where(nbrs.valid[..., None], d, 0.0)


def sr2fa_forward(low_feats, decoder_feats, probs, ri, params: SR2FAParams,
                  aggregate: bool = True, cache: dict | None = None) -> Tensor:
    """Refined RV features ``[C, H, W]``.

    Masked pixels get ``post(center + g * delta)`` with a learnable
    per-channel gain ``g``; unmasked pixels keep the fused input features.  With ``aggregate=False`` delta is zero, which
    leaves only the fusion and the post block.  ``cache`` (a dict kept per
    scan) stores the range-remission neighbors, which depend on geometry only.
    """
    feat = fuse_inputs(low_feats, decoder_feats, params)
    c, h, w = feat.shape
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    if probs.shape[:2] != (h, w) or ri.mask.shape != (h, w):
        raise DimensionError(f"probs {probs.shape} / mask {ri.mask.shape} do not match features {feat.shape}")
    rows, cols = np.nonzero(ri.mask)
    lin = rows * w + cols
    pix = _pixel_rows(feat)
    if aggregate and rows.size:
        rng_ch, rem_ch = ri.range, ri.channel("remission")
        nb_s = select_neighbors_batch(rows, cols, probs, rng_ch, rem_ch, ri.mask, params.window,
                                      params.k, "semantic")
        key = ("r2", params.window, params.k)
        if cache is not None and key in cache:
            nb_r, dist_r = cache[key]
        else:
            nb_r = select_neighbors_batch(rows, cols, probs, rng_ch, rem_ch, ri.mask, params.window,
                                          params.k, "range_remission")
            dist_r = r2_distances(ri, rows, cols, nb_r)
            if cache is not None:
                cache[key] = (nb_r, dist_r)
        dist_s = np.abs(probs[nb_s.rows, nb_s.cols] - probs[rows, cols][:, None, :])
        dist_s = np.where(nb_s.valid[..., None], dist_s, 0.0)
        val_s = T.take_rows(pix, nb_s.rows * w + nb_s.cols)
        val_r = T.take_rows(pix, nb_r.rows * w + nb_r.cols)
        delta_s, _ = aggregate_branch(nb_s, dist_s.astype(feat.dtype), val_s, params.branch_s)
        delta_r, _ = aggregate_branch(nb_r, dist_r.astype(feat.dtype), val_r, params.branch_r2)
        phi = window_confidence(probs, ri.mask, rows, cols, params.window)
        delta = confidence_fuse(delta_s, delta_r, phi, params.lam) * params.delta_scale.weights[0]
        center = feat + _pixel_map(T.scatter_rows(delta, lin, h * w), h, w)
    else:
        center = feat
    proc = T.leaky_relu(L.bn(params.post_bn, L.apply_conv2d(params.post_conv, center), params))
    return T.where(ri.mask[None], proc, feat)
