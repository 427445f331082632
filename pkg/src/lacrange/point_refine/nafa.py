"""3D neighborhood-aware feature augmentation with coarse-to-fine cylindrical voxels.

Every point gathers its K range-nearest RV pixels, encodes (RV feature,
probabilities, relative xyz) per neighbor with a point feature encoder, then
enriches those per-(point, neighbor) rows with voxel context: rows are
mean-pooled per cylindrical voxel of their target point, passed through two
MLPs, broadcast back, added to the rows and passed through one more MLP.
This runs on a coarse grid and then on a fine grid; the rows are finally
averaged over the K neighbors and classified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from lacrange.autodiff import layers as L
from lacrange.autodiff import tensor as T
from lacrange.autodiff.layers import Block
from lacrange.autodiff.tensor import Tensor
from lacrange.errors import ConfigError, DimensionError, InvalidInputError
from lacrange.point_refine.neighbors import range_knn_batch
from lacrange.point_refine.sr2fa import pfe_apply


@dataclass(frozen=True)
class CylGrid:
    """Uniform bins over radius, azimuth [-pi, pi) and height."""

    bins: tuple = (30, 3, 2)
    rho_max: float = 60.0
    z_min: float = -4.0
    z_max: float = 4.0

    def __post_init__(self):
        if len(self.bins) != 3 or min(self.bins) < 1:
            raise ConfigError(f"grid needs three bin counts >= 1, got {self.bins}")
        vals = (self.rho_max, self.z_min, self.z_max)
        if not all(math.isfinite(v) for v in vals) or self.rho_max <= 0 or self.z_max <= self.z_min:
            raise ConfigError("grid bounds must be finite with positive extent")

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.bins))


COARSE = CylGrid((30, 3, 2))
FINE = CylGrid((60, 6, 4))


def _bin(v: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    return np.clip(np.floor((v - lo) / (hi - lo) * n), 0, n - 1).astype(np.int64)


def cylindrical_voxelize(points: np.ndarray, grid: CylGrid) -> np.ndarray:
    """Linearised (radial, azimuthal, height) voxel id per point; out-of-range values clamp."""
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])
    nr, na, nz = grid.bins
    ir = _bin(rho, 0.0, grid.rho_max, nr)
    ia = _bin(theta, -math.pi, math.pi, na)
    iz = _bin(xyz[:, 2], grid.z_min, grid.z_max, nz)
    return (ir * na + ia) * nz + iz


class VoxelMLPs(Block):
    """Two MLPs on voxel means and one on the skip sum."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.mlp_a = L.mlp_params(dim, dim, rng)
        self.mlp_b = L.mlp_params(dim, dim, rng)
        self.mlp_out = L.mlp_params(dim, dim, rng)


def voxel_mean_matrix(voxel_ids: np.ndarray, valid: np.ndarray | None = None):
    """Sparse averaging matrix (voxels x rows) and each row's voxel slot.

    Rows flagged invalid contribute to no voxel mean.
    """
    ids = np.asarray(voxel_ids, dtype=np.int64)
    uniq, inv = np.unique(ids, return_inverse=True)
    inv = inv.reshape(-1)
    w = np.ones(ids.size) if valid is None else np.asarray(valid, dtype=np.float64).reshape(-1)
    counts = np.bincount(inv, weights=w, minlength=uniq.size)
    vals = w / np.maximum(counts[inv], 1.0)
    m = sp.csr_matrix((vals, (inv, np.arange(ids.size))), shape=(uniq.size, ids.size))
    return m, inv


def voxel_scatter_gather(point_feats, voxel_ids: np.ndarray, params: VoxelMLPs,
                         valid: np.ndarray | None = None) -> Tensor:
    """``MLP(f + broadcast(MLP(MLP(voxel_mean(f)))))`` for rows ``f`` of ``[M, D]``."""
    f = T.as_tensor(point_feats)
    if f.ndim != 2 or f.shape[0] != np.asarray(voxel_ids).size:
        raise DimensionError(f"features {f.shape} do not match {np.asarray(voxel_ids).size} voxel ids")
    m, inv = voxel_mean_matrix(voxel_ids, valid)
    if f.dtype != np.float64:
        m = m.astype(f.dtype)
    pooled = T.sparse_left_matmul(m, f)
    ctx = L.apply_mlp(params.mlp_b, L.apply_mlp(params.mlp_a, pooled))
    return L.apply_mlp(params.mlp_out, f + T.take_rows(ctx, inv))


class NAFAParams(Block):
    def __init__(self, c_feat: int, num_classes: int, rng: np.random.Generator, hidden: int = 16,
                 K: int = 7, window: int = 7, grids: tuple = (COARSE, FINE)):
        if K < 1:
            raise ConfigError("K must be >= 1")
        self.K = K
        self.window = window
        self.grids = tuple(grids)
        self.num_classes = num_classes
        self.pfe = L.mlp_params(c_feat + num_classes + 3, hidden, rng)
        self.scales = [VoxelMLPs(3 * hidden, rng) for _ in self.grids]
        self.cls1 = L.mlp_params(3 * hidden, hidden, rng)
        self.cls2 = L.mlp_params(hidden, num_classes, rng, "linear")


def nafa_logits(cloud, refined_rv_feats, probs, ri, grids, params: NAFAParams,
                cache: dict | None = None) -> Tensor:
    """Per-point class logits ``[N, C]`` (pre-softmax).

    ``cache`` (a dict kept per scan) stores neighbors and voxel ids, which
    depend on geometry only.
    """
    n = len(cloud)
    if n == 0:
        raise InvalidInputError("cannot refine an empty cloud")
    feat = T.as_tensor(refined_rv_feats)
    c, h, w = feat.shape
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    if probs.shape[:2] != (h, w):
        raise DimensionError(f"probs {probs.shape} do not match features {feat.shape}")
    if len(grids) != len(params.scales):
        raise ConfigError(f"{len(grids)} grids for {len(params.scales)} voxel stages")
    key = ("nafa", params.K, params.window, tuple(grids))
    if cache is not None and key in cache:
        nb, vox_ids = cache[key]
    else:
        nb = range_knn_batch(ri, params.K, params.window)
        kk = nb.rows.shape[1]
        vox_ids = [np.repeat(cylindrical_voxelize(cloud.xyz, g), kk) for g in grids]
        if cache is not None:
            cache[key] = (nb, vox_ids)
    k = nb.rows.shape[1]
    lin = nb.rows * w + nb.cols
    pix = T.reshape(T.transpose(feat, (1, 2, 0)), (h * w, c))
    nbr_feat = T.take_rows(pix, lin)                                   # [N, k, C]
    xyz_map = np.stack([ri.channel(a) for a in "xyz"], axis=-1)
    rel = xyz_map[nb.rows, nb.cols] - cloud.xyz[:, None, :]
    extra = np.concatenate([probs[nb.rows, nb.cols], rel], axis=-1)
    extra = np.where(nb.valid[..., None], extra, 0.0).astype(feat.dtype)
    x = pfe_apply(T.concat([nbr_feat, Tensor(extra)], axis=-1), params.pfe, nb.valid)   # [N, k, 3h]
    d = x.shape[-1]
    rows = T.reshape(x, (n * k, d))
    row_valid = nb.valid.reshape(-1)
    for vox, mlps in zip(vox_ids, params.scales):
        rows = voxel_scatter_gather(rows, vox, mlps, row_valid)
    v = nb.valid.astype(feat.dtype)[..., None]
    cnt = np.maximum(nb.valid.sum(axis=1), 1).astype(feat.dtype)[:, None]
    pooled = T.sum_(T.reshape(rows, (n, k, d)) * v, axis=1) / cnt
    return L.apply_mlp(params.cls2, L.apply_mlp(params.cls1, pooled))


def nafa_forward(cloud, refined_rv_feats, probs, ri, grids, params: NAFAParams,
                 cache: dict | None = None) -> Tensor:
    """Per-point class probabilities ``[N, C]``."""
    return T.softmax(nafa_logits(cloud, refined_rv_feats, probs, ri, grids, params, cache), axis=-1)
