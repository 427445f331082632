"""Window-restricted neighbor selection on the range image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lacrange.errors import ConfigError, ContractError
from lacrange.rv_projection import gather_window

METRICS = ("semantic", "range_remission")


@dataclass
class NeighborSet:
    """Selected neighbor pixels per target, padded to ``k`` columns.

    ``rows``/``cols`` are ``[N, k]``; ``valid`` marks real entries.  Valid
    entries come first in each row, in ascending metric order.
    """

    rows: np.ndarray
    cols: np.ndarray
    valid: np.ndarray
    metric: str

    def __len__(self):
        return self.rows.shape[0]

    def count(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def pixels(self, i: int) -> list:
        """Neighbor (row, col) pairs of target ``i`` in selection order."""
        v = self.valid[i]
        return list(zip(self.rows[i, v].tolist(), self.cols[i, v].tolist()))


def _check_window(window: int, k: int):
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd and positive, got {window}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")


def _smallest_k(dist: np.ndarray, cr, cc, ok, k: int) -> tuple:
    dist = np.where(ok, dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]   # stable: row-major ties
    take = np.take_along_axis
    valid = take(ok, order, axis=1)
    return take(cr, order, axis=1), take(cc, order, axis=1), valid


def select_neighbors_batch(rows, cols, probs, range_ch, remission_ch, mask, window: int = 7,
                           k: int = 8, metric: str = "semantic") -> NeighborSet:
    """Vectorised :func:`select_neighbors` for many target pixels at once.

    Candidates are masked pixels of the window other than the target.
    ``semantic`` ranks by the L1 distance of probability vectors,
    ``range_remission`` by ``|d range| + |d remission|``.
    """
    _check_window(window, k)
    if metric not in METRICS:
        raise ConfigError(f"unknown neighbor metric {metric!r}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and not np.all(mask[rows, cols]):
        raise ContractError("neighbor selection needs masked target pixels")
    cr, cc, ok = gather_window(rows, cols, mask, window)
    ok[:, (window * window) // 2] = False
    if metric == "semantic":
        dist = np.abs(probs[cr, cc, :] - probs[rows, cols, :][:, None, :]).sum(axis=-1)
    else:
        dist = (np.abs(range_ch[cr, cc] - range_ch[rows, cols][:, None])
                + np.abs(remission_ch[cr, cc] - remission_ch[rows, cols][:, None]))
    nr, nc, valid = _smallest_k(dist, cr, cc, ok, min(k, window * window))
    return NeighborSet(nr, nc, valid, metric)


def select_neighbors(target, probs, range_ch, remission_ch, mask, window: int = 7, k: int = 8,
                     metric: str = "semantic") -> NeighborSet:
    """Up to ``k`` window neighbors of one target pixel under ``metric``."""
    r, c = target
    if not mask[r, c]:
        raise ContractError(f"target pixel {(r, c)} is not masked")
    return select_neighbors_batch(np.array([r]), np.array([c]), probs, range_ch, remission_ch,
                                  mask, window, k, metric)


def range_knn_batch(ri, K: int = 7, window: int = 7, point_idx=None) -> NeighborSet:
    """For each point, the ``K`` masked window pixels closest in range to the point.

    The point's own pixel is a candidate, so a surviving point ranks its own
    pixel first (zero range difference) unless an earlier pixel ties exactly.
    """
    _check_window(window, K)
    idx = np.arange(len(ri.proj_row)) if point_idx is None else np.asarray(point_idx, dtype=np.int64)
    rows, cols = ri.proj_row[idx], ri.proj_col[idx]
    cr, cc, ok = gather_window(rows, cols, ri.mask, window)
    dist = np.abs(ri.range[cr, cc] - ri.point_range[idx][:, None])
    nr, nc, valid = _smallest_k(dist, cr, cc, ok, min(K, window * window))
    return NeighborSet(nr, nc, valid, "range")


def range_knn(point_idx: int, ri, K: int = 7, window: int = 7) -> list:
    """Neighbor pixels (row, col) of a single point, nearest range first."""
    return range_knn_batch(ri, K, window, np.array([point_idx])).pixels(0)
