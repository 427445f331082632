from lacrange.point_refine.neighbors import (
    NeighborSet,
    range_knn,
    range_knn_batch,
    select_neighbors,
    select_neighbors_batch,
)
from lacrange.point_refine.sr2fa import (
    BranchParams,
    SR2FAParams,
    aggregate_branch,
    confidence_fuse,
    fusion_weights,
    mean_confidence,
    pfe_apply,
    pixel_confidence,
    sr2fa_forward,
    window_confidence,
)
from lacrange.point_refine.nafa import (
    COARSE,
    FINE,
    CylGrid,
    NAFAParams,
    VoxelMLPs,
    cylindrical_voxelize,
    nafa_forward,
    nafa_logits,
    voxel_scatter_gather,
)
from lacrange.point_refine.head import (
    RefineConfig,
    RefineParams,
    logits_to_probs,
    passthrough_init,
    refine_point_logits,
    refine_points,
)

__all__ = [
    "BranchParams", "COARSE", "CylGrid", "FINE", "NAFAParams", "NeighborSet", "RefineConfig",
    "RefineParams", "SR2FAParams", "VoxelMLPs", "aggregate_branch", "confidence_fuse",
    "cylindrical_voxelize", "fusion_weights", "logits_to_probs", "mean_confidence", "nafa_forward",
    "nafa_logits", "passthrough_init", "pfe_apply", "pixel_confidence", "range_knn",
    "range_knn_batch", "refine_point_logits", "refine_points", "select_neighbors",
    "select_neighbors_batch", "sr2fa_forward", "voxel_scatter_gather", "window_confidence",
]
