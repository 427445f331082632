import math

import numpy as np
import pytest

from lacrange.dataset_io import PointCloud, SceneSpec, gen_synthetic_scene
from lacrange.dataset_io.types import CameraModel
from lacrange.errors import ConfigError, InvalidInputError
from lacrange.rv_projection import (
    RVConfig,
    back_project,
    build_rv_rgb,
    knn_post_process,
    load_range_image,
    paint_points,
    save_range_image,
    spherical_project,
)

CFG = RVConfig(16, 64)


def cloud_of(xyz, rem=None):
    xyz = np.asarray(xyz, dtype=float)
    return PointCloud(xyz, np.full(len(xyz), 0.5) if rem is None else rem)


def test_forward_point_lands_mid_column():
    ri = spherical_project(cloud_of([[1.0, 0.0, 0.0]]), CFG)
    assert ri.proj_col[0] == CFG.width // 2


def test_collision_keeps_nearest():
    ri = spherical_project(cloud_of([[5.0, 0, 0], [2.0, 0, 0]]), CFG)
    r, c = ri.proj_row[1], ri.proj_col[1]
    assert (ri.proj_row[0], ri.proj_col[0]) == (r, c)
    assert ri.index_map[r, c] == 1 and ri.range[r, c] == 2.0
    assert ri.mask.sum() == 1


def test_collision_tie_goes_to_lower_index():
    ri = spherical_project(cloud_of([[2.0, 0, 0], [2.0, 0, 0]]), CFG)
    assert ri.index_map[ri.proj_row[0], ri.proj_col[0]] == 0


def test_pixel_coords_match_scalar_formulas():
    rng = np.random.default_rng(0)
    xyz = rng.normal(scale=10, size=(1000, 3))
    ri = spherical_project(cloud_of(xyz), CFG)
    fov = CFG.fov_up - CFG.fov_down
    for i, (x, y, z) in enumerate(xyz):
        r = math.sqrt(x * x + y * y + z * z)
        u = CFG.width * (0.5 * (1 - math.atan2(y, x) / math.pi))
        v = CFG.height * (1 - (math.asin(z / r) - CFG.fov_down) / fov)
        col = math.floor(min(max(u, 0), CFG.width - 1))
        row = math.floor(min(max(v, 0), CFG.height - 1))
        assert (ri.proj_row[i], ri.proj_col[i]) == (row, col)


def test_range_image_invariants():
    s = gen_synthetic_scene(SceneSpec(seed=2, beams=16, azimuth_steps=256, image_width=64, image_height=24))
    ri = spherical_project(s.cloud, CFG)
    assert np.array_equal(ri.mask, ri.index_map >= 0)
    xyz = ri.channels[:3]
    assert np.max(np.abs(np.linalg.norm(xyz, axis=0)[ri.mask] - ri.range[ri.mask])) < 1e-6
    assert np.all((ri.proj_row >= 0) & (ri.proj_row < CFG.height))
    assert np.all((ri.proj_col >= 0) & (ri.proj_col < CFG.width))
    # every survivor is the nearest among points sharing its pixel
    lin = ri.proj_row * CFG.width + ri.proj_col
    for p in np.unique(lin)[:200]:
        members = np.nonzero(lin == p)[0]
        best = members[np.argmin(ri.point_range[members])]
        assert ri.index_map.ravel()[p] == best


def test_origin_points_dropped_and_empty_cloud():
    ri = spherical_project(cloud_of([[0.0, 0, 0], [3.0, 1, 0]]), CFG)
    assert ri.n_dropped == 1 and ri.mask.sum() == 1
    with pytest.raises(InvalidInputError):
        spherical_project(cloud_of(np.zeros((0, 3))), CFG)


def test_paint_points_cases():
    k = np.array([[10.0, 0, 2], [0, 10, 1], [0, 0, 1]])
    ext = np.eye(4)
    ext[:3, :3] = [[0, -1, 0], [0, 0, -1], [1, 0, 0]]
    cam = CameraModel(k, ext, 5, 3)
    img = np.arange(45, dtype=float).reshape(3, 5, 3) / 45.0
    # (x=10,y=0,z=0) -> camera (0,0,10) -> pixel centre (2,1); behind camera x<0
    c = paint_points(cloud_of([[10.0, 0, 0], [-10.0, 0, 0], [10.0, 0.5, 0.0]]), img, cam)
    assert c.color_mask.tolist() == [True, False, True]
    assert np.array_equal(c.rgb[0], img[1, 2])
    # y=0.5 gives u=1.5 exactly, which rounds half up to column 2
    assert np.array_equal(c.rgb[2], img[1, 2])
    assert not np.any(c.rgb[1])


def test_paint_points_frustum_oracle():
    s = gen_synthetic_scene(SceneSpec(seed=5, beams=16, azimuth_steps=256, image_width=64, image_height=24))
    cam = s.camera
    expected = 0
    for p in s.cloud.xyz:
        cam_p = cam.extrinsics[:3, :3] @ p + cam.extrinsics[:3, 3]
        if cam_p[2] <= 0:
            continue
        u = cam.intrinsics[0, 0] * cam_p[0] / cam_p[2] + cam.intrinsics[0, 2]
        v = cam.intrinsics[1, 1] * cam_p[1] / cam_p[2] + cam.intrinsics[1, 2]
        if 0 <= math.floor(u + 0.5) < cam.width and 0 <= math.floor(v + 0.5) < cam.height:
            expected += 1
    painted = paint_points(s.cloud, s.image, cam)
    assert painted.color_mask.sum() == expected


def test_build_rv_rgb_masks():
    s = gen_synthetic_scene(SceneSpec(seed=6, beams=16, azimuth_steps=256, image_width=64, image_height=24))
    none = s.cloud.with_(color_mask=np.zeros(len(s.cloud), bool), rgb=np.zeros((len(s.cloud), 3)))
    assert not build_rv_rgb(none, CFG).rgb_mask.any()
    allc = s.cloud.with_(color_mask=np.ones(len(s.cloud), bool), rgb=np.ones((len(s.cloud), 3)))
    ri = build_rv_rgb(allc, CFG)
    assert np.array_equal(ri.rgb_mask, ri.mask)
    ri = build_rv_rgb(s.cloud, CFG)
    rgb = np.stack([ri.channel(c) for c in "rgb"])
    for r, c in zip(*np.nonzero(ri.rgb_mask)):
        surv = ri.index_map[r, c]
        assert s.cloud.color_mask[surv]
        assert np.array_equal(rgb[:, r, c], s.cloud.rgb[surv])
    assert not np.any(rgb[:, ~ri.rgb_mask])


def test_back_project():
    s = gen_synthetic_scene(SceneSpec(seed=7, beams=16, azimuth_steps=256, image_width=64, image_height=24))
    ri = spherical_project(s.cloud, CFG)
    assert np.all(back_project(np.full(ri.mask.shape, 3), ri) == 3)
    gt = np.zeros(ri.mask.shape, dtype=int)
    gt[ri.mask] = s.cloud.label[ri.index_map[ri.mask]]
    surv = ri.survivors
    assert np.array_equal(back_project(gt, ri)[surv], s.cloud.label[surv])


def test_back_project_occlusion_failure_mode():
    # a near class-1 point hides a class-2 point in the same pixel
    cloud = PointCloud(np.array([[3.0, 0, 0], [9.0, 0, 0]]), np.array([0.5, 0.5]), label=np.array([1, 2]))
    ri = spherical_project(cloud, CFG)
    gt = np.zeros(ri.mask.shape, dtype=int)
    gt[ri.mask] = cloud.label[ri.index_map[ri.mask]]
    assert back_project(gt, ri).tolist() == [1, 1]


# ---------------------------------------------------------------- kNN post-processing

def knn_brute(ri, probs, k, window, cutoff, sigma):
    h, w = ri.mask.shape
    half = window // 2
    lab = probs.argmax(axis=2)
    gauss = {}
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            gauss[(dy, dx)] = math.exp(-(dy * dy + dx * dx) / (2 * sigma * sigma))
    total = sum(gauss.values())
    out = []
    for i in range(len(ri.proj_row)):
        r0, c0 = ri.proj_row[i], ri.proj_col[i]
        cands = []
        order = 0
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                r, c = r0 + dy, c0 + dx
                if 0 <= r < h and 0 <= c < w and ri.mask[r, c]:
                    d = abs(ri.range[r, c] - ri.point_range[i]) * (1 - gauss[(dy, dx)] / total)
                    cands.append((d, order, lab[r, c]))
                order += 1
        cands.sort()
        votes = {}
        for d, _, l in cands[:k]:
            if d <= cutoff:
                votes[l] = votes.get(l, 0) + 1
        if votes:
            best = max(votes.values())
            out.append(min(l for l, v in votes.items() if v == best))
        else:
            out.append(lab[r0, c0])
    return np.array(out)


def random_instance(rng, h=6, w=9, n=40, c=4):
    cfg = RVConfig(h, w)
    xyz = rng.normal(size=(n, 3)) * [8, 8, 1]
    xyz[:, 2] -= 1.5
    cloud = cloud_of(xyz, rng.uniform(size=n))
    ri = spherical_project(cloud, cfg)
    probs = rng.dirichlet(np.ones(c), size=(h, w))
    return ri, cloud, probs


def test_knn_uniform_and_k1():
    rng = np.random.default_rng(9)
    ri, cloud, probs = random_instance(rng)
    flat = np.zeros_like(probs)
    flat[..., 2] = 1
    assert np.all(knn_post_process(ri, cloud, flat) == 2)
    got = knn_post_process(ri, cloud, probs, k=1, cutoff_m=1e9)
    assert np.array_equal(got, knn_brute(ri, probs, 1, 5, 1e9, 1.0))


def test_knn_matches_brute_force_200():
    rng = np.random.default_rng(10)
    for trial in range(200):
        ri, cloud, probs = random_instance(rng, n=int(rng.integers(5, 60)))
        k = int(rng.integers(1, 8))
        window = int(rng.choice([3, 5]))
        cutoff = float(rng.uniform(0.2, 3.0))
        got = knn_post_process(ri, cloud, probs, k=k, window=window, cutoff_m=cutoff)
        assert np.array_equal(got, knn_brute(ri, probs, k, window, cutoff, 1.0)), trial


def test_knn_never_emits_label_outside_window():
    rng = np.random.default_rng(11)
    for _ in range(30):
        ri, cloud, probs = random_instance(rng)
        lab = probs.argmax(axis=2)
        out = knn_post_process(ri, cloud, probs)
        for i, l in enumerate(out):
            r, c = ri.proj_row[i], ri.proj_col[i]
            win = lab[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3][ri.mask[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3]]
            assert l in win


def test_knn_config_errors():
    ri, cloud, probs = random_instance(np.random.default_rng(0))
    with pytest.raises(ConfigError):
        knn_post_process(ri, cloud, probs, window=4)
    with pytest.raises(ConfigError):
        knn_post_process(ri, cloud, probs, k=26, window=5)


def test_azimuth_shift_covariance():
    rng = np.random.default_rng(12)
    cfg = RVConfig(16, 128)
    xyz = rng.normal(size=(300, 3)) * [10, 10, 1]
    xyz[:, 2] = np.clip(xyz[:, 2], -3, 0.3)
    ri = spherical_project(cloud_of(xyz), cfg)
    a = 2 * math.pi / cfg.width
    rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    ri2 = spherical_project(cloud_of(xyz @ rot.T), cfg)
    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    u = cfg.width * 0.5 * (1 - yaw / np.pi)
    frac = u - np.floor(u)
    safe = (frac > 1e-6) & (frac < 1 - 1e-6) & (u > 1) & (u < cfg.width - 1)
    assert np.array_equal(ri2.proj_row[safe], ri.proj_row[safe])
    assert np.array_equal(ri2.proj_col[safe], (ri.proj_col[safe] - 1) % cfg.width)


def test_rvi1_round_trip(tmp_path):
    s = gen_synthetic_scene(SceneSpec(seed=8, beams=16, azimuth_steps=256, image_width=64, image_height=24))
    ri = build_rv_rgb(s.cloud, CFG)
    logits = np.random.default_rng(0).normal(size=(3,) + ri.mask.shape)
    save_range_image(tmp_path / "r.rvi", ri, {"logit": logits})
    assert (tmp_path / "r.rvi").read_bytes()[:4] == b"RVI1"
    back, extra = load_range_image(tmp_path / "r.rvi")
    assert np.array_equal(back.mask, ri.mask) and np.array_equal(back.rgb_mask, ri.rgb_mask)
    assert np.array_equal(back.index_map, ri.index_map)
    assert np.array_equal(back.proj_row, ri.proj_row) and np.array_equal(back.proj_col, ri.proj_col)
    assert np.allclose(back.channels, ri.channels.astype(np.float32))
    assert sorted(extra) == ["logit0", "logit1", "logit2"]
    assert np.allclose(extra["logit1"], logits[1].astype(np.float32))
