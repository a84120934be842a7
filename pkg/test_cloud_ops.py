import numpy as np
import pytest

from cloud_ops import (NOISE, Calibration, Clustering, auto_eps, calibrate, classify_clusters, cluster_features,
                       compute_obb, dbscan, extract_clusters, min_area_rectangle, refine_extent,
                       remove_small_clusters, split_scene, transform_cloud, voxel_downsample)
from errors import DegenerateGeometryError, EmptyResultError, NoLabelFoundError
from geometry import PointCloud, random_rotation
from synth import gen_label


def line(x0, n, step=0.1):
    x = x0 + step * np.arange(n)
    return np.column_stack([x, np.zeros(n), np.zeros(n)])


def sphere_surface(rng, n=600, radius=1.0, center=(0.0, 0.0, 0.0)):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True) + np.asarray(center)


def grid_points(x, y, z):
    return np.stack(np.meshgrid(x, y, z, indexing='ij'), axis=-1).reshape(-1, 3)


# ==================== DBSCAN ====================

def test_auto_eps_regular_spacing():
    cloud = PointCloud(points=line(0.0, 50))
    assert auto_eps(cloud, factor=2.5) == pytest.approx(0.25)


def test_auto_eps_duplicates_are_degenerate():
    with pytest.raises(DegenerateGeometryError):
        auto_eps(PointCloud(points=np.zeros((5, 3))))


def test_dbscan_two_lines_and_outlier():
    points = np.vstack([line(0.0, 10), line(5.0, 10), [[100.0, 0.0, 0.0]]])
    clustering = dbscan(PointCloud(points=points), eps=0.15, min_pts=3)
    assert clustering.labels[:10].tolist() == [0] * 10
    assert clustering.labels[10:20].tolist() == [1] * 10
    assert clustering.labels[20] == NOISE
    assert clustering.cluster_sizes == {0: 10, 1: 10}
    assert clustering.n_noise == 1


def test_dbscan_border_point_goes_to_first_cluster():
    a = grid_points([0.0, 0.1, 0.2], [-0.1, 0.0, 0.1], [0.0])
    b = grid_points([0.4, 0.5, 0.6], [-0.1, 0.0, 0.1], [0.0])
    bridge = [[0.3, 0.0, 0.0]]
    clustering = dbscan(PointCloud(points=np.vstack([a, b, bridge])), eps=0.12, min_pts=5)
    # угловые точки решёток соседствуют только с граничными точками и остаются шумом
    assert clustering.n_clusters == 2
    assert clustering.labels[-1] == 0
    assert clustering.cluster_sizes == {0: 8, 1: 7}
    assert clustering.n_noise == 4


def dbscan_by_closure(points, eps, min_pts):
    """DBSCAN через полную матрицу расстояний и транзитивное замыкание по ядрам."""
    n = len(points)
    near = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2) <= eps
    core = near.sum(axis=1) >= min_pts
    labels = np.full(n, NOISE)
    next_id = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        stack = [seed]
        labels[seed] = next_id
        while stack:
            p = stack.pop()
            for q in np.flatnonzero(near[p] & core):
                if labels[q] == NOISE:
                    labels[q] = next_id
                    stack.append(q)
        next_id += 1
    # граничная точка - кластеру с наименьшим номером среди соседних ядер
    for i in np.flatnonzero(~core):
        adjacent = labels[near[i] & core]
        if len(adjacent):
            labels[i] = adjacent.min()
    return labels


@pytest.mark.parametrize('seed', range(50))
def test_dbscan_matches_closure_oracle(seed):
    rng = np.random.default_rng(seed)
    n_blobs = int(rng.integers(1, 5))
    centers = rng.uniform(0.0, 4.0, size=(n_blobs, 3))
    n = int(rng.integers(20, 201))
    points = centers[rng.integers(0, n_blobs, n)] + rng.normal(0.0, 0.3, size=(n, 3))
    eps = float(rng.uniform(0.2, 0.6))
    min_pts = int(rng.integers(2, 8))
    clustering = dbscan(PointCloud(points=points), eps=eps, min_pts=min_pts)
    np.testing.assert_array_equal(clustering.labels, dbscan_by_closure(points, eps, min_pts))


def test_dbscan_is_scale_invariant(rng):
    points = np.vstack([rng.normal(0.0, 0.2, (80, 3)), rng.normal(3.0, 0.2, (80, 3)), rng.uniform(-2, 5, (15, 3))])
    base = dbscan(PointCloud(points=points), eps=0.3, min_pts=5)
    for s in (0.01, 7.0):
        scaled = dbscan(PointCloud(points=points * s), eps=0.3 * s, min_pts=5)
        np.testing.assert_array_equal(scaled.labels, base.labels)


def test_dbscan_rejects_bad_parameters():
    cloud = PointCloud(points=line(0.0, 5))
    with pytest.raises(ValueError):
        dbscan(cloud, eps=0.0, min_pts=3)
    with pytest.raises(ValueError):
        dbscan(cloud, eps=0.1, min_pts=0)


def test_remove_small_clusters_compacts_ids():
    labels = np.array([0, 0, 1, 2, 2, 2, -1])
    cloud = PointCloud(points=np.arange(21, dtype=float).reshape(7, 3))
    filtered, clustering = remove_small_clusters(Clustering.from_labels(labels), cloud, min_size=2)
    assert len(filtered) == 5
    assert clustering.labels.tolist() == [0, 0, 1, 1, 1]
    assert clustering.cluster_sizes == {0: 2, 1: 3}
    parts = extract_clusters(filtered, clustering)
    assert [len(p) for p in parts] == [2, 3]


def test_remove_small_clusters_all_dropped():
    clustering = Clustering.from_labels(np.array([0, 1, -1]))
    with pytest.raises(EmptyResultError):
        remove_small_clusters(clustering, PointCloud(points=np.zeros((3, 3))), min_size=5)


# ==================== Классификация ====================

def test_cluster_features_plane_vs_sphere(plane_cloud, rng):
    sigma, kappa = cluster_features(plane_cloud)
    assert sigma == pytest.approx(0.0, abs=1e-12)
    assert kappa == pytest.approx(1.0)
    sigma, kappa = cluster_features(PointCloud(points=sphere_surface(rng)))
    assert sigma == pytest.approx(1 / 3, abs=0.05)
    assert kappa < 0.7


def test_cluster_features_tiny_cluster():
    sigma, kappa = cluster_features(PointCloud(points=np.zeros((2, 3))))
    assert sigma == float('inf') and kappa == 0.0


def test_classify_clusters_picks_flat_label(plane_cloud, rng):
    blob = PointCloud(points=sphere_surface(rng, n=800, center=(5.0, 0.0, 0.0)))
    semantic = classify_clusters([blob, plane_cloud])
    assert semantic.label is plane_cloud
    assert semantic.panicle is blob
    assert (semantic.panicle_index, semantic.label_index) == (0, 1)
    assert not semantic.low_confidence
    assert semantic.residue == []


def test_classify_clusters_extra_cluster_goes_to_residue(plane_cloud, rng):
    blob = PointCloud(points=sphere_surface(rng, n=800, center=(5.0, 0.0, 0.0)))
    small = PointCloud(points=sphere_surface(rng, n=100, radius=0.2, center=(-5.0, 0.0, 0.0)))
    semantic = classify_clusters([small, plane_cloud, blob])
    assert semantic.panicle is blob
    assert semantic.residue == [small]


def test_classify_clusters_without_flat_cluster(rng):
    a = PointCloud(points=sphere_surface(rng, n=300))
    b = PointCloud(points=sphere_surface(rng, n=300, center=(5.0, 0.0, 0.0)))
    with pytest.raises(NoLabelFoundError):
        classify_clusters([a, b])


def test_classify_clusters_two_planes_low_confidence(plane_cloud, rng):
    xy = rng.uniform(0.0, 2.0, size=(900, 2))
    big_plane = PointCloud(points=np.column_stack([xy, np.full(len(xy), 3.0)]))
    semantic = classify_clusters([plane_cloud, big_plane])
    assert semantic.low_confidence
    assert {semantic.panicle_index, semantic.label_index} == {0, 1}


def test_classify_clusters_needs_two():
    with pytest.raises(ValueError):
        classify_clusters([PointCloud(points=line(0.0, 5))])


# ==================== OBB и калибровка ====================

def test_compute_obb_axis_aligned_grid():
    points = grid_points(np.linspace(-2, 2, 9), np.linspace(-1, 1, 5), np.linspace(-0.5, 0.5, 3)) + [1.0, 2.0, 3.0]
    obb = compute_obb(PointCloud(points=points))
    np.testing.assert_allclose(obb.half_extents, [2.0, 1.0, 0.5], atol=1e-9)
    np.testing.assert_allclose(obb.center, [1.0, 2.0, 3.0], atol=1e-9)
    np.testing.assert_allclose(np.abs(obb.axes), np.eye(3), atol=1e-9)
    assert np.linalg.det(obb.axes) == pytest.approx(1.0)


def test_compute_obb_collinear():
    with pytest.raises(DegenerateGeometryError):
        compute_obb(PointCloud(points=line(0.0, 10)))


def test_min_area_rectangle_rotated(rng):
    angle = np.radians(30.0)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    corners = np.array([[-2.0, -0.5], [2.0, -0.5], [2.0, 0.5], [-2.0, 0.5]])
    inner = rng.uniform([-2.0, -0.5], [2.0, 0.5], size=(200, 2))
    long_side, short_side, direction = min_area_rectangle(np.vstack([corners, inner]) @ rot.T)
    assert long_side == pytest.approx(4.0)
    assert short_side == pytest.approx(1.0)
    assert abs(direction @ [np.cos(angle), np.sin(angle)]) == pytest.approx(1.0)


def test_min_area_rectangle_segment():
    points = np.column_stack([np.linspace(0.0, 3.0, 10), np.linspace(0.0, 4.0, 10)])
    long_side, short_side, _ = min_area_rectangle(points)
    assert long_side == pytest.approx(5.0)
    assert short_side == 0.0


def test_refine_extent_without_noise():
    s = np.linspace(0.0, 10.0, 2001)
    assert refine_extent(s) == pytest.approx(10.0, rel=2e-3)


def test_refine_extent_removes_noise_tails(rng):
    s = rng.uniform(0.0, 10.0, 5000) + rng.normal(0.0, 0.1, 5000)
    assert s.max() - s.min() > 10.2
    assert refine_extent(s) == pytest.approx(10.0, abs=0.15)


def test_compute_obb_rotated_plate(rng):
    plate = grid_points(np.linspace(-3.75, 3.75, 16), np.linspace(-1.5, 1.5, 7), np.linspace(-0.1, 0.1, 3))
    moved = transform_cloud(PointCloud(points=plate), random_rotation(rng), [4.0, -1.0, 2.0])
    np.testing.assert_allclose(compute_obb(moved).half_extents, [3.75, 1.5, 0.1], atol=1e-6)


def test_calibrate_clean_label():
    calib = calibrate(gen_label(seed=3), real_length_cm=7.5, refine_edges=False)
    assert calib.x1 == pytest.approx(7.5, rel=1e-4)
    assert calib.scale_cm_per_unit == pytest.approx(1.0, rel=1e-4)
    assert calib.half_extents[0] == pytest.approx(3.75, rel=0.02)
    assert calib.half_extents[2] < 0.1


def test_calibrate_exact_small_plate():
    plate = grid_points(np.linspace(-0.15, 0.15, 31), np.linspace(-0.06, 0.06, 13), np.linspace(-0.004, 0.004, 3))
    calib = calibrate(PointCloud(points=plate), refine_edges=False)
    assert calib.x1 == pytest.approx(0.3, rel=1e-9)
    assert calib.scale_cm_per_unit == pytest.approx(25.0, rel=1e-9)


def test_calibrate_is_pose_and_scale_invariant(rng):
    label = gen_label(seed=5)
    reference = calibrate(label).x1
    moved = transform_cloud(label, random_rotation(rng), [10.0, -3.0, 7.0], scale=0.1)
    assert calibrate(moved).x1 == pytest.approx(0.1 * reference, rel=1e-4)


def test_calibrate_noisy_label_close_to_truth():
    label = gen_label(density=100.0, noise=0.015, rotation=random_rotation(np.random.default_rng(2)),
                      translation=[1.0, 2.0, 3.0], seed=11)
    calib = calibrate(label, refine_edges=True)
    assert calib.x1 == pytest.approx(7.5, rel=0.005)


def test_calibration_dict_roundtrip_and_validation():
    calib = Calibration(x1=2.5, real_length_cm=7.5, raw_x1=2.6, half_extents=(1.3, 0.5, 0.02))
    restored = Calibration.from_dict(calib.to_dict())
    assert restored.x1 == 2.5
    assert restored.half_extents == (1.3, 0.5, 0.02)
    assert calib.to_dict()['scale_cm_per_unit'] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        Calibration(x1=0.0)


# ==================== Преобразования и сцена ====================

def test_voxel_downsample_centroids():
    points = np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [1.5, 0.5, 0.5]])
    down = voxel_downsample(PointCloud(points=points), leaf=1.0)
    assert len(down) == 2
    centroids = sorted(map(tuple, np.round(down.points, 9)))
    assert centroids == [(0.2, 0.2, 0.2), (1.5, 0.5, 0.5)]
    with pytest.raises(ValueError):
        voxel_downsample(PointCloud(points=points), leaf=0.0)


def test_transform_cloud_rotates_normals():
    rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    cloud = PointCloud(points=[[1.0, 0.0, 0.0]], normals=[[1.0, 0.0, 0.0]])
    moved = transform_cloud(cloud, rotation, [0.0, 0.0, 1.0], scale=2.0)
    np.testing.assert_allclose(moved.points, [[0.0, 2.0, 1.0]], atol=1e-12)
    np.testing.assert_allclose(moved.normals, [[0.0, 1.0, 0.0]], atol=1e-12)


def test_split_scene_label_and_blob(rng):
    label = gen_label(density=40.0, seed=2)
    blob = PointCloud(points=sphere_surface(rng, n=3000, radius=3.0, center=(0.0, 0.0, 15.0)))
    outlier = PointCloud(points=[[100.0, 100.0, 100.0]])
    split = split_scene(PointCloud.concat([blob, label, outlier]))
    assert len(split.semantic.label) == len(label)
    assert len(split.semantic.panicle) == len(blob)
    report = split.report()
    assert report['n_clusters'] == 2
    assert report['label_points'] == len(label)
    assert not report['low_confidence']
