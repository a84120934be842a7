import networkx as nx
import numpy as np
import pytest

from cloud_ops import Calibration
from errors import ConnectivityError, EmptyResultError
from geometry import PointCloud, random_rotation
from traits import (LBCParams, MainPath, SkeletonGraph, VolumeResult, build_skeleton, count_voxels, curve_length,
                    extend_tips, farthest_point_nodes, fit_curve_length, largest_component, lbc_contract, main_path,
                    measure_length, panicle_length, panicle_volume, turning_angles)


def x_line(n=101, length=1.0):
    x = np.linspace(0.0, length, n)
    return np.column_stack([x, np.zeros(n), np.zeros(n)])


def chain_edges(indices):
    return [(min(a, b), max(a, b)) for a, b in zip(indices[:-1], indices[1:])]


@pytest.fixture
def y_skeleton():
    """Ствол z = 0..15 и боковая ветвь под прямым углом от узла z = 10."""
    stem = [[0.0, 0.0, float(z)] for z in range(16)]
    side = [[float(x), 0.0, 10.0] for x in range(1, 9)]
    edges = chain_edges(list(range(16))) + chain_edges([10] + list(range(16, 24)))
    return SkeletonGraph(nodes=stem + side, edges=edges, node_weights=np.ones(24))


# ==================== Типы ====================

def test_lbc_params_validation():
    with pytest.raises(ValueError):
        LBCParams(k_neighbors=1)
    with pytest.raises(ValueError):
        LBCParams(s_l=0.5)
    with pytest.raises(ValueError):
        LBCParams(converge_ratio=1.0)


def test_skeleton_graph_validation_and_leaves(y_skeleton):
    with pytest.raises(ValueError):
        SkeletonGraph(nodes=np.zeros((2, 3)), edges=[(1, 1)], node_weights=[1, 1])
    with pytest.raises(ValueError):
        SkeletonGraph(nodes=np.zeros((2, 3)), edges=[(0, 2)], node_weights=[1, 1])
    assert y_skeleton.leaves() == [0, 15, 23]
    assert y_skeleton.degrees()[10] == 3
    assert nx.is_tree(y_skeleton.to_networkx())


def test_main_path_and_volume_result_validation():
    with pytest.raises(ValueError):
        MainPath(node_indices=[0, 1, 0], arc_length_scene=1.0)
    with pytest.raises(ValueError):
        MainPath(node_indices=[0, 1], arc_length_scene=0.0)
    with pytest.raises(ValueError):
        VolumeResult(num_voxels=0, volume_cm3=0.0)


# ==================== Сжатие Лапласа ====================

def test_lbc_contracts_cylinder_to_axis(cylinder_cloud):
    contracted = lbc_contract(cylinder_cloud, LBCParams())
    radial = np.linalg.norm(contracted.points[:, :2], axis=1)
    assert np.percentile(radial, 95) <= 0.02
    assert len(contracted) == len(cylinder_cloud)


def test_lbc_keeps_collinear_points_on_line():
    cloud = PointCloud(points=x_line(200))
    contracted = lbc_contract(cloud, LBCParams(k_neighbors=8))
    np.testing.assert_array_equal(contracted.points[:, 1:], 0.0)
    assert contracted.bounding_diagonal() <= cloud.bounding_diagonal()


def test_lbc_stays_inside_bounding_box(cylinder_cloud):
    contracted = lbc_contract(cylinder_cloud, LBCParams(max_iters=3))
    lo, hi = cylinder_cloud.points.min(axis=0), cylinder_cloud.points.max(axis=0)
    assert np.all(contracted.points >= lo) and np.all(contracted.points <= hi)


def test_lbc_disconnected_cloud(rng):
    a = rng.normal(0.0, 0.1, size=(60, 3))
    b = rng.normal(0.0, 0.1, size=(60, 3)) + [50.0, 0.0, 0.0]
    with pytest.raises(ConnectivityError) as info:
        lbc_contract(PointCloud(points=np.vstack([a, b])), LBCParams(k_neighbors=8))
    assert info.value.n_components == 2


def test_lbc_too_few_points():
    with pytest.raises(ValueError):
        lbc_contract(PointCloud(points=x_line(10)), LBCParams(k_neighbors=16))


def test_largest_component_drops_small_part(rng):
    big = rng.normal(0.0, 0.1, size=(100, 3))
    small = rng.normal(0.0, 0.1, size=(30, 3)) + [50.0, 0.0, 0.0]
    kept, dropped = largest_component(PointCloud(points=np.vstack([big, small])), k=8)
    assert len(kept) == 100
    assert dropped == 30


# ==================== Скелет ====================

def test_farthest_point_nodes_on_line():
    nodes = farthest_point_nodes(x_line(101), spacing=0.3)
    assert nodes.tolist() == [0, 100, 50]


def test_build_skeleton_of_line_is_chain():
    skel = build_skeleton(PointCloud(points=x_line(201)), spacing=0.1)
    assert skel.n_nodes == 9
    assert len(skel.edges) == skel.n_nodes - 1
    assert sorted(skel.leaves()) == [0, 1]
    assert int(skel.node_weights.sum()) == 201
    path = main_path(skel)
    assert path.arc_length_scene == pytest.approx(1.0)
    assert not path.low_confidence


def test_build_skeleton_bridges_gaps():
    points = np.vstack([x_line(50, 1.0), x_line(50, 1.0) + [3.0, 0.0, 0.0]])
    skel = build_skeleton(PointCloud(points=points), spacing=0.2)
    assert nx.is_tree(skel.to_networkx())


def test_build_skeleton_degenerate_inputs():
    with pytest.raises(EmptyResultError):
        build_skeleton(PointCloud.empty())
    single = build_skeleton(PointCloud(points=x_line(5)), spacing=0.0)
    assert single.n_nodes == 1 and single.edges == []


# ==================== Главный путь ====================

def test_turning_angles():
    straight = x_line(5)
    assert np.allclose(turning_angles(straight, 1), 0.0)
    corner = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    assert turning_angles(corner, 1)[0] == pytest.approx(90.0)


def test_main_path_skips_sharp_turns(y_skeleton):
    path = main_path(y_skeleton, theta_max_deg=60.0, tangent_scales=(1, 3))
    assert path.node_indices[0] in (0, 15) and path.node_indices[-1] in (0, 15)
    assert path.arc_length_scene == pytest.approx(15.0)
    assert not path.low_confidence


def test_fit_curve_length_along_main_path(y_skeleton):
    path = main_path(y_skeleton, theta_max_deg=60.0, tangent_scales=(1, 3))
    assert fit_curve_length(path, y_skeleton) == pytest.approx(15.0, rel=1e-9)


def test_main_path_falls_back_to_longest(y_skeleton):
    path = main_path(y_skeleton, theta_max_deg=1e-6, tangent_scales=(1,))
    # прямой путь ствола проходит и при нулевом пороге
    assert path.arc_length_scene == pytest.approx(15.0)
    l_shape = SkeletonGraph(nodes=[[0, 0, 0], [1, 0, 0], [1, 1, 0]], edges=[(0, 1), (1, 2)], node_weights=[1, 1, 1])
    fallback = main_path(l_shape, theta_max_deg=45.0)
    assert fallback.low_confidence
    assert fallback.max_turn_deg == pytest.approx(90.0)
    assert fallback.arc_length_scene == pytest.approx(2.0)


def test_main_path_requires_tree():
    cycle = SkeletonGraph(nodes=np.eye(3), edges=[(0, 1), (1, 2), (0, 2)], node_weights=[1, 1, 1])
    with pytest.raises(ValueError):
        main_path(cycle)


def test_extend_tips_reaches_cloud_ends():
    path = x_line(7)[1:-1] * 0.6 + [0.2, 0.0, 0.0]
    cloud = PointCloud(points=x_line(101))
    extended = extend_tips(path, cloud, radius=0.05)
    np.testing.assert_allclose(extended[0], [0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(extended[-1], [1.0, 0.0, 0.0], atol=1e-12)
    assert len(extended) == len(path) + 2


# ==================== Длина ====================

def test_curve_length_segment_and_duplicates():
    assert curve_length(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])) == pytest.approx(5.0)
    with_duplicates = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert curve_length(with_duplicates) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        curve_length(np.zeros((3, 3)))


@pytest.mark.parametrize('n', [3, 4, 30])
def test_curve_length_of_straight_line_is_exact(n):
    assert curve_length(x_line(n, 2.0)) == pytest.approx(2.0, rel=1e-9)


def test_curve_length_half_circle():
    phi = np.linspace(0.0, np.pi, 21)
    points = np.column_stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)])
    assert curve_length(points) == pytest.approx(np.pi, rel=0.01)


def test_panicle_length_uses_label_ratio():
    assert panicle_length(2.0, Calibration(x1=0.5, real_length_cm=7.5)) == pytest.approx(30.0)


def test_measure_length_of_thin_tube(rng):
    n = 3000
    phi = rng.uniform(0.0, 2 * np.pi, n)
    z = rng.uniform(0.0, 1.0, n)
    tube = PointCloud(points=np.column_stack([0.01 * np.cos(phi), 0.01 * np.sin(phi), z]))
    result = measure_length(tube, Calibration(x1=1.0, real_length_cm=7.5))
    assert result.L_cm == pytest.approx(7.5, rel=0.03)
    assert result.L1 == pytest.approx(result.L_cm / 7.5)
    assert not result.low_confidence


def y_tube(rng, branch_angle_deg, radius=0.015):
    """Ствол 1.5 вдоль z и боковая трубка длиной 1.0 от середины ствола."""
    def tube(start, direction, length, n):
        direction = direction / np.linalg.norm(direction)
        side = np.cross(direction, [1.0, 0.0, 0.0] if abs(direction[0]) < 0.9 else [0.0, 1.0, 0.0])
        side /= np.linalg.norm(side)
        other = np.cross(direction, side)
        t = rng.uniform(0.0, length, n)
        phi = rng.uniform(0.0, 2 * np.pi, n)
        ring = radius * (np.cos(phi)[:, None] * side + np.sin(phi)[:, None] * other)
        return start + t[:, None] * direction + ring

    angle = np.radians(branch_angle_deg)
    stem = tube(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.5, 3000)
    branch = tube(np.array([0.0, 0.0, 0.75]), np.array([np.sin(angle), 0.0, np.cos(angle)]), 1.0, 2000)
    return np.vstack([stem, branch])


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(10))
def test_measure_length_of_y_tube_follows_stem(seed):
    rng = np.random.default_rng(seed)
    local = y_tube(rng, branch_angle_deg=rng.uniform(80.0, 100.0))
    rotation, shift = random_rotation(rng), rng.uniform(-3.0, 3.0, 3)
    cloud = PointCloud(points=local @ rotation.T + shift)
    result = measure_length(cloud, Calibration(x1=1.0, real_length_cm=1.0))

    # ветвь длиннее половины ствола, путь через неё был бы длиннее ствола
    assert result.L1 == pytest.approx(1.5, rel=0.05)
    assert not result.low_confidence
    path_nodes = (result.skeleton.nodes[result.path.node_indices] - shift) @ rotation
    assert np.max(np.hypot(path_nodes[:, 0], path_nodes[:, 1])) < 0.1
    skeleton_nodes = (result.skeleton.nodes - shift) @ rotation
    assert np.max(skeleton_nodes[:, 0]) > 0.6
    assert nx.is_tree(result.skeleton.to_networkx())


def test_measure_length_empty():
    with pytest.raises(EmptyResultError):
        measure_length(PointCloud.empty(), Calibration(x1=1.0))


# ==================== Объём ====================

def voxel_centres(n=10, voxel=0.01):
    c = (np.arange(n) + 0.5) * voxel
    centres = np.stack(np.meshgrid(c, c, c, indexing='ij'), axis=-1).reshape(-1, 3)
    return np.vstack([np.zeros((1, 3)), centres])


def test_count_voxels_uses_fixed_grid():
    points = np.array([[0.0, 0, 0], [0.005, 0, 0], [0.015, 0, 0], [-0.001, 0, 0]])
    assert count_voxels(points, 0.01) == 3


def test_panicle_volume_of_voxel_block():
    calib = Calibration(x1=2.0, real_length_cm=7.5)
    result = panicle_volume(PointCloud(points=voxel_centres() * 2.0), calib)
    assert result.num_voxels == 1000
    assert result.volume_cm3 == pytest.approx(0.421875, abs=1e-12)


def test_panicle_volume_of_single_point():
    result = panicle_volume(PointCloud(points=[[0.3, -0.2, 0.7]]), Calibration(x1=0.4))
    assert result.num_voxels == 1
    assert result.volume_cm3 == pytest.approx(4.21875e-4, abs=1e-15)


def test_panicle_volume_never_drops_when_points_are_added(rng):
    calib = Calibration(x1=1.0)
    line = np.array([[0.0, 0.0, 0.0], [0.015, 0.0, 0.0], [0.024, 0.0, 0.0]])
    before = panicle_volume(PointCloud(points=line), calib).num_voxels
    after = panicle_volume(PointCloud(points=np.vstack([line, [[-0.005, 0.0, 0.0]]])), calib).num_voxels
    assert (before, after) == (3, 4)

    points = rng.uniform(-0.1, 0.1, size=(50, 3))
    previous = panicle_volume(PointCloud(points=points), calib).num_voxels
    for _ in range(20):
        points = np.vstack([points, rng.uniform(-0.2, 0.2, size=(int(rng.integers(1, 10)), 3))])
        current = panicle_volume(PointCloud(points=points), calib).num_voxels
        assert current >= previous
        previous = current


def test_panicle_volume_of_solid_cylinder(rng):
    """Цилиндр r = 0.3, h = 0.3 в нормированных единицах, по 4 точки на воксель."""
    voxel = 0.01
    centres = (np.arange(-30, 30) + 0.5) * voxel
    heights = (np.arange(30) + 0.5) * voxel
    lattice = np.stack(np.meshgrid(centres, centres, heights, indexing='ij'), axis=-1).reshape(-1, 3)
    points = np.repeat(lattice, 4, axis=0) + rng.uniform(-0.4 * voxel, 0.4 * voxel, size=(4 * len(lattice), 3))
    points = points[np.hypot(points[:, 0], points[:, 1]) <= 0.3]
    calib = Calibration(x1=1.0, real_length_cm=7.5)
    result = panicle_volume(PointCloud(points=points), calib, voxel=voxel)
    assert result.volume_cm3 == pytest.approx(np.pi * 0.3 ** 2 * 0.3 * 7.5 ** 3, rel=0.1)


def test_panicle_volume_errors():
    with pytest.raises(EmptyResultError):
        panicle_volume(PointCloud.empty(), Calibration(x1=1.0))
    with pytest.raises(ValueError):
        panicle_volume(PointCloud(points=np.zeros((2, 3))), Calibration(x1=1.0), voxel=0.0)
