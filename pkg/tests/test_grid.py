import numpy as np
import pytest

from voxcity.cloud import PointCloud
from voxcity.errors import BoundingBoxError, EmptyInputError, VoxCityError
from voxcity.grid import (
    ChannelLayout, DenseVolume, GridSpec, PruneTrace, SparseGrid, coarsen_occupancy,
    coord_key, densify, load_grid, pack_coords, prune, save_grid, sparsify,
    subdivide, voxelize,
)


def brute_force_bins(positions, origin, v):
    """Independent binning oracle: per point, scan for the cube that contains it."""
    out = []
    for p in positions:
        cell = []
        for ax in range(3):
            lo_guess = int((p[ax] - origin[ax]) / v) - 2
            for i in range(lo_guess, lo_guess + 5):
                if origin[ax] + i * v <= p[ax] < origin[ax] + (i + 1) * v:
                    cell.append(i)
                    break
            else:
                raise AssertionError("oracle failed to locate cell")
        out.append(cell)
    return np.asarray(out, dtype=np.int64)


def test_voxelize_single_point_at_origin_corner():
    g = voxelize(PointCloud(np.zeros((1, 3))), GridSpec(1.0))
    assert g.voxels.tolist() == [[0, 0, 0]]
    assert g.n_vertices == 8


def test_voxelize_eight_cell_centers():
    centers = np.array([[i + 0.5, j + 0.5, k + 0.5]
                        for i in range(2) for j in range(2) for k in range(2)])
    g = voxelize(PointCloud(centers), GridSpec(1.0))
    assert g.n_voxels == 8
    assert g.voxels.min() == 0 and g.voxels.max() == 1


def test_voxelize_matches_brute_force_binning():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.0, 10.0, size=(10_000, 3))
    spec = GridSpec(1.0, (0.0, 0.0, 0.0))
    g = voxelize(PointCloud(pts), spec)
    oracle = np.unique(brute_force_bins(pts, spec.origin_array, 1.0), axis=0)
    assert np.array_equal(g.voxels, oracle.astype(np.int32))


def test_voxelize_empty_errors():
    with pytest.raises(EmptyInputError, match="empty input"):
        voxelize(PointCloud(np.zeros((0, 3))), GridSpec(1.0))


def test_voxelize_deterministic_under_input_shuffle():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-5, 5, size=(2000, 3))
    g1 = voxelize(PointCloud(pts), GridSpec(0.5))
    g2 = voxelize(PointCloud(pts[rng.permutation(len(pts))]), GridSpec(0.5))
    assert g1.voxels.tobytes() == g2.voxels.tobytes()
    assert g1.vertex_coords.tobytes() == g2.vertex_coords.tobytes()


def test_subdivide_single_voxel():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0]])
    s = subdivide(g)
    assert s.spec.voxel_size == 0.5
    assert s.n_voxels == 8
    assert s.voxels.min() == 0 and s.voxels.max() == 1


def test_subdivide_two_adjacent():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0], [1, 0, 0]])
    assert subdivide(g).n_voxels == 16


def test_subdivide_parent_map_oracle():
    rng = np.random.default_rng(2)
    vox = np.unique(rng.integers(-10, 10, size=(80, 3)), axis=0)[:50]
    g = SparseGrid(GridSpec(2.0, (0.25, -0.5, 0.0)), vox)
    s = subdivide(g)
    assert s.n_voxels == 8 * g.n_voxels
    parents = np.unique(np.floor_divide(s.voxels.astype(np.int64), 2), axis=0)
    assert np.array_equal(parents.astype(np.int32), g.voxels)
    # coarsen-by-parent inverts subdivision
    assert np.array_equal(coarsen_occupancy(s).voxels, g.voxels)


def test_prune_identity_and_empty():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0], [3, 1, 2]])
    kept_grid, kept = prune(g, np.full(2, 10.0), 0.5)
    assert kept_grid == g and len(kept) == 2
    empty, kept = prune(g, np.full(2, -10.0), 0.5)
    assert empty.is_empty and empty.degenerate and len(kept) == 0


def test_prune_matches_elementwise_sigmoid():
    rng = np.random.default_rng(3)
    vox = np.unique(rng.integers(0, 8, size=(60, 3)), axis=0)
    g = SparseGrid(GridSpec(1.0), vox)
    logits = rng.normal(0, 2, size=g.n_voxels)
    kept_grid, _ = prune(g, logits, 0.6)
    expect = [v.tolist() for v, l in zip(g.voxels, logits)
              if 1.0 / (1.0 + np.exp(-l)) >= 0.6]
    assert kept_grid.voxels.tolist() == expect


def test_prune_missing_logit_errors():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0], [1, 1, 1]])
    with pytest.raises(VoxCityError, match="missing keep logit"):
        prune(g, {(0, 0, 0): 1.0}, 0.5)


def test_densify_single_voxel_in_4cube():
    g = SparseGrid(GridSpec(1.0), [[1, 2, 3]])
    vol = densify(g, (np.zeros(3, dtype=int), np.full(3, 4, dtype=int)))
    assert vol.shape3 == (4, 4, 4)
    assert vol.occupancy.sum() == 1.0
    assert vol.occupancy[1, 2, 3] == 1.0


def test_densify_bbox_too_small_lists_voxels():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0], [5, 0, 0]])
    with pytest.raises(BoundingBoxError, match=r"\[5, 0, 0\]"):
        densify(g, ((0, 0, 0), (4, 4, 4)))


def test_densify_sparsify_round_trip_random():
    rng = np.random.default_rng(4)
    vox = np.unique(rng.integers(-3, 5, size=(100, 3)), axis=0)
    attrs = rng.normal(size=(vox.shape[0], 5))
    # constructor sorts; re-align attrs with sorted order for comparison
    g = SparseGrid(GridSpec(0.5, (0.1, 0.2, 0.3)), vox, voxel_attrs=attrs,
                   voxel_layout=ChannelLayout.of(("feat", 5)))
    vol = densify(g, g.bbox())
    back = sparsify(vol, 0.5)
    assert back == g
    # and densify(sparsify(vol)) reproduces the volume
    vol2 = densify(back, (vol.lo, vol.lo + np.array(vol.shape3)))
    assert np.array_equal(vol2.data, vol.data)


def test_sparsify_trivial():
    spec = GridSpec(1.0)
    vol = DenseVolume(spec, np.zeros(3, dtype=int), np.zeros((2, 2, 2, 1)))
    assert sparsify(vol).is_empty
    vol.data[1, 0, 1, 0] = 1.0
    assert sparsify(vol).voxels.tolist() == [[1, 0, 1]]


def test_full_bbox_round_trip():
    vox = [[i, j, k] for i in range(3) for j in range(3) for k in range(3)]
    g = SparseGrid(GridSpec(1.0), vox)
    assert sparsify(densify(g, g.bbox())) == g


def test_pack_and_hash_injective_at_extremes():
    lo, hi = -(2 ** 31), 2 ** 31 - 1
    corners = [(i, j, k) for i in (lo, hi, 0) for j in (lo, hi, 0) for k in (lo, hi, 0)]
    packed = {pack_coords(*c) for c in corners}
    hashed = {coord_key(*c) for c in corners}
    assert len(packed) == len(corners) == len(hashed)
    rng = np.random.default_rng(5)
    pts = rng.integers(lo, hi, size=(5000, 3), endpoint=True)
    keys = {coord_key(*map(int, p)) for p in pts}
    assert len(keys) == len(np.unique(pts, axis=0))


def test_lookup_rows():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0], [2, 3, 4]])
    rows = g.voxel_rows([[2, 3, 4], [1, 1, 1], [0, 0, 0]])
    assert rows.tolist() == [1, -1, 0]
    assert g.vertex_rows([[0, 0, 0], [9, 9, 9]]).tolist()[1] == -1


def test_vertices_are_corners_of_occupied():
    rng = np.random.default_rng(6)
    vox = np.unique(rng.integers(0, 6, size=(40, 3)), axis=0)
    g = SparseGrid(GridSpec(1.0), vox)
    corner_set = set()
    for v in g.voxels:
        for c in range(8):
            corner_set.add((v[0] + ((c >> 2) & 1), v[1] + ((c >> 1) & 1), v[2] + (c & 1)))
    assert set(map(tuple, g.vertex_coords.tolist())) == corner_set
    assert (g.corner_rows() >= 0).all()


def test_sparse_storage_scales_with_occupancy_not_volume():
    rng = np.random.default_rng(7)
    n_total = 128 ** 3
    idx1 = rng.choice(n_total, size=n_total // 100, replace=False)  # 1% occupancy
    vox1 = np.stack(np.unravel_index(idx1, (128, 128, 128)), axis=1)
    layout = ChannelLayout.of(("occupancy", 1), ("normal", 3), ("color", 3))
    g1 = SparseGrid(GridSpec(1.0), vox1)
    g1 = g1.with_vertex_attrs(np.zeros((g1.n_vertices, 7)), layout)
    dense_bytes = (129 ** 3) * 7 * 8 + n_total * 8  # dense vertex attrs + occupancy
    assert g1.storage_nbytes() < 0.15 * dense_bytes
    idx2 = idx1[: len(idx1) // 2]  # halve occupancy -> storage about halves
    vox2 = np.stack(np.unravel_index(idx2, (128, 128, 128)), axis=1)
    g2 = SparseGrid(GridSpec(1.0), vox2)
    g2 = g2.with_vertex_attrs(np.zeros((g2.n_vertices, 7)), layout)
    assert g1.storage_nbytes() < 2.6 * g2.storage_nbytes()


def test_grid_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    vox = np.unique(rng.integers(-4, 4, size=(30, 3)), axis=0)
    g = SparseGrid(GridSpec(0.25, (1.0, -2.0, 0.5), depth=2), vox)
    layout = ChannelLayout.of(("occupancy", 1), ("color", 3))
    attrs = rng.normal(size=(g.n_vertices, 4))
    g = g.with_vertex_attrs(attrs, layout,
                            untouched=rng.random(g.n_vertices) < 0.2)
    path = tmp_path / "scene.vxc"
    save_grid(path, g)
    back = load_grid(path)
    assert back == g
    assert back.layout == layout
    assert np.array_equal(back.vertex_untouched, g.vertex_untouched)
    assert open(path, "rb").read(4) == b"VXC1"


def test_prune_trace_validation():
    base = [[0, 0, 0]]
    t = PruneTrace(GridSpec(2.0), base)
    t.push([[0, 0, 0], [1, 1, 1]])
    t.push([[0, 0, 1], [3, 3, 3]])
    t.validate()
    bad = PruneTrace(GridSpec(2.0), base, steps=[[[4, 4, 4]]])
    with pytest.raises(VoxCityError, match="orphans"):
        bad.validate()
    assert t.final_spec().voxel_size == 0.5
    assert t.level_voxels(1).shape == (2, 3)
