import numpy as np
import pytest

from voxcity.grid import ChannelLayout, GridSpec, SparseGrid
from voxcity.rehash import build_hierarchy, coarsen_spec, cover_voxels, rehash_level


def interval_overlap_oracle(fine_voxels, fine_spec, coarse_spec, search=24):
    """Brute-force cover: scan coarse indices, test box overlap in floats."""
    out = set()
    vf, of = fine_spec.voxel_size, fine_spec.origin_array
    vc, oc = coarse_spec.voxel_size, coarse_spec.origin_array
    for vox in np.asarray(fine_voxels).reshape(-1, 3):
        lo = of + vox * vf
        hi = lo + vf
        cand = [range(int(np.floor((lo[ax] - oc[ax]) / vc)) - 1,
                      int(np.ceil((hi[ax] - oc[ax]) / vc)) + 1) for ax in range(3)]
        for i in cand[0]:
            for j in cand[1]:
                for k in cand[2]:
                    clo = oc + np.array([i, j, k]) * vc
                    chi = clo + vc
                    if np.all(clo < hi) and np.all(lo < chi):
                        out.add((i, j, k))
    return np.array(sorted(out), dtype=np.int32).reshape(-1, 3)


def dense_transfer_oracle(prev, positions):
    """Dense-array oracle for the support-normalized trilinear transfer."""
    lo = prev.vertex_coords.min(axis=0).astype(int) - 2
    hi = prev.vertex_coords.max(axis=0).astype(int) + 3
    shape = tuple(hi - lo)
    c = prev.vertex_attrs.shape[1]
    field = np.zeros(shape + (c,))
    present = np.zeros(shape, dtype=bool)
    untouched = (prev.vertex_untouched if prev.vertex_untouched is not None
                 else np.zeros(len(prev.vertex_coords), dtype=bool))
    for row, (coord, attr) in enumerate(zip(prev.vertex_coords, prev.vertex_attrs)):
        if untouched[row]:
            continue
        idx = tuple(coord.astype(int) - lo)
        field[idx] = attr
        present[idx] = True
    out = np.zeros((len(positions), c))
    for qi, p in enumerate(positions):
        rel = (p - prev.spec.origin_array) / prev.spec.voxel_size
        cell = np.floor(rel).astype(int)
        t = rel - cell
        numer = np.zeros(c)
        mass = 0.0
        for b in range(8):
            d = np.array([(b >> 2) & 1, (b >> 1) & 1, b & 1])
            w = np.prod(np.where(d, t, 1 - t))
            idx = tuple(cell + d - lo)
            if all(0 <= idx[ax] < shape[ax] for ax in range(3)) and present[idx]:
                numer += w * field[idx]
                mass += w
        if mass > 1e-12:
            out[qi] = numer / mass
    return out


def test_coarsen_spec_examples():
    b = GridSpec(1.0, (0.0, 0.0, 0.0))
    s0 = coarsen_spec(b, 0)
    assert s0.voxel_size == 1.0 and s0.origin == (0.5, 0.5, 0.5)
    s3 = coarsen_spec(b, 3)
    assert s3.voxel_size == 8.0 and s3.origin == (4.0, 4.0, 4.0)
    s = coarsen_spec(GridSpec(0.25, (0.0, 0.0, 0.0)), 2)
    assert s.voxel_size == 1.0 and s.origin == (0.5, 0.5, 0.5)


def test_spec_math_exact_to_level_8():
    b = GridSpec(0.5, (1.0, -2.0, 3.0))
    for n in range(9):
        s = coarsen_spec(b, n)
        assert s.voxel_size == (2 ** n) * b.voxel_size  # exact: powers of two
        assert s.origin == tuple(o + s.voxel_size / 2 for o in b.origin)
        assert s.depth == n


def test_spec_math_idempotent_via_as_base():
    b = GridSpec(1.0, (0.0, 0.0, 0.0))
    once = coarsen_spec(coarsen_spec(b, 1).as_base(), 1)
    assert once.voxel_size == coarsen_spec(b, 2).voxel_size


def test_single_voxel_covered_by_one_coarse_voxel():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0]])
    lvl = rehash_level(g, coarsen_spec(g.spec, 1))
    assert lvl.n_voxels == 1
    assert lvl.voxels.tolist() == [[-1, -1, -1]]


def test_cover_matches_interval_overlap_oracle():
    rng = np.random.default_rng(0)
    base = GridSpec(1.0, (0.0, 0.0, 0.0))
    vox = np.unique(rng.integers(-6, 6, size=(50, 3)), axis=0)
    for n in (1, 2):
        spec_n = coarsen_spec(base, n)
        got = cover_voxels(vox, base, spec_n)
        expect = interval_overlap_oracle(vox, base, spec_n)
        assert np.array_equal(got, expect)


def test_chain_cover_matches_oracle_between_levels():
    rng = np.random.default_rng(1)
    base = GridSpec(1.0, (0.0, 0.0, 0.0))
    vox = np.unique(rng.integers(0, 10, size=(60, 3)), axis=0)
    g1 = SparseGrid(coarsen_spec(base, 1), vox)
    spec2 = coarsen_spec(base, 2)
    got = cover_voxels(g1.voxels, g1.spec, spec2)
    assert np.array_equal(got, interval_overlap_oracle(g1.voxels, g1.spec, spec2))


def test_constant_field_preserved_across_five_levels():
    rng = np.random.default_rng(2)
    vox = np.unique(rng.integers(0, 12, size=(150, 3)), axis=0)
    g = SparseGrid(GridSpec(1.0), vox)
    c = np.array([2.5, -0.125, 9.0])
    g = g.with_vertex_attrs(np.tile(c, (g.n_vertices, 1)),
                            ChannelLayout.of(("f", 3)))
    levels = build_hierarchy(g, 5)
    assert len(levels) == 6
    for lvl in levels[1:]:
        supported = ~lvl.vertex_untouched
        assert supported.any()
        assert np.max(np.abs(lvl.vertex_attrs[supported] - c)) < 1e-12
        assert np.all(lvl.vertex_attrs[~supported] == 0.0)


def test_voxel_counts_non_increasing():
    rng = np.random.default_rng(3)
    vox = np.unique(rng.integers(0, 16, size=(300, 3)), axis=0)
    g = SparseGrid(GridSpec(1.0), vox)
    g = g.with_vertex_attrs(rng.normal(size=(g.n_vertices, 2)),
                            ChannelLayout.of(("f", 2)))
    levels = build_hierarchy(g, 4)
    counts = [lvl.n_voxels for lvl in levels]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_one_voxel_hierarchy_counts():
    g = SparseGrid(GridSpec(1.0), [[3, 3, 3]])
    g = g.with_vertex_attrs(np.ones((8, 1)), ChannelLayout.of(("f", 1)))
    levels = build_hierarchy(g, 2)
    counts = [lvl.n_voxels for lvl in levels]
    assert counts[0] == 1 and all(a >= b for a, b in zip(counts, counts[1:]))


def test_feature_transfer_matches_dense_oracle_16cube():
    rng = np.random.default_rng(4)
    for trial in range(3):
        vox = np.unique(rng.integers(0, 16, size=(250, 3)), axis=0)
        g = SparseGrid(GridSpec(1.0), vox)
        g = g.with_vertex_attrs(rng.normal(size=(g.n_vertices, 4)),
                                ChannelLayout.of(("f", 4)))
        levels = build_hierarchy(g, 3)
        prev = levels[0]
        for lvl in levels[1:]:
            expect = dense_transfer_oracle(prev, lvl.vertex_positions())
            assert np.max(np.abs(lvl.vertex_attrs - expect)) < 1e-12
            prev = lvl


def test_empty_prev_gives_empty_level():
    g = SparseGrid(GridSpec(1.0), np.zeros((0, 3)))
    lvl = rehash_level(g, coarsen_spec(GridSpec(1.0), 1))
    assert lvl.is_empty and lvl.degenerate


def test_vertex_positions_interleave_exactly():
    # in half-units of the base voxel, level-n vertices sit at
    # 2**n mod 2**(n+1); consecutive levels n >= 2 never coincide,
    # level-1 vertices land on odd base-lattice vertices
    b = GridSpec(1.0, (0.0, 0.0, 0.0))
    for n in range(1, 6):
        s = coarsen_spec(b, n)
        half_units = np.rint(2 * (s.origin_array[0] + s.voxel_size * np.arange(-4, 5))
                             / b.voxel_size).astype(np.int64)
        assert np.all(half_units % (2 ** (n + 1)) == 2 ** n)
        if n >= 2:
            prev = coarsen_spec(b, n - 1)
            prev_units = np.rint(2 * (prev.origin_array[0]
                                      + prev.voxel_size * np.arange(-8, 9))
                                 / b.voxel_size).astype(np.int64)
            assert not set(half_units.tolist()) & set(prev_units.tolist())
    lvl1 = np.rint(2 * (coarsen_spec(b, 1).origin_array[0]
                        + 2.0 * np.arange(-4, 5))).astype(np.int64)
    assert np.all(lvl1 % 2 == 0) and np.all((lvl1 // 2) % 2 == 1)


def test_hierarchy_requires_positive_level_count():
    g = SparseGrid(GridSpec(1.0), [[0, 0, 0]])
    with pytest.raises(ValueError):
        build_hierarchy(g, 0)
