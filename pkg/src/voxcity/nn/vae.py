"""Variational encoder/decoder stacks over sparse voxel grids.

The encoders substitute per-voxel MLPs with 2x octant average pooling for
sparse convolutions; structure decoders upsample by subdivide -> logit ->
prune steps, recording keep decisions in a PruneTrace. Two VAEs exist: a
dense-bottleneck geometry VAE (latents live on every cell of a bounding box,
so the sampler can tell occupied from empty space) and a sparse VAE whose
unified encoder feeds both the geometry decoder and, from the dual-stage
epoch onward, the multi-level appearance decoder plus color head.

Everything is float64 and runs on the autodiff engine in ``tensor``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import EmptyInputError, VoxCityError
from ..grid import (ChannelLayout, DenseVolume, GridSpec, PruneTrace,
                    SparseGrid, coarsen_occupancy, densify, _sort_unique_coords)
from ..rehash import coarsen_spec, cover_voxels
from ..cloud import PointCloud
from .losses import LossWeights, bce_with_logits, gaussian_kl, l1_loss
from .modules import Linear, MLP, Module
from .tensor import Tensor, concat, segment_max, segment_mean, weighted_gather

GEOM_FEATURES = 4  # occupancy plus mean corner normal


@dataclass
class VaeConfig:
    hidden: int = 24
    latent_channels: int = 8
    color_channels: int = 4
    levels: int = 4                  # appearance levels 0..n
    downsample: int = 4              # bottleneck factor, power of two
    head_hidden: int = 64
    head_layers: int = 2
    dense_pad: int = 1               # bbox padding in bottleneck cells
    prune_threshold: float = 0.5
    dual_stage_epoch: int = 10       # color loss activates at this epoch
    hierarchy_mode: str = "rehash"   # "rehash" | "plain" (naive coarsening)
    shared_latent: bool = False      # ablation: one latent for geometry+color

    @property
    def pool_steps(self) -> int:
        k = int(round(np.log2(self.downsample)))
        if 2 ** k != self.downsample:
            raise VoxCityError("downsample must be a power of two")
        return k

    @property
    def n_levels(self) -> int:
        return 0 if self.shared_latent else self.levels


# -- fixed (non-learned) grid plumbing --------------------------------------


def voxel_input_features(grid: SparseGrid) -> np.ndarray:
    """Per-voxel encoder input: occupancy 1 plus mean corner normals."""
    feats = np.zeros((grid.n_voxels, GEOM_FEATURES))
    feats[:, 0] = 1.0
    if grid.vertex_attrs is not None and grid.layout and "normal" in grid.layout:
        normals = grid.channel("normal")
        feats[:, 1:4] = normals[grid.corner_rows()].mean(axis=1)
    return feats


def incident_voxel_stencil(grid: SparseGrid):
    """(M, 8) rows of voxels incident to each vertex plus mean weights."""
    cand = (grid.vertex_coords[:, None, :].astype(np.int64)
            - kernels.CORNER_OFFSETS[None, :, :])
    rows = grid.voxel_rows(cand.reshape(-1, 3)).reshape(-1, 8)
    counts = np.maximum((rows >= 0).sum(axis=1), 1)
    weights = np.where(rows >= 0, 1.0 / counts[:, None], 0.0)
    return rows, weights


def corner_vertex_stencil(grid: SparseGrid):
    """(N, 8) vertex rows per voxel with uniform 1/8 weights."""
    rows = grid.corner_rows()
    return rows, np.full(rows.shape, 0.125)


def vertexify(grid: SparseGrid, voxel_feats: Tensor) -> Tensor:
    rows, weights = incident_voxel_stencil(grid)
    return weighted_gather(voxel_feats, rows, weights)


def voxelify(grid: SparseGrid, vertex_feats: Tensor) -> Tensor:
    rows, weights = corner_vertex_stencil(grid)
    return weighted_gather(vertex_feats, rows, weights)


def occupancy_pyramid(grid: SparseGrid, steps: int):
    """Grid plus its parent-coarsened occupancies, fine to coarse."""
    levels = [grid]
    for _ in range(steps):
        levels.append(coarsen_occupancy(levels[-1]))
    return levels


def dense_bbox(bottleneck: SparseGrid, pad: int):
    lo, hi = bottleneck.bbox()
    return lo - pad, hi + pad


def scatter_latent_volume(bottleneck: SparseGrid, z: Tensor, box) -> Tensor:
    """Differentiable embedding of per-voxel latent rows into a dense box
    (empty cells stay exactly zero)."""
    from .tensor import weighted_scatter
    lo, hi = np.asarray(box[0]), np.asarray(box[1])
    shape3 = tuple((hi - lo).tolist())
    rel = bottleneck.voxels.astype(np.int64) - lo
    flat = np.ravel_multi_index((rel[:, 0], rel[:, 1], rel[:, 2]), shape3)
    out = weighted_scatter(z, flat[:, None], np.ones((flat.size, 1)),
                           int(np.prod(shape3)))
    return out.reshape(shape3 + (z.shape[1],))


def lattice_transfer_stencil(prev: SparseGrid, positions):
    """Support-normalized trilinear stencil from prev's vertex lattice.

    Returns (rows, weights) for weighted_gather; positions without any
    supporting vertex produce all -1 rows (zero output).
    """
    cells, frac = kernels.fractional_coords(
        np.asarray(positions, dtype=np.float64), prev.spec.origin_array,
        prev.spec.voxel_size)
    weights = kernels.corner_weights(frac)
    corners = (cells[:, None, :] + kernels.CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
    rows = prev.vertex_rows(corners).reshape(-1, 8)
    mass = np.where(rows >= 0, weights, 0.0).sum(axis=1)
    ok = mass > 1e-12
    weights = np.where(rows >= 0, weights, 0.0)
    weights[ok] /= mass[ok, None]
    weights[~ok] = 0.0
    return rows, weights


def sample_stencil(grid: SparseGrid, positions):
    """Strict interpolation stencil: corners of the enclosing occupied voxel,
    zero-filled (all rows -1) elsewhere. Matches ``attrib.sample``."""
    positions = np.asarray(positions, dtype=np.float64)
    cells, frac = kernels.fractional_coords(positions, grid.spec.origin_array,
                                            grid.spec.voxel_size)
    weights = kernels.corner_weights(frac)
    vox_rows = grid.voxel_rows(cells)
    rows = np.full((positions.shape[0], 8), -1, dtype=np.int64)
    hit = vox_rows >= 0
    if hit.any():
        rows[hit] = grid.corner_rows()[vox_rows[hit]]
    return rows, weights


def appearance_level_spec(base: GridSpec, level: int, mode: str) -> GridSpec:
    """Lattice of appearance level k over a given base lattice."""
    if mode == "plain":  # naive: doubled size, no half-voxel shift
        return GridSpec(base.voxel_size * (2 ** level), base.origin, depth=level)
    return coarsen_spec(base, level) if level else base.as_base()


def appearance_hierarchy(latent_grid: SparseGrid, feats: Tensor, n: int, mode: str):
    """Differentiable multi-level coarsening of a latent vertex-feature grid.

    Level 0 is the latent grid itself; each coarser level covers the previous
    one and resamples vertex features through a fixed linear stencil.
    """
    levels = [(latent_grid, feats)]
    base = latent_grid.spec.as_base()
    for k in range(1, n + 1):
        prev_grid, prev_feats = levels[-1]
        spec_k = appearance_level_spec(base, k, mode)
        support = SparseGrid(spec_k, cover_voxels(prev_grid.voxels,
                                                  prev_grid.spec, spec_k))
        rows, weights = lattice_transfer_stencil(prev_grid,
                                                 support.vertex_positions())
        levels.append((support, weighted_gather(prev_feats, rows, weights)))
    return levels


# -- encoders ----------------------------------------------------------------


def slot_concat(feats: Tensor, rows) -> Tensor:
    """Order-preserving gather: concatenate the feature rows of each stencil
    slot (zeros where the slot is empty). Keeps spatial patterns that a mean
    would wash out."""
    rows = np.asarray(rows, dtype=np.int64)
    parts = []
    for c in range(rows.shape[1]):
        r = rows[:, c:c + 1]
        parts.append(weighted_gather(feats, r, (r >= 0).astype(np.float64)))
    return concat(parts, axis=1)


def octant_pool(child_grid: SparseGrid, child_feats: Tensor,
                parent: SparseGrid) -> Tensor:
    """Structure-preserving 2x pooling: per-octant child features are
    concatenated in octant order, so the parent keeps the pattern below it."""
    child_coords = (parent.voxels[:, None, :].astype(np.int64) * 2
                    + kernels.CORNER_OFFSETS[None, :, :])
    rows = child_grid.voxel_rows(child_coords.reshape(-1, 3)).reshape(-1, 8)
    return slot_concat(child_feats, rows)


class GridEncoder(Module):
    """Per-voxel MLP + structured 2x octant pooling down to the bottleneck."""

    def __init__(self, rng, cfg: VaeConfig, in_features=GEOM_FEATURES):
        self.embed = MLP(rng, [in_features, cfg.hidden, cfg.hidden])
        self.pools = [MLP(rng, [8 * cfg.hidden, cfg.hidden, cfg.hidden])
                      for _ in range(cfg.pool_steps)]

    def __call__(self, grid: SparseGrid, feats=None):
        """Returns (occupancy pyramid fine->coarse, bottleneck voxel feats)."""
        if grid.is_empty:
            raise EmptyInputError("cannot encode an empty grid")
        x = Tensor(voxel_input_features(grid)) if feats is None else feats
        x = self.embed(x)
        pyramid = [grid]
        for mlp in self.pools:
            parent = coarsen_occupancy(pyramid[-1])
            x = mlp(octant_pool(pyramid[-1], x, parent))
            pyramid.append(parent)
        return pyramid, x


class PointEncoder(Module):
    """Per-point MLP features max-pooled into their voxel."""

    def __init__(self, rng, cfg: VaeConfig, pos_scale=32.0):
        self.mlp = MLP(rng, [6, cfg.hidden, cfg.hidden])
        self.pos_scale = pos_scale

    def __call__(self, points: PointCloud, spec: GridSpec):
        if len(points) == 0:
            raise EmptyInputError("empty input")
        cells, frac = kernels.fractional_coords(points.positions,
                                                spec.origin_array, spec.voxel_size)
        support = SparseGrid(spec, _sort_unique_coords(cells))
        seg = support.voxel_rows(cells)
        raw = np.hstack([frac, cells / self.pos_scale])
        feats = self.mlp(Tensor(raw))
        return support, segment_max(feats, seg, support.n_voxels)


class ConditionEncoder(Module):
    """Point encoder followed by the pooling stack; per-cell condition feats."""

    def __init__(self, rng, cfg: VaeConfig):
        self.points = PointEncoder(rng, cfg)
        self.refine = [MLP(rng, [8 * cfg.hidden, cfg.hidden, cfg.hidden])
                       for _ in range(cfg.pool_steps)]

    def __call__(self, points: PointCloud, spec: GridSpec):
        support, x = self.points(points, spec)
        pyramid = [support]
        for mlp in self.refine:
            parent = coarsen_occupancy(pyramid[-1])
            x = mlp(octant_pool(pyramid[-1], x, parent))
            pyramid.append(parent)
        return pyramid[-1], x


class GridConditionEncoder(Module):
    """Encodes an explicit grid (occupancy + normals) into per-vertex
    bottleneck condition features; the stage-2 conditioning contract."""

    def __init__(self, rng, cfg: VaeConfig):
        self.encoder = GridEncoder(rng, cfg)
        self.vertex_head = Linear(rng, 8 * cfg.hidden, cfg.hidden)

    def __call__(self, grid: SparseGrid):
        pyramid, voxel_feats = self.encoder(grid)
        bottleneck = pyramid[-1]
        rows, _ = incident_voxel_stencil(bottleneck)
        return bottleneck, self.vertex_head(slot_concat(voxel_feats, rows)).tanh()


# -- structure decoder ---------------------------------------------------------


@dataclass
class DecodeResult:
    grid: SparseGrid
    normals: Tensor | None
    trace: PruneTrace
    step_logits: list = field(default_factory=list)   # [(Tensor logits, np targets)]
    degenerate: bool = False
    vertex_feats: Tensor | None = None


class StructureDecoder(Module):
    """Iterative subdivide -> predict keep logits -> prune, then vertex heads."""

    def __init__(self, rng, cfg: VaeConfig, in_channels):
        self.proj = Linear(rng, in_channels, cfg.hidden)
        self.child_mlps = [MLP(rng, [cfg.hidden + 8, cfg.hidden, cfg.hidden])
                           for _ in range(cfg.pool_steps)]
        self.logit_heads = [Linear(rng, cfg.hidden, 1)
                            for _ in range(cfg.pool_steps)]
        self.vertex_mlp = MLP(rng, [cfg.hidden, cfg.hidden, cfg.hidden])
        self.normal_head = Linear(rng, cfg.hidden, 3)
        self.threshold = cfg.prune_threshold
        self._octant_onehot = np.eye(8)

    def _logit_threshold(self):
        p = min(max(self.threshold, 1e-9), 1 - 1e-9)
        return float(np.log(p / (1 - p)))

    def decode(self, support: SparseGrid, feats: Tensor,
               teacher=None) -> DecodeResult:
        """Upsample from the bottleneck support back to input resolution.

        ``teacher`` is an occupancy pyramid (fine->coarse) used for
        teacher-forced pruning and BCE targets during training; without it
        the decoder prunes by its own logits.
        """
        trace = PruneTrace(support.spec, support.voxels)
        cur_grid, x = support, self.proj(feats).tanh()
        steps = len(self.child_mlps)
        result = DecodeResult(cur_grid, None, trace)
        for s in range(steps):
            if cur_grid.is_empty:
                result.degenerate = True
                result.grid = cur_grid
                return result
            n = cur_grid.n_voxels
            children = (cur_grid.voxels[:, None, :].astype(np.int64) * 2
                        + kernels.CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
            parent_rows = np.repeat(np.arange(n, dtype=np.int64), 8)
            octants = np.tile(self._octant_onehot, (n, 1))
            child_in = concat([x.take_rows(parent_rows), Tensor(octants)], axis=1)
            x_children = self.child_mlps[s](child_in)
            logits = self.logit_heads[s](x_children).reshape(-1)
            child_spec = cur_grid.spec.halved()
            if teacher is not None:
                truth_level = teacher[steps - 1 - s]
                target = truth_level.contains_voxels(children).astype(np.float64)
                keep = target > 0.5
            else:
                target = None
                keep = logits.data >= self._logit_threshold()
            result.step_logits.append((logits, target))
            kept = children[keep]
            trace.push(kept)
            if kept.shape[0] == 0:
                result.degenerate = True
                result.grid = SparseGrid(child_spec, kept, degenerate=True)
                result.trace = trace
                return result
            new_grid = SparseGrid(child_spec, kept)
            # realign feature rows with the grid's sorted voxel order
            sorted_rows = new_grid.voxel_rows(kept)
            inv = np.empty(kept.shape[0], dtype=np.int64)
            inv[sorted_rows] = np.arange(kept.shape[0])
            keep_idx = np.flatnonzero(keep)
            x = x_children.take_rows(keep_idx[inv])
            cur_grid = new_grid
        result.grid = cur_grid
        result.trace = trace
        result.normals = self.normal_head(
            self.vertex_mlp(vertexify(cur_grid, x))).tanh()
        result.vertex_feats = x
        return result


# -- the two VAEs ---------------------------------------------------------------


class DenseVae(Module):
    """Geometry VAE with a densified bottleneck."""

    def __init__(self, rng, cfg: VaeConfig):
        self.cfg = cfg
        self.encoder = GridEncoder(rng, cfg)
        self.mu_head = Linear(rng, cfg.hidden, cfg.latent_channels)
        self.logvar_head = Linear(rng, cfg.hidden, cfg.latent_channels, scale=1e-3)
        self.cell_proj = Linear(rng, cfg.latent_channels, cfg.hidden)
        self.cell_logit = Linear(rng, cfg.hidden, 1)
        self.decoder = StructureDecoder(rng, cfg, cfg.hidden)

    def encode(self, grid: SparseGrid):
        """Returns (pyramid, bottleneck support, mu, logvar) per occupied cell."""
        pyramid, feats = self.encoder(grid)
        return pyramid, pyramid[-1], self.mu_head(feats), self.logvar_head(feats)

    def latent_volume(self, bottleneck: SparseGrid, values: np.ndarray,
                      bbox) -> DenseVolume:
        """Embed per-voxel latent rows into a dense box (empty cells zero)."""
        carrier = SparseGrid(bottleneck.spec, bottleneck.voxels,
                             voxel_attrs=values,
                             voxel_layout=ChannelLayout.of(
                                 ("latent", values.shape[1])))
        return densify(carrier, bbox)

    def decode_volume(self, vol_data: Tensor, lo, spec: GridSpec,
                      teacher=None) -> DecodeResult:
        """Dense decode: classify cells, then run the structure decoder.

        ``vol_data`` is a (D, H, W, C) latent tensor; ``teacher`` an
        occupancy pyramid for teacher forcing.
        """
        shape3 = vol_data.shape[:3]
        n_cells = int(np.prod(shape3))
        flat = vol_data.reshape(n_cells, vol_data.shape[3])
        h = self.cell_proj(flat).tanh()
        cell_logits = self.cell_logit(h).reshape(-1)
        coords = np.stack(np.unravel_index(np.arange(n_cells), shape3),
                          axis=1) + np.asarray(lo)
        if teacher is not None:
            bottleneck_truth = teacher[-1]
            target = bottleneck_truth.contains_voxels(coords).astype(np.float64)
            keep = target > 0.5
        else:
            target = None
            keep = cell_logits.data >= self.decoder._logit_threshold()
        kept_coords = coords[keep]
        if kept_coords.shape[0] == 0:
            trace = PruneTrace(spec, kept_coords)
            res = DecodeResult(SparseGrid(spec, kept_coords, degenerate=True),
                               None, trace, degenerate=True)
            res.step_logits.append((cell_logits, target))
            return res
        support = SparseGrid(spec, kept_coords)
        sorted_rows = support.voxel_rows(kept_coords)
        inv = np.empty(kept_coords.shape[0], dtype=np.int64)
        inv[sorted_rows] = np.arange(kept_coords.shape[0])
        keep_idx = np.flatnonzero(keep)
        feats = h.take_rows(keep_idx[inv])
        result = self.decoder.decode(support, feats, teacher=teacher)
        result.step_logits.insert(0, (cell_logits, target))
        return result


class ColorHead(Module):
    """MLP mapping concatenated level features to RGB logits."""

    def __init__(self, rng, cfg: VaeConfig):
        width = cfg.color_channels * (cfg.n_levels + 1)
        dims = [width] + [cfg.head_hidden] * cfg.head_layers + [3]
        self.mlp = MLP(rng, dims)
        self.input_width = width

    def __call__(self, x):
        return self.mlp(x)

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        return self.mlp.apply_np(x)


class SparseVae(Module):
    """Unified sparse encoder with geometry and appearance decoders."""

    def __init__(self, rng, cfg: VaeConfig):
        self.cfg = cfg
        self.encoder = GridEncoder(rng, cfg)
        self.mu_head = Linear(rng, 8 * cfg.hidden, cfg.latent_channels)
        self.logvar_head = Linear(rng, 8 * cfg.hidden, cfg.latent_channels,
                                  scale=1e-3)
        self.vertex_proj = Linear(rng, 8 * cfg.latent_channels, cfg.hidden)
        self.decoder = StructureDecoder(rng, cfg, cfg.hidden)
        self.color_proj = Linear(rng, cfg.latent_channels, cfg.color_channels)
        self.level_mlps = [MLP(rng, [cfg.color_channels, cfg.hidden,
                                     cfg.color_channels])
                           for _ in range(cfg.n_levels + 1)]
        self.color_head = ColorHead(rng, cfg)

    # geometry ------------------------------------------------------------

    def encode(self, grid: SparseGrid):
        """Per-vertex posterior on the bottleneck support."""
        pyramid, voxel_feats = self.encoder(grid)
        bottleneck = pyramid[-1]
        rows, _ = incident_voxel_stencil(bottleneck)
        vfeats = slot_concat(voxel_feats, rows)
        return pyramid, bottleneck, self.mu_head(vfeats), self.logvar_head(vfeats)

    def decode_geometry(self, bottleneck: SparseGrid, z: Tensor,
                        teacher=None) -> DecodeResult:
        feats = self.vertex_proj(slot_concat(z, bottleneck.corner_rows())).tanh()
        return self.decoder.decode(bottleneck, feats, teacher=teacher)

    # appearance ------------------------------------------------------------

    def appearance_levels(self, bottleneck: SparseGrid, z: Tensor):
        """Latent hierarchy seeding the per-level appearance decode."""
        feats0 = self.color_proj(z)
        return appearance_hierarchy(bottleneck, feats0, self.cfg.n_levels,
                                    self.cfg.hierarchy_mode)

    def decode_color_levels(self, levels, trace: PruneTrace):
        """Upsample each latent level along the trace; final vertex features.

        Level 0 follows the trace support exactly; coarser levels re-fit to
        the cover of the traced support on their own (shifted) lattice at
        every step, transferring vertex features through the fixed trilinear
        stencil and a per-level refinement MLP.
        """
        out = []
        for k, (grid_k, feats_k) in enumerate(levels):
            cur_grid, cur = grid_k, feats_k
            for s in range(1, trace.n_steps + 1):
                level0 = trace.level_voxels(s)
                spec0 = trace.spec_at(s)
                spec_k = appearance_level_spec(spec0, k, self.cfg.hierarchy_mode)
                if k == 0:
                    support = SparseGrid(spec0, level0)
                else:
                    support = SparseGrid(
                        spec_k, cover_voxels(level0, spec0, spec_k))
                rows, weights = lattice_transfer_stencil(
                    cur_grid, support.vertex_positions())
                cur = weighted_gather(cur, rows, weights)
                cur = cur + self.level_mlps[k](cur)
                cur_grid = support
            out.append((cur_grid, cur))
        return out

    def predict_colors(self, decoded_levels, positions) -> Tensor:
        """Inverse sampling: per-level strict interpolation, concat, head."""
        feats = []
        for grid_k, feats_k in decoded_levels:
            rows, weights = sample_stencil(grid_k, positions)
            feats.append(weighted_gather(feats_k, rows, weights))
        return self.color_head(concat(feats, axis=1)).sigmoid()


# -- loss assembly ---------------------------------------------------------------


@dataclass
class VaeOutput:
    mu: Tensor
    logvar: Tensor
    result: DecodeResult
    pred_colors: Tensor | None = None
    color_targets: np.ndarray | None = None

    @property
    def trace(self) -> PruneTrace:
        return self.result.trace

    @property
    def grid(self) -> SparseGrid:
        return self.result.grid


def occupancy_bce(result: DecodeResult) -> Tensor:
    """Mean BCE over all decoder steps' candidate voxels."""
    total, count = None, 0
    for logits, target in result.step_logits:
        if target is None:
            raise VoxCityError("occupancy loss requires teacher targets")
        term = bce_with_logits(logits, target) * logits.size
        total = term if total is None else total + term
        count += logits.size
    if total is None:
        raise VoxCityError("decoder recorded no steps")
    return total * (1.0 / count)


def normal_l1(result: DecodeResult, truth: SparseGrid) -> Tensor:
    """L1 on vertex normals over truth vertices that received splatted data."""
    if result.normals is None:
        raise VoxCityError("decode did not reach the vertex stage")
    rows = truth.vertex_rows(result.grid.vertex_coords)
    if np.any(rows < 0):
        raise VoxCityError("reconstruction support escaped the truth grid")
    target = truth.channel("normal")[rows]
    weights = None
    if truth.vertex_untouched is not None:
        weights = (~truth.vertex_untouched[rows]).astype(np.float64)
    return l1_loss(result.normals, target, weights=weights)


def loss_dense(out: VaeOutput, truth: SparseGrid,
               weights: LossWeights = LossWeights()):
    """lambda0 * BCE + lambda1 * L1(normals) + lambda2 * KL, plus the parts."""
    parts = {
        "occupancy": occupancy_bce(out.result),
        "normal": normal_l1(out.result, truth),
        "kl": gaussian_kl(out.mu, out.logvar),
    }
    total = (weights.occupancy * parts["occupancy"]
             + weights.normal * parts["normal"]
             + weights.kl * parts["kl"])
    return total, parts


def loss_sparse(out: VaeOutput, truth: SparseGrid, epoch: int,
                weights: LossWeights = LossWeights(),
                dual_stage_epoch: int = 10):
    """Sparse-path loss; the color term joins at the dual-stage epoch."""
    total, parts = loss_dense(out, truth, weights)
    color_active = epoch >= dual_stage_epoch
    if color_active:
        if out.pred_colors is None or out.color_targets is None:
            raise VoxCityError("color stage active but no color predictions")
        parts["color"] = l1_loss(out.pred_colors, out.color_targets)
        total = total + weights.color * parts["color"]
    return total, parts
