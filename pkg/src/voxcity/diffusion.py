"""Noise schedules, v-parameterized diffusion steps, and cascaded sampling.

Tables are 1-indexed over t = 1..T with the empty-product convention
abar[0] = 1, which makes the final ancestral step deterministic. The
denoiser predicts v, a rotation of (x0, eps):

    x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
    v   = sqrt(abar_t) eps - sqrt(1 - abar_t) x0

so x0 and eps are exactly recoverable from (x_t, v). The ancestral reverse
mean is sqrt(alpha_t) x_t - beta_t sqrt(abar_{t-1} / (1 - abar_t)) v with
posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t); the DDIM update
goes through the recovered (x0, eps) pair and reproduces the ancestral
kernel exactly at eta = 1.

Generation runs three conditional stages: a dense geometry latent
conditioned on the encoded height-field point cloud, a sparse geometry
latent conditioned on the decoded first-stage grid, and per-level appearance
latents conditioned on the pruning trace recorded by the sparse decoder.
Each stage function accepts only its declared condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import DegenerateOutputError, EmptyInputError, VoxCityError
from .grid import ChannelLayout, GridSpec, PruneTrace, SparseGrid, densify
from .nn.modules import Module, ResidualMLP
from .nn.tensor import Tensor
from .nn.vae import (ConditionEncoder, DenseVae, GridConditionEncoder,
                     SparseVae, VaeConfig, appearance_level_spec, dense_bbox,
                     incident_voxel_stencil)
from .rehash import cover_voxels
from . import kernels


@dataclass(frozen=True)
class DiffusionSchedule:
    """beta/alpha/abar tables for T steps (index 0 is the t=0 convention row)."""

    betas: np.ndarray      # (T+1,), betas[0] = 0 unused
    alphas: np.ndarray     # 1 - betas
    alpha_bars: np.ndarray  # cumulative products, alpha_bars[0] = 1

    @staticmethod
    def linear(timesteps: int, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "DiffusionSchedule":
        if timesteps < 1:
            raise VoxCityError("schedule needs at least one step")
        betas = np.concatenate([[0.0],
                                np.linspace(beta_start, beta_end, timesteps)])
        alphas = 1.0 - betas
        return DiffusionSchedule(betas, alphas, np.cumprod(alphas))

    def __post_init__(self):
        t = self.timesteps
        if t >= 1 and not (np.all(self.betas[1:] > 0) and np.all(self.betas[1:] < 1)):
            raise VoxCityError("betas must lie strictly in (0, 1)")
        if self.alpha_bars[0] != 1.0:
            raise VoxCityError("alpha_bars[0] must be 1")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise VoxCityError("alpha_bars must be strictly decreasing")

    @property
    def timesteps(self) -> int:
        return len(self.betas) - 1


def forward_noise(x0, t: int, noise, schedule: DiffusionSchedule):
    """Closed form of the forward chain: x_t from x0 and a noise draw."""
    if not 1 <= t <= schedule.timesteps:
        raise VoxCityError(f"t={t} outside 1..{schedule.timesteps}")
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def v_target(x0, eps, t: int, schedule: DiffusionSchedule):
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * x0


def x0_from_v(x_t, v, t: int, schedule: DiffusionSchedule):
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * x_t - np.sqrt(1.0 - ab) * v


def eps_from_v(x_t, v, t: int, schedule: DiffusionSchedule):
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * v + np.sqrt(1.0 - ab) * x_t


def reverse_step_ancestral(x_t, t: int, v_hat, schedule: DiffusionSchedule,
                           noise=None):
    """One posterior step; the t=1 step is deterministic (sigma_1 = 0)."""
    if t < 1:
        raise VoxCityError("ancestral step needs t >= 1")
    a_t = schedule.alphas[t]
    b_t = schedule.betas[t]
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t - 1]
    mean = np.sqrt(a_t) * x_t - b_t * np.sqrt(ab_prev / (1.0 - ab_t)) * v_hat
    var = (1.0 - ab_prev) / (1.0 - ab_t) * b_t
    if t == 1 or noise is None:
        return mean
    return mean + np.sqrt(var) * noise


def reverse_step_ddim(x_t, t: int, t_prev: int, v_hat,
                      schedule: DiffusionSchedule, eta: float = 0.0,
                      noise=None):
    """Deterministic (eta=0) or partially stochastic DDIM update."""
    if not 0 <= t_prev < t:
        raise VoxCityError("need t_prev < t")
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev]
    x0 = x0_from_v(x_t, v_hat, t, schedule)
    eps = eps_from_v(x_t, v_hat, t, schedule)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) \
        * np.sqrt(1.0 - ab_t / ab_prev)
    dir_coeff = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    out = np.sqrt(ab_prev) * x0 + dir_coeff * eps
    if sigma > 0 and noise is not None and t_prev >= 1:
        out = out + sigma * noise
    return out


def ddim_time_grid(timesteps: int, n_steps=None):
    """Strictly decreasing t sequence ending at 0."""
    if n_steps is None or n_steps >= timesteps:
        return list(range(timesteps, 0, -1)) + [0]
    ts = np.unique(np.linspace(0, timesteps, n_steps + 1).round().astype(int))
    return list(ts[::-1])


def time_features(t: int, schedule: DiffusionSchedule) -> np.ndarray:
    """Schedule-aware timestep embedding fed to the denoisers."""
    ab = schedule.alpha_bars[t]
    frac = t / schedule.timesteps
    return np.array([np.sqrt(ab), np.sqrt(1.0 - ab),
                     np.sin(np.pi * frac), np.cos(np.pi * frac),
                     np.sin(2 * np.pi * frac), np.cos(2 * np.pi * frac),
                     np.sin(4 * np.pi * frac), np.cos(4 * np.pi * frac)])


TIME_FEATURES = 8


class DenoiserNet(Module):
    """Per-row residual MLP v-predictor over latent rows plus condition rows."""

    def __init__(self, rng, latent_channels, cond_channels, hidden=64, blocks=2):
        self.net = ResidualMLP(rng, latent_channels + cond_channels + TIME_FEATURES,
                               hidden, latent_channels, blocks=blocks)
        self.latent_channels = latent_channels
        self.cond_channels = cond_channels

    def forward_t(self, x_t: Tensor, t: int, cond: Tensor,
                  schedule: DiffusionSchedule) -> Tensor:
        n = x_t.shape[0]
        temb = Tensor(np.broadcast_to(time_features(t, schedule),
                                      (n, TIME_FEATURES)).copy())
        from .nn.tensor import concat
        return self.net(concat([x_t, cond, temb], axis=1))

    def __call__(self, x_t: np.ndarray, t: int, cond: np.ndarray,
                 schedule: DiffusionSchedule) -> np.ndarray:
        return self.forward_t(Tensor(x_t), t, Tensor(cond), schedule).data


def sample_stage(denoiser, schedule: DiffusionSchedule, shape, condition,
                 rng, sampler="ddim", eta=0.0, ddim_steps=None) -> np.ndarray:
    """Full reverse trajectory from x_T ~ N(0, I); deterministic given rng."""
    x = rng.standard_normal(shape)
    if sampler == "ancestral":
        for t in range(schedule.timesteps, 0, -1):
            v_hat = denoiser(x, t, condition, schedule)
            noise = rng.standard_normal(shape) if t > 1 else None
            x = reverse_step_ancestral(x, t, v_hat, schedule, noise)
        return x
    if sampler != "ddim":
        raise VoxCityError(f"unknown sampler {sampler!r}")
    grid_ts = ddim_time_grid(schedule.timesteps, ddim_steps)
    for t, t_prev in zip(grid_ts, grid_ts[1:]):
        v_hat = denoiser(x, t, condition, schedule)
        noise = rng.standard_normal(shape) if (eta > 0 and t_prev >= 1) else None
        x = reverse_step_ddim(x, t, t_prev, v_hat, schedule, eta, noise)
    return x


# -- cascade ------------------------------------------------------------------


@dataclass
class CascadeModels:
    """Everything generation needs: the two VAEs, condition encoders, and the
    per-stage denoisers (one per appearance level)."""

    cfg: VaeConfig
    dense_vae: DenseVae
    sparse_vae: SparseVae
    cond_height: ConditionEncoder
    cond_grid: GridConditionEncoder
    den_dense: DenoiserNet
    den_sparse: DenoiserNet
    den_color: list

    def components(self):
        out = {"dense_vae": self.dense_vae, "sparse_vae": self.sparse_vae,
               "cond_height": self.cond_height, "cond_grid": self.cond_grid,
               "den_dense": self.den_dense, "den_sparse": self.den_sparse}
        for k, m in enumerate(self.den_color):
            out[f"den_color{k}"] = m
        return out


@dataclass
class CascadeOutput:
    grid: SparseGrid          # colorized: occupancy + normal + color channels
    trace: PruneTrace
    stage1_grid: SparseGrid
    decoded_levels: list
    latents: dict = field(default_factory=dict)


TRACE_COND_FEATURES = 2


def build_models(rng, cfg: VaeConfig, hidden=64, blocks=2,
                 share_color_models=False) -> CascadeModels:
    n_levels = cfg.n_levels
    if share_color_models:
        one = DenoiserNet(rng, cfg.color_channels, TRACE_COND_FEATURES,
                          hidden=hidden, blocks=blocks)
        den_color = [one] * (n_levels + 1)
    else:
        den_color = [DenoiserNet(rng, cfg.color_channels, TRACE_COND_FEATURES,
                                 hidden=hidden, blocks=blocks)
                     for _ in range(n_levels + 1)]
    return CascadeModels(
        cfg=cfg,
        dense_vae=DenseVae(rng, cfg),
        sparse_vae=SparseVae(rng, cfg),
        cond_height=ConditionEncoder(rng, cfg),
        cond_grid=GridConditionEncoder(rng, cfg),
        den_dense=DenoiserNet(rng, cfg.latent_channels, 1 + cfg.hidden,
                              hidden=hidden, blocks=blocks),
        den_sparse=DenoiserNet(rng, cfg.latent_channels, cfg.hidden,
                               hidden=hidden, blocks=blocks),
        den_color=den_color,
    )


def trace_condition_features(trace: PruneTrace, support: SparseGrid):
    """Per-vertex conditioning derived only from the pruning trace: local
    density of the traced fine occupancy at the final and middle steps."""
    feats = np.zeros((support.n_voxels, TRACE_COND_FEATURES))
    for col, step in enumerate((trace.n_steps, trace.n_steps // 2)):
        spec_f = trace.spec_at(step)
        voxels = trace.level_voxels(step)
        if voxels.shape[0] == 0:
            continue
        centers = spec_f.voxel_centers(voxels)
        cells = kernels.bin_points(centers, support.spec.origin_array,
                                   support.spec.voxel_size)
        rows = support.voxel_rows(cells)
        counts = np.bincount(rows[rows >= 0], minlength=support.n_voxels)
        capacity = (support.spec.voxel_size / spec_f.voxel_size) ** 3
        feats[:, col] = counts / capacity
    rows, weights = incident_voxel_stencil(support)
    return kernels.sample_gather(rows, weights, feats)


def appearance_supports(trace: PruneTrace, cfg: VaeConfig):
    """Bottleneck supports of the appearance levels, chained covers of the
    traced base occupancy."""
    base = SparseGrid(trace.base_spec.as_base(), trace.base_voxels)
    supports = [base]
    for k in range(1, cfg.n_levels + 1):
        spec_k = appearance_level_spec(base.spec, k, cfg.hierarchy_mode)
        prev = supports[-1]
        supports.append(SparseGrid(spec_k, cover_voxels(prev.voxels, prev.spec,
                                                        spec_k)))
    return supports


def _grid_with_normals(result) -> SparseGrid:
    layout = ChannelLayout.of(("normal", 3))
    return result.grid.with_vertex_attrs(result.normals.data, layout)


def cascade(height_points: PointCloud, models: CascadeModels,
            schedule: DiffusionSchedule, input_spec: GridSpec, rng,
            sampler="ddim", eta=0.0, ddim_steps=None,
            skip_dense=False, skip_sparse=False) -> CascadeOutput:
    """Height-field point cloud -> colorized sparse voxel grid.

    Stage 1 samples the dense geometry latent conditioned on the encoded
    height points and decodes the first grid; stage 2 samples the sparse
    latent conditioned on that grid and records the pruning trace; stage 3
    samples each appearance level conditioned on the trace and decodes
    per-vertex colors via inverse sampling. The skip flags implement the
    cascade ablations (a skipped stage hands its duty to the neighbor).
    """
    if len(height_points) == 0:
        raise EmptyInputError("empty input")
    if skip_dense and skip_sparse:
        raise VoxCityError("cannot skip both geometry stages")
    latents = {}

    if skip_dense:
        # ablation path: sparse stage conditioned on the raw height occupancy
        from .grid import voxelize
        raw = voxelize(height_points, input_spec)
        grid1 = raw.with_vertex_attrs(np.zeros((raw.n_vertices, 3)),
                                      ChannelLayout.of(("normal", 3)))
        res1 = None
    else:
        grid1, res1 = _stage_dense(height_points, models, schedule, input_spec,
                                   rng, sampler, eta, ddim_steps, latents)

    if skip_sparse:
        grid2, trace = grid1, res1.trace
        trace.validate()
    else:
        grid2, trace, _ = _stage_sparse(grid1, models, schedule, rng, sampler,
                                        eta, ddim_steps, latents)
    colored = _stage_appearance(trace, grid2, models, schedule, rng, sampler,
                                eta, ddim_steps, latents)
    return CascadeOutput(grid=colored.grid, trace=trace, stage1_grid=grid1,
                         decoded_levels=colored.levels, latents=latents)


def _stage_dense(height_points, models, schedule, input_spec, rng, sampler,
                 eta, ddim_steps, latents):
    """p(X_D | encoded height field) then dense decode to the first grid."""
    cfg = models.cfg
    support, feats = models.cond_height(height_points, input_spec)
    if support.is_empty:
        raise DegenerateOutputError("dense")
    box = dense_bbox(support, cfg.dense_pad)
    carrier = SparseGrid(support.spec, support.voxels,
                         voxel_attrs=feats.data,
                         voxel_layout=ChannelLayout.of(("cond", cfg.hidden)))
    cond_vol = densify(carrier, box)
    n_cells = int(np.prod(cond_vol.shape3))
    cond_rows = cond_vol.data.reshape(n_cells, -1)
    x_d = sample_stage(
        lambda x, t, c, s: models.den_dense(x, t, c, s),
        schedule, (n_cells, cfg.latent_channels), cond_rows, rng,
        sampler=sampler, eta=eta, ddim_steps=ddim_steps)
    latents["dense"] = x_d
    vol = Tensor(x_d.reshape(cond_vol.shape3 + (cfg.latent_channels,)))
    result = models.dense_vae.decode_volume(vol, cond_vol.lo, support.spec)
    if result.degenerate or result.grid.is_empty:
        raise DegenerateOutputError("dense")
    return _grid_with_normals(result), result


def _stage_sparse(grid1: SparseGrid, models, schedule, rng, sampler, eta,
                  ddim_steps, latents):
    """p(X_S | first grid); decode records the pruning trace."""
    cfg = models.cfg
    bottleneck, cond_feats = models.cond_grid(grid1)
    if bottleneck.is_empty:
        raise DegenerateOutputError("sparse")
    x_s = sample_stage(
        lambda x, t, c, s: models.den_sparse(x, t, c, s),
        schedule, (bottleneck.n_vertices, cfg.latent_channels),
        cond_feats.data, rng, sampler=sampler, eta=eta, ddim_steps=ddim_steps)
    latents["sparse"] = x_s
    result = models.sparse_vae.decode_geometry(bottleneck, Tensor(x_s))
    if result.degenerate or result.grid.is_empty:
        raise DegenerateOutputError("sparse")
    result.trace.validate()
    return _grid_with_normals(result), result.trace, result


@dataclass
class _ColoredStage:
    grid: SparseGrid
    levels: list


def _stage_appearance(trace: PruneTrace, grid2: SparseGrid, models, schedule,
                      rng, sampler, eta, ddim_steps, latents) -> _ColoredStage:
    """prod_k p(X_Ck | trace), decode levels, inverse-sample vertex colors."""
    cfg = models.cfg
    supports = appearance_supports(trace, cfg)
    level_latents = []
    for k, support in enumerate(supports):
        cond = trace_condition_features(trace, support)
        x_ck = sample_stage(
            lambda x, t, c, s, k=k: models.den_color[k](x, t, c, s),
            schedule, (support.n_vertices, cfg.color_channels), cond, rng,
            sampler=sampler, eta=eta, ddim_steps=ddim_steps)
        latents[f"color{k}"] = x_ck
        level_latents.append((support, Tensor(x_ck)))
    decoded = models.sparse_vae.decode_color_levels(level_latents, trace)
    colors = models.sparse_vae.predict_colors(
        decoded, grid2.vertex_positions()).data
    layout = ChannelLayout(grid2.layout.names + ("color",),
                           grid2.layout.widths + (3,))
    attrs = np.hstack([grid2.vertex_attrs, colors])
    grid = grid2.with_vertex_attrs(attrs, layout,
                                   untouched=grid2.vertex_untouched)
    return _ColoredStage(grid=grid, levels=decoded)
