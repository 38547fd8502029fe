"""End-to-end orchestration: scene preparation, the two VAE training loops,
per-stage diffusion training, generation to a colored mesh, evaluation, and
the desk-scale overfit smoke harness with its ablation variants.

Training is deterministic: fixed scene order, seeded noise, sequential
gradient accumulation. Logs are append-only JSON lines so loss curves can be
reconstructed after a crash.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .attrib import splat_channel
from .cloud import PointCloud
from .config import RunConfig
from .dataset import (CityParams, HeightMap, elevate, generate_city,
                      perturb_heightmap, render_heightmap)
from .diffusion import (CascadeModels, CascadeOutput, DiffusionSchedule,
                        appearance_supports, build_models, cascade,
                        forward_noise, trace_condition_features, v_target)
from .errors import VoxCityError
from .fileio import load_ply, save_ply
from .grid import GridSpec, SparseGrid, load_grid, save_grid, voxelize
from .mesh import Mesh, extract_mesh, save_mesh_obj, save_mesh_ply
from .metrics import chamfer, cov, emd, mmd, sample_surface
from .nn import Adam, Tensor, load_checkpoint, save_checkpoint
from .nn.losses import LossWeights, l1_loss
from .nn.vae import (VaeOutput, dense_bbox, loss_dense, loss_sparse,
                     occupancy_pyramid, scatter_latent_volume)


@dataclass
class Scene:
    name: str
    points: PointCloud        # colorized cloud with normals
    grid: SparseGrid          # voxelized, "normal" vertex channel
    heightmap: HeightMap
    cond_points: PointCloud   # elevated height field


def prepare_scene(name: str, points: PointCloud, cfg: RunConfig,
                  perturb: bool = True) -> Scene:
    spec = GridSpec(cfg.voxel_size)
    grid = voxelize(points, spec)
    grid = splat_channel(points, grid, points.normals, "normal")
    z_max = float(points.positions[:, 2].max())
    hm = render_heightmap(points, cfg.dataset.gsd, z_range=(0.0, z_max))
    if perturb and (cfg.dataset.contrast != 1.0
                    or cfg.dataset.ambient_amplitude > 0.0):
        hm = perturb_heightmap(hm, cfg.dataset.contrast,
                               seed=cfg.dataset.scene_seed,
                               ambient_amplitude=cfg.dataset.ambient_amplitude)
    return Scene(name, points, grid, hm, elevate(hm))


def synthetic_scenes(cfg: RunConfig, n: int | None = None):
    n = n if n is not None else cfg.dataset.n_scenes
    params = CityParams(extent_xy=cfg.dataset.extent_xy,
                        n_buildings=cfg.dataset.n_buildings,
                        n_points=cfg.dataset.n_points,
                        height_range=cfg.dataset.height_range)
    return [prepare_scene(f"scene{i:03d}",
                          generate_city(cfg.dataset.scene_seed + i, params), cfg)
            for i in range(n)]


def occupancy_iou(a: SparseGrid, b: SparseGrid) -> float:
    if a.is_empty and b.is_empty:
        return 1.0
    if a.is_empty or b.is_empty:
        return 0.0
    inter = int(np.count_nonzero(b.contains_voxels(a.voxels)))
    union = a.n_voxels + b.n_voxels - inter
    return inter / union


class JsonlLogger:
    """Append-only JSON-lines training log (crash-safe curves)."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def log(self, **row):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")


def _sample_z(mu, logvar, rng):
    eps = rng.standard_normal(mu.shape)
    return mu + (logvar * 0.5).exp() * Tensor(eps)


def _color_supervision(scene: Scene, rng, max_points=4000):
    n = len(scene.points)
    if n <= max_points:
        return scene.points.positions, scene.points.colors
    idx = np.sort(rng.choice(n, size=max_points, replace=False))
    return scene.points.positions[idx], scene.points.colors[idx]


def train_vaes(scenes, models: CascadeModels, cfg: RunConfig,
               logger: JsonlLogger | None = None) -> dict:
    """Both VAE loops; the sparse color term activates at the dual-stage
    epoch. Returns the loss history."""
    logger = logger or JsonlLogger()
    vcfg = models.cfg
    weights = LossWeights()
    steps = vcfg.pool_steps
    pyramids = [occupancy_pyramid(s.grid, steps) for s in scenes]
    rng = np.random.default_rng(cfg.seed)
    color_sets = [_color_supervision(s, rng) for s in scenes]
    splat_targets = None
    if cfg.train.color_mode == "splat":
        splat_targets = [splat_channel(s.points, s.grid, s.points.colors,
                                       "colortarget") for s in scenes]

    history = {"dense": [], "sparse": [], "color": []}

    opt_d = Adam(models.dense_vae.named_parameters(), lr=cfg.train.vae_lr)
    for epoch in range(cfg.train.vae_epochs):
        total = 0.0
        for scene, pyramid in zip(scenes, pyramids):
            opt_d.zero_grad()
            _, bottleneck, mu, logvar = models.dense_vae.encode(scene.grid)
            z = _sample_z(mu, logvar, rng)
            box = dense_bbox(pyramid[-1], vcfg.dense_pad)
            vol = scatter_latent_volume(bottleneck, z, box)
            result = models.dense_vae.decode_volume(vol, box[0],
                                                    bottleneck.spec,
                                                    teacher=pyramid)
            out = VaeOutput(mu, logvar, result)
            loss, parts = loss_dense(out, scene.grid, weights)
            loss.backward()
            opt_d.step()
            total += float(loss.data)
        history["dense"].append(total / len(scenes))
        logger.log(phase="vae_dense", epoch=epoch, loss=total / len(scenes))

    opt_s = Adam(models.sparse_vae.named_parameters(), lr=cfg.train.vae_lr)
    for epoch in range(cfg.train.vae_epochs):
        total, color_total, color_n = 0.0, 0.0, 0
        for idx, (scene, pyramid) in enumerate(zip(scenes, pyramids)):
            opt_s.zero_grad()
            _, bottleneck, mu, logvar = models.sparse_vae.encode(scene.grid)
            z = _sample_z(mu, logvar, rng)
            result = models.sparse_vae.decode_geometry(bottleneck, z,
                                                       teacher=pyramid)
            out = VaeOutput(mu, logvar, result)
            if epoch >= vcfg.dual_stage_epoch:
                levels = models.sparse_vae.appearance_levels(bottleneck, z)
                decoded = models.sparse_vae.decode_color_levels(levels,
                                                                result.trace)
                if cfg.train.color_mode == "splat":
                    target_grid = splat_targets[idx]
                    out.pred_colors = models.sparse_vae.predict_colors(
                        decoded, target_grid.vertex_positions())
                    out.color_targets = target_grid.channel("colortarget")
                else:
                    positions, colors = color_sets[idx]
                    out.pred_colors = models.sparse_vae.predict_colors(
                        decoded, positions)
                    out.color_targets = colors
            loss, parts = loss_sparse(out, scene.grid, epoch, weights,
                                      dual_stage_epoch=vcfg.dual_stage_epoch)
            loss.backward()
            opt_s.step()
            total += float(loss.data)
            if "color" in parts:
                color_total += float(parts["color"].data)
                color_n += 1
        history["sparse"].append(total / len(scenes))
        row = {"phase": "vae_sparse", "epoch": epoch,
               "loss": total / len(scenes)}
        if color_n:
            history["color"].append(color_total / color_n)
            row["color_loss"] = color_total / color_n
        logger.log(**row)
    return history


def scene_latents(scene: Scene, pyramid, models: CascadeModels,
                  cfg: RunConfig) -> dict:
    """Frozen-VAE target latents for diffusion training (x0 = posterior
    mean by default)."""
    vcfg = models.cfg
    out = {}
    _, bottleneck_d, mu_d, logvar_d = models.dense_vae.encode(scene.grid)
    box = dense_bbox(pyramid[-1], vcfg.dense_pad)
    vol = scatter_latent_volume(bottleneck_d, mu_d, box)
    n_cells = int(np.prod(vol.shape[:3]))
    out["dense_x0"] = vol.data.reshape(n_cells, vcfg.latent_channels).copy()
    out["dense_box"] = box

    _, bottleneck_s, mu_s, logvar_s = models.sparse_vae.encode(scene.grid)
    out["sparse_x0"] = mu_s.data.copy()
    out["sparse_support"] = bottleneck_s

    trace = _teacher_trace(pyramid)
    out["trace"] = trace
    supports = appearance_supports(trace, vcfg)
    levels = models.sparse_vae.appearance_levels(bottleneck_s, mu_s)
    out["color_x0"] = [feats.data.copy() for _, feats in levels]
    out["color_supports"] = supports
    out["color_cond"] = [trace_condition_features(trace, sup)
                         for sup in supports]
    return out


def _teacher_trace(pyramid):
    from .grid import PruneTrace
    trace = PruneTrace(pyramid[-1].spec, pyramid[-1].voxels)
    for level in reversed(pyramid[:-1]):
        trace.push(level.voxels)
    return trace


def train_diffusion(scenes, models: CascadeModels, schedule: DiffusionSchedule,
                    cfg: RunConfig, logger: JsonlLogger | None = None) -> dict:
    """v-regression per stage; condition encoders train jointly with their
    denoiser."""
    logger = logger or JsonlLogger()
    vcfg = models.cfg
    steps = vcfg.pool_steps
    pyramids = [occupancy_pyramid(s.grid, steps) for s in scenes]
    latents = [scene_latents(s, p, models, cfg)
               for s, p in zip(scenes, pyramids)]
    rng = np.random.default_rng(cfg.seed + 1)
    history = {}

    def run_stage(name, den, x0_list, cond_fn, extra_params=None):
        params = dict(den.named_parameters())
        for prefix, mod in (extra_params or {}).items():
            params.update({f"{prefix}.{k}": v
                           for k, v in mod.named_parameters().items()})
        opt = Adam(params, lr=cfg.train.diffusion_lr)
        losses = []
        for step in range(cfg.train.diffusion_steps):
            i = step % len(scenes)
            x0 = x0_list[i]
            t = int(rng.integers(1, schedule.timesteps + 1))
            eps = rng.standard_normal(x0.shape)
            x_t = forward_noise(x0, t, eps, schedule)
            target = v_target(x0, eps, t, schedule)
            opt.zero_grad()
            cond = cond_fn(i)
            v_hat = den.forward_t(Tensor(x_t), t, cond, schedule)
            loss = ((v_hat - Tensor(target)) ** 2).mean()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            if cfg.train.log_every and step % max(cfg.train.log_every * 50, 1) == 0:
                logger.log(phase=f"diff_{name}", step=step, loss=losses[-1])
        history[name] = losses
        logger.log(phase=f"diff_{name}", step=cfg.train.diffusion_steps,
                   loss=float(np.mean(losses[-20:])))

    def dense_cond(i):
        support, feats = models.cond_height(scenes[i].cond_points,
                                            scenes[i].grid.spec)
        box = latents[i]["dense_box"]
        from .grid import ChannelLayout, densify
        # fixed support embedding; learned features flow through the graph
        lo, hi = box
        shape3 = tuple((hi - lo).tolist())
        rel = support.voxels.astype(np.int64) - lo
        inside = np.all((rel >= 0) & (rel < (hi - lo)), axis=1)
        flat = np.ravel_multi_index(
            (rel[inside, 0], rel[inside, 1], rel[inside, 2]), shape3)
        from .nn.tensor import weighted_scatter
        keep_rows = np.flatnonzero(inside)
        feats_in = feats.take_rows(keep_rows)
        occ = weighted_scatter(Tensor(np.ones((flat.size, 1))), flat[:, None],
                               np.ones((flat.size, 1)), int(np.prod(shape3)))
        emb = weighted_scatter(feats_in, flat[:, None],
                               np.ones((flat.size, 1)), int(np.prod(shape3)))
        from .nn.tensor import concat
        return concat([occ, emb], axis=1)

    def sparse_cond(i):
        bottleneck, cond = models.cond_grid(scenes[i].grid)
        if not np.array_equal(bottleneck.voxels,
                              latents[i]["sparse_support"].voxels):
            raise VoxCityError("condition support diverged from latent support")
        return cond

    run_stage("dense", models.den_dense,
              [lat["dense_x0"] for lat in latents], dense_cond,
              extra_params={"cond_height": models.cond_height})
    run_stage("sparse", models.den_sparse,
              [lat["sparse_x0"] for lat in latents], sparse_cond,
              extra_params={"cond_grid": models.cond_grid})
    for k in range(vcfg.n_levels + 1):
        run_stage(f"color{k}", models.den_color[k],
                  [lat["color_x0"][k] for lat in latents],
                  lambda i, k=k: Tensor(latents[i]["color_cond"][k]))
    return history


def reconstruct(scene: Scene, models: CascadeModels) -> SparseGrid:
    """Deterministic mean-latent reconstruction (no diffusion): the quality
    ceiling of the cascade on a training scene."""
    vcfg = models.cfg
    pyramid = occupancy_pyramid(scene.grid, vcfg.pool_steps)
    _, bottleneck, mu, _ = models.sparse_vae.encode(scene.grid)
    result = models.sparse_vae.decode_geometry(bottleneck, mu)
    if result.degenerate:
        return result.grid
    levels = models.sparse_vae.appearance_levels(bottleneck, mu)
    decoded = models.sparse_vae.decode_color_levels(levels, result.trace)
    colors = models.sparse_vae.predict_colors(
        decoded, result.grid.vertex_positions()).data
    from .grid import ChannelLayout
    attrs = np.hstack([result.normals.data, colors])
    return result.grid.with_vertex_attrs(
        attrs, ChannelLayout.of(("normal", 3), ("color", 3)))


def generate(heightmap: HeightMap, models: CascadeModels,
             schedule: DiffusionSchedule, cfg: RunConfig, seed: int,
             skip_dense=False, skip_sparse=False):
    """Inference: height map -> elevated points -> cascade -> colored mesh."""
    cond_points = elevate(heightmap)
    rng = np.random.default_rng(seed)
    out = cascade(cond_points, models, schedule, GridSpec(cfg.voxel_size), rng,
                  sampler=cfg.diffusion.sampler, eta=cfg.diffusion.eta,
                  ddim_steps=cfg.diffusion.ddim_steps, skip_dense=skip_dense,
                  skip_sparse=skip_sparse)
    return out, extract_mesh(out.grid)


def predicted_point_colors(out: CascadeOutput, models: CascadeModels,
                           positions) -> np.ndarray:
    return models.sparse_vae.predict_colors(out.decoded_levels, positions).data


def evaluate_sets(gen_clouds, ref_clouds, seed=0) -> list:
    """MMD and COV under both CD and EMD; rows for the CSV report."""
    if not gen_clouds or not ref_clouds:
        raise VoxCityError("evaluation needs non-empty sets")
    rows = []
    for metric, dist in (("cd", chamfer), ("emd", _emd_subsampled)):
        rows.append({"metric": f"mmd_{metric}",
                     "value": mmd(gen_clouds, ref_clouds, dist),
                     "n_gen": len(gen_clouds), "n_ref": len(ref_clouds),
                     "seed": seed})
        rows.append({"metric": f"cov_{metric}",
                     "value": cov(gen_clouds, ref_clouds, dist),
                     "n_gen": len(gen_clouds), "n_ref": len(ref_clouds),
                     "seed": seed})
    return rows


EMD_EVAL_POINTS = 512


def _emd_subsampled(a, b, n=EMD_EVAL_POINTS):
    pa = a.positions if isinstance(a, PointCloud) else np.asarray(a)
    pb = b.positions if isinstance(b, PointCloud) else np.asarray(b)
    rng = np.random.default_rng(0)
    if len(pa) > n:
        pa = pa[rng.choice(len(pa), size=n, replace=False)]
    if len(pb) > n:
        pb = pb[np.random.default_rng(1).choice(len(pb), size=n, replace=False)]
    m = min(len(pa), len(pb))
    return emd(pa[:m], pb[:m])


def load_eval_cloud(path, n_points=10_000, seed=0) -> PointCloud:
    """A PLY cloud directly, or a VXC1 grid surface-sampled to n points."""
    path = os.fspath(path)
    if path.endswith(".ply"):
        return load_ply(path)
    if path.endswith(".vxc"):
        return sample_surface(load_grid(path), n=n_points, seed=seed)
    raise VoxCityError(f"{path}: expected .ply or .vxc")


def evaluate_dirs(gen_dir, ref_dir, out_csv=None, n_points=10_000, seed=0):
    def clouds_of(directory):
        names = sorted(f for f in os.listdir(directory)
                       if f.endswith((".ply", ".vxc")))
        if not names:
            raise VoxCityError(f"no .ply/.vxc files in {directory}")
        return [load_eval_cloud(os.path.join(directory, f), n_points, seed)
                for f in names]

    rows = evaluate_sets(clouds_of(gen_dir), clouds_of(ref_dir), seed=seed)
    if out_csv:
        write_metrics_csv(out_csv, rows)
    return rows


def write_metrics_csv(path, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["metric", "value", "n_gen",
                                               "n_ref", "seed"])
        writer.writeheader()
        writer.writerows(rows)


# -- model persistence ---------------------------------------------------------


def save_models(run_dir, models: CascadeModels, cfg: RunConfig):
    from .config import dump_config
    ckpt_dir = os.path.join(run_dir, "ckpts")
    os.makedirs(ckpt_dir, exist_ok=True)
    for name, module in models.components().items():
        save_checkpoint(os.path.join(ckpt_dir, f"{name}.npz"), module)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        f.write(dump_config(cfg))


def load_models(run_dir, cfg: RunConfig) -> CascadeModels:
    rng = np.random.default_rng(cfg.seed)
    models = build_models(rng, cfg.vae, hidden=cfg.diffusion.hidden,
                          blocks=cfg.diffusion.blocks,
                          share_color_models=cfg.diffusion.share_color_models)
    ckpt_dir = os.path.join(run_dir, "ckpts")
    for name, module in models.components().items():
        load_checkpoint(os.path.join(ckpt_dir, f"{name}.npz"), module)
    return models


# -- smoke harness and ablations -------------------------------------------------


def train_all(cfg: RunConfig, scenes=None, logger=None):
    scenes = scenes or synthetic_scenes(cfg)
    models = build_models(np.random.default_rng(cfg.seed), cfg.vae,
                          hidden=cfg.diffusion.hidden,
                          blocks=cfg.diffusion.blocks,
                          share_color_models=cfg.diffusion.share_color_models)
    schedule = DiffusionSchedule.linear(cfg.diffusion.timesteps,
                                        cfg.diffusion.beta_start,
                                        cfg.diffusion.beta_end)
    vae_history = train_vaes(scenes, models, cfg, logger)
    diff_history = train_diffusion(scenes, models, schedule, cfg, logger)
    return scenes, models, schedule, {"vae": vae_history, "diffusion": diff_history}


def smoke_config(**overrides) -> RunConfig:
    """Desk-scale overfit configuration: 3 small scenes, T=50, 2 levels."""
    from .nn.vae import VaeConfig
    from .config import DatasetConfig, DiffusionConfig, TrainConfig
    cfg = RunConfig(
        seed=0,
        voxel_size=1.0,
        vae=VaeConfig(hidden=24, latent_channels=6, color_channels=4,
                      levels=2, downsample=4, head_hidden=48, head_layers=2,
                      dual_stage_epoch=12),
        diffusion=DiffusionConfig(timesteps=50, beta_start=1e-4, beta_end=0.02,
                                  sampler="ddim", hidden=64, blocks=2),
        train=TrainConfig(vae_epochs=60, vae_lr=2e-3, diffusion_steps=1200,
                          diffusion_lr=2e-3),
        dataset=DatasetConfig(n_scenes=3, extent_xy=24.0, n_buildings=5,
                              n_points=9000, height_range=(3.0, 10.0)),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def overfit_smoke(cfg: RunConfig | None = None, run_dir=None) -> dict:
    """Memorize a few synthetic scenes end to end and score the generation
    against ground truth (occupancy IoU and color L1 at the scene points)."""
    cfg = cfg or smoke_config()
    logger = JsonlLogger(os.path.join(run_dir, "logs", "train.jsonl")
                         if run_dir else None)
    scenes, models, schedule, history = train_all(cfg, logger=logger)
    report = {"scenes": [], "history": {
        "vae_dense_final": history["vae"]["dense"][-1],
        "vae_sparse_final": history["vae"]["sparse"][-1],
        "color_final": history["vae"]["color"][-1] if history["vae"]["color"]
        else None}}
    for i, scene in enumerate(scenes):
        out, mesh = generate(scene.heightmap, models, schedule, cfg,
                             seed=cfg.seed + 100 + i)
        iou = occupancy_iou(out.grid, scene.grid)
        inside = out.grid.contains_voxels(
            np.floor((scene.points.positions - out.grid.spec.origin_array)
                     / out.grid.spec.voxel_size).astype(np.int64))
        if inside.any():
            pred = predicted_point_colors(out, models,
                                          scene.points.positions[inside])
            color_l1 = float(np.mean(np.abs(pred - scene.points.colors[inside])))
        else:
            color_l1 = 1.0
        report["scenes"].append({"name": scene.name, "iou": iou,
                                 "color_l1": color_l1,
                                 "coverage": float(inside.mean()),
                                 "n_voxels": int(out.grid.n_voxels)})
        if run_dir:
            os.makedirs(os.path.join(run_dir, "samples"), exist_ok=True)
            save_grid(os.path.join(run_dir, "samples", f"{scene.name}.vxc"),
                      out.grid)
            save_mesh_ply(os.path.join(run_dir, "samples", f"{scene.name}.ply"),
                          mesh)
    report["iou_min"] = min(s["iou"] for s in report["scenes"])
    report["color_l1_mean"] = float(np.mean([s["color_l1"]
                                             for s in report["scenes"]]))
    if run_dir:
        save_models(run_dir, models, cfg)
        with open(os.path.join(run_dir, "report.json"), "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
    return report


ABLATION_MODES = ("shared-latent", "dual-dense", "rehash", "no-dense",
                  "no-sparse", "direct-splat")


def ablation_config(mode: str, base: RunConfig | None = None) -> RunConfig:
    import copy
    cfg = copy.deepcopy(base or smoke_config())
    if mode == "shared-latent":
        cfg.vae.shared_latent = True
        cfg.vae.dual_stage_epoch = 0
    elif mode == "dual-dense":
        cfg.vae.hierarchy_mode = "plain"
    elif mode == "rehash":
        pass
    elif mode == "direct-splat":
        cfg.train.color_mode = "splat"
    elif mode in ("no-dense", "no-sparse"):
        pass  # cascade-time flags
    else:
        raise VoxCityError(f"unknown ablation mode {mode!r}; "
                           f"choose from {ABLATION_MODES}")
    return cfg


def ablate(mode: str, base: RunConfig | None = None, run_dir=None) -> dict:
    """Train under an ablation variant and report the color-loss trajectory
    (cascade ablations additionally generate with stages disabled)."""
    cfg = ablation_config(mode, base)
    logger = JsonlLogger(os.path.join(run_dir, "logs", f"{mode}.jsonl")
                         if run_dir else None)
    scenes = synthetic_scenes(cfg)
    if mode in ("no-dense", "no-sparse"):
        scenes, models, schedule, history = train_all(cfg, scenes, logger)
        out, _ = generate(scenes[0].heightmap, models, schedule, cfg,
                          seed=cfg.seed + 500,
                          skip_dense=(mode == "no-dense"),
                          skip_sparse=(mode == "no-sparse"))
        return {"mode": mode,
                "iou": occupancy_iou(out.grid, scenes[0].grid),
                "color_history": history["vae"]["color"]}
    models = build_models(np.random.default_rng(cfg.seed), cfg.vae,
                          hidden=cfg.diffusion.hidden,
                          blocks=cfg.diffusion.blocks)
    history = train_vaes(scenes, models, cfg, logger)
    return {"mode": mode, "color_history": history["color"],
            "final_color_loss": history["color"][-1] if history["color"]
            else None}
