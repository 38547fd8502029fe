import numpy as np
import pytest

from voxcity.attrib import splat_channel
from voxcity.cloud import PointCloud
from voxcity.grid import ChannelLayout, GridSpec, SparseGrid, voxelize
from voxcity.nn import (Adam, MLP, Tensor, bce_with_logits, concat, gaussian_kl,
                        l1_loss, segment_max, segment_mean, segment_sum,
                        weighted_gather, weighted_scatter)
from voxcity.nn.losses import LossWeights
from voxcity.nn.vae import (SparseVae, VaeConfig, VaeOutput, loss_dense,
                            loss_sparse, occupancy_pyramid, DecodeResult)
from voxcity.grid import PruneTrace

H = 1e-4


def numeric_grad(fn, arrays, which, h=H):
    """Central differences of scalar fn w.r.t. arrays[which]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[which])
    flat = g.reshape(-1)
    for i in range(flat.size):
        for sign in (+1, -1):
            pert = [a.copy() for a in base]
            pert[which].reshape(-1)[i] += sign * h
            val = fn(pert)
            flat[i] += sign * val / (2 * h)
    return g


def check_gradients(build, seed, tol=1e-4):
    """build(rng) -> (input arrays, fn mapping tensors -> scalar Tensor)."""
    rng = np.random.default_rng(seed)
    arrays, fn = build(rng)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(tensors).backward()
    worst = 0.0
    for which, t in enumerate(tensors):
        num = numeric_grad(lambda arrs: float(fn([Tensor(a) for a in arrs]).data),
                           arrays, which)
        got = t.grad if t.grad is not None else np.zeros_like(num)
        err = np.abs(got - num) / np.maximum(np.abs(got) + np.abs(num), 1.0)
        worst = max(worst, float(err.max()))
    assert worst < tol, f"gradient mismatch {worst:.2e}"
    return worst


def away(rng, shape, margin=0.2):
    """Random values bounded away from zero (keeps kinks out of reach of h)."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


def op_builders():
    """Every differentiable op; all randomness is frozen at build time so the
    loss is a pure function of the input tensors."""

    def unary(make_input, apply):
        def build(rng):
            x = make_input(rng)
            r = Tensor(rng.normal(size=np.shape(apply(Tensor(x)).data)))
            return [x], lambda t: (apply(t[0]) * r).sum()
        return build

    def binary(make_a, make_b, op, out_shape):
        def build(rng):
            a, b = make_a(rng), make_b(rng)
            r = Tensor(rng.normal(size=out_shape))
            return [a, b], lambda t: (op(t[0], t[1]) * r).sum()
        return build

    def build_weighted_gather(rng):
        x = rng.normal(size=(7, 3))
        rows = rng.integers(-1, 7, size=(5, 8))
        w = rng.uniform(0, 1, size=(5, 8))
        r = Tensor(rng.normal(size=(5, 3)))
        return [x], lambda t: (weighted_gather(t[0], rows, w) * r).sum()

    def build_weighted_scatter(rng):
        x = rng.normal(size=(5, 3))
        rows = rng.integers(-1, 7, size=(5, 8))
        w = rng.uniform(0, 1, size=(5, 8))
        r = Tensor(rng.normal(size=(7, 3)))
        return [x], lambda t: (weighted_scatter(t[0], rows, w, 7) * r).sum()

    def build_segment(op):
        def build(rng):
            x = rng.normal(size=(8, 2))
            seg = rng.integers(0, 3, size=8)
            r = Tensor(rng.normal(size=(3, 2)))
            return [x], lambda t: (op(t[0], seg, 3) * r).sum()
        return build

    def build_bce(rng):
        logits = rng.normal(size=(10,)) * 3
        targets = rng.integers(0, 2, size=10).astype(float)
        return [logits], lambda t: bce_with_logits(t[0], targets) * 5.0

    def build_l1(rng):
        x = away(rng, (6, 3))
        target = rng.normal(size=(6, 3))
        w = rng.integers(0, 2, size=6).astype(float)
        w[0] = 1.0  # keep at least one active row
        return [x], lambda t: l1_loss(t[0], target, weights=w) * 2.0

    def build_takerows(rng):
        x = rng.normal(size=(6, 3))
        r = Tensor(rng.normal(size=(4, 3)))
        idx = np.array([0, 2, 2, 5])
        return [x], lambda t: (t[0].take_rows(idx) * r).sum()

    def build_mlp(rng):
        mlp = MLP(np.random.default_rng(0), [3, 8, 2])
        x = rng.normal(size=(5, 3))
        r = Tensor(rng.normal(size=(5, 2)))
        return [x], lambda t: (mlp(t[0]) * r).sum()

    return {
        "add_broadcast": binary(lambda r: r.normal(size=(3, 4)),
                                lambda r: r.normal(size=(1, 4)),
                                lambda a, b: a + b, (3, 4)),
        "sub": binary(lambda r: r.normal(size=(2, 3)),
                      lambda r: r.normal(size=(2, 3)),
                      lambda a, b: a - b, (2, 3)),
        "mul_broadcast": binary(lambda r: r.normal(size=(3, 4)),
                                lambda r: r.normal(size=(3, 1)),
                                lambda a, b: a * b, (3, 4)),
        "div": binary(lambda r: r.normal(size=(3, 3)),
                      lambda r: away(r, (3, 3), 0.5),
                      lambda a, b: a / b, (3, 3)),
        "matmul": binary(lambda r: r.normal(size=(3, 4)),
                         lambda r: r.normal(size=(4, 2)),
                         lambda a, b: a @ b, (3, 2)),
        "gaussian_kl": binary(lambda r: r.normal(size=(4, 3)),
                              lambda r: r.normal(size=(4, 3)) * 0.3,
                              lambda a, b: gaussian_kl(a, b).reshape(1, 1), (1, 1)),
        "pow": unary(lambda r: np.abs(r.normal(size=(3, 3))) + 0.5,
                     lambda x: x ** 3),
        "exp": unary(lambda r: r.normal(size=(2, 5)), lambda x: x.exp()),
        "log": unary(lambda r: np.abs(r.normal(size=(2, 5))) + 0.5,
                     lambda x: x.log()),
        "sqrt": unary(lambda r: np.abs(r.normal(size=(2, 5))) + 0.5,
                      lambda x: x.sqrt()),
        "tanh": unary(lambda r: r.normal(size=(2, 5)), lambda x: x.tanh()),
        "relu": unary(lambda r: away(r, (2, 5)), lambda x: x.relu()),
        "sigmoid": unary(lambda r: r.normal(size=(2, 5)), lambda x: x.sigmoid()),
        "softplus": unary(lambda r: r.normal(size=(2, 5)),
                          lambda x: x.softplus()),
        "abs": unary(lambda r: away(r, (2, 5)), lambda x: x.abs()),
        "clip": unary(lambda r: away(r, (3, 3)) * 2,
                      lambda x: x.clip(-1.5, 1.5)),
        "sum_axis": unary(lambda r: r.normal(size=(3, 4)),
                          lambda x: x.sum(axis=0)),
        "mean": unary(lambda r: r.normal(size=(3, 4)),
                      lambda x: x.mean().reshape(1)),
        "reshape": unary(lambda r: r.normal(size=(3, 4)),
                         lambda x: x.reshape(2, 6)),
        "concat": binary(lambda r: r.normal(size=(3, 2)),
                         lambda r: r.normal(size=(3, 3)),
                         lambda a, b: concat([a, b], axis=1), (3, 5)),
        "take_rows": build_takerows,
        "weighted_gather": build_weighted_gather,
        "weighted_scatter": build_weighted_scatter,
        "segment_sum": build_segment(segment_sum),
        "segment_mean": build_segment(segment_mean),
        "segment_max": build_segment(segment_max),
        "bce_with_logits": build_bce,
        "l1_weighted": build_l1,
        "mlp": build_mlp,
    }


@pytest.mark.parametrize("name", sorted(op_builders()))
def test_gradcheck_per_op(name):
    build = op_builders()[name]
    for seed in range(3):
        check_gradients(build, seed)


def test_mlp_parameter_gradients():
    rng = np.random.default_rng(0)
    mlp = MLP(rng, [3, 6, 2])
    x = rng.normal(size=(4, 3))
    proj = rng.normal(size=(4, 2))
    (mlp(Tensor(x)) * Tensor(proj)).sum().backward()
    params = mlp.named_parameters()
    assert set(params) == {f"layers.{i}.{p}" for i in range(2) for p in "bw"}
    for key, p in params.items():
        got = p.grad.copy()
        num = np.zeros_like(p.data)
        flat = num.reshape(-1)
        for i in range(flat.size):
            for sign in (+1, -1):
                p.data.reshape(-1)[i] += sign * H
                val = float((mlp(Tensor(x)) * Tensor(proj)).sum().data)
                flat[i] += sign * val / (2 * H)
                p.data.reshape(-1)[i] -= sign * H
        err = np.abs(got - num) / np.maximum(np.abs(got) + np.abs(num), 1.0)
        assert err.max() < 1e-4, key


def test_kl_closed_form_values():
    zero = gaussian_kl(Tensor(np.zeros((5, 1))), Tensor(np.zeros((5, 1))), "none")
    assert np.all(zero.data == 0.0)
    one = gaussian_kl(Tensor(np.ones((5, 1))), Tensor(np.zeros((5, 1))), "none")
    assert np.allclose(one.data, 0.5)


def test_kl_matches_monte_carlo_3sigma():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=4)
    logvar = rng.normal(size=4) * 0.5
    closed = float(gaussian_kl(Tensor(mu), Tensor(logvar), "sum").data)
    n = 100_000
    z = mu + np.exp(0.5 * logvar) * rng.standard_normal((n, 4))
    log_q = -0.5 * ((z - mu) ** 2 / np.exp(logvar) + np.log(2 * np.pi) + logvar)
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    samples = (log_q - log_p).sum(axis=1)
    se = samples.std(ddof=1) / np.sqrt(n)
    assert abs(samples.mean() - closed) < 3 * se


def test_bce_clamp_keeps_loss_finite():
    logits = Tensor(np.array([1e6, -1e6, 0.0]), requires_grad=True)
    loss = bce_with_logits(logits, np.array([0.0, 1.0, 1.0]))
    assert np.isfinite(loss.data)
    loss.backward()
    assert np.all(np.isfinite(logits.grad))


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(1)
        mlp = MLP(rng, [2, 8, 1])
        opt = Adam(mlp.named_parameters(), lr=1e-2)
        x = np.random.default_rng(2).normal(size=(16, 2))
        y = (x[:, :1] * x[:, 1:]) * 2.0
        for _ in range(20):
            opt.zero_grad()
            loss = ((mlp(Tensor(x)) - Tensor(y)) ** 2).mean()
            loss.backward()
            opt.step()
        return {k: p.data.copy() for k, p in mlp.named_parameters().items()}

    a, b = run(), run()
    for key in a:
        assert np.array_equal(a[key], b[key])


# -- VAE-level behavior ------------------------------------------------------


def tiny_scene(rng, extent=8, n_points=400):
    pos = rng.uniform(0, extent, size=(n_points, 3))
    normals = rng.normal(size=(n_points, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    colors = rng.uniform(0, 1, size=(n_points, 3))
    pc = PointCloud(pos, colors=colors, normals=normals)
    grid = voxelize(pc, GridSpec(1.0))
    grid = splat_channel(pc, grid, normals, "normal")
    return pc, grid


def test_sparse_vae_reparam_deterministic_with_zero_noise():
    rng = np.random.default_rng(3)
    pc, grid = tiny_scene(rng)
    cfg = VaeConfig(hidden=8, latent_channels=4, color_channels=2, levels=2,
                    downsample=4)
    vae = SparseVae(np.random.default_rng(0), cfg)
    pyramid = occupancy_pyramid(grid, cfg.pool_steps)

    def run():
        _, bottleneck, mu, logvar = vae.encode(grid)
        z = mu + logvar.exp() ** 0.5 * 0.0  # noise fixed to zero
        res = vae.decode_geometry(bottleneck, z, teacher=pyramid)
        return res.grid.voxels.copy(), res.normals.data.copy()

    (v1, n1), (v2, n2) = run(), run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(n1, n2)


def test_color_gradient_identically_zero_before_dual_stage_epoch():
    rng = np.random.default_rng(4)
    pc, grid = tiny_scene(rng)
    cfg = VaeConfig(hidden=8, latent_channels=4, color_channels=2, levels=2,
                    downsample=4, dual_stage_epoch=10)
    vae = SparseVae(np.random.default_rng(0), cfg)
    pyramid = occupancy_pyramid(grid, cfg.pool_steps)

    def step(epoch):
        vae.zero_grad()
        _, bottleneck, mu, logvar = vae.encode(grid)
        res = vae.decode_geometry(bottleneck, mu, teacher=pyramid)
        out = VaeOutput(mu, logvar, res)
        if epoch >= cfg.dual_stage_epoch:
            levels = vae.appearance_levels(bottleneck, mu)
            decoded = vae.decode_color_levels(levels, res.trace)
            out.pred_colors = vae.predict_colors(decoded, pc.positions)
            out.color_targets = pc.colors
        total, _ = loss_sparse(out, grid, epoch,
                               dual_stage_epoch=cfg.dual_stage_epoch)
        total.backward()

    step(epoch=0)
    color_params = {k: p for k, p in vae.named_parameters().items()
                    if k.startswith(("color", "level_mlps"))}
    assert color_params
    for key, p in color_params.items():
        assert p.grad is None, f"{key} received gradient before epoch E"
    geo_grads = [p.grad for k, p in vae.named_parameters().items()
                 if k.startswith("encoder")]
    assert any(g is not None and np.any(g != 0) for g in geo_grads)

    step(epoch=10)
    assert any(p.grad is not None and np.any(p.grad != 0)
               for p in color_params.values())


def test_decode_color_level0_occupancy_matches_trace():
    rng = np.random.default_rng(5)
    pc, grid = tiny_scene(rng)
    cfg = VaeConfig(hidden=8, latent_channels=4, color_channels=2, levels=2,
                    downsample=4)
    vae = SparseVae(np.random.default_rng(1), cfg)
    pyramid = occupancy_pyramid(grid, cfg.pool_steps)
    _, bottleneck, mu, _ = vae.encode(grid)
    res = vae.decode_geometry(bottleneck, mu, teacher=pyramid)
    decoded = vae.decode_color_levels(vae.appearance_levels(bottleneck, mu),
                                      res.trace)
    assert np.array_equal(decoded[0][0].voxels, res.grid.voxels)
    assert decoded[0][0].spec == res.grid.spec
    res.trace.validate()


def test_loss_dense_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    pc, grid = tiny_scene(rng, extent=4, n_points=60)
    pyramid = occupancy_pyramid(grid, 1)
    # fabricate a one-step decode result against the true occupancy
    children = (pyramid[1].voxels[:, None, :].astype(np.int64) * 2
                + np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1]
                            for c in range(8)])[None, :, :]).reshape(-1, 3)
    logits = rng.normal(size=children.shape[0]) * 2
    targets = pyramid[0].contains_voxels(children).astype(float)
    normals_pred = rng.uniform(-1, 1, size=(grid.n_vertices, 3))
    trace = PruneTrace(pyramid[1].spec, pyramid[1].voxels, [grid.voxels])
    res = DecodeResult(grid, Tensor(normals_pred), trace,
                       step_logits=[(Tensor(logits), targets)])
    mu = rng.normal(size=(5, 3))
    logvar = rng.normal(size=(5, 3)) * 0.2
    out = VaeOutput(Tensor(mu), Tensor(logvar), res)
    w = LossWeights()
    total, parts = loss_dense(out, grid, w)

    # scalar-by-scalar reference
    clamped = np.clip(logits, -30, 30)
    bce = np.mean(np.logaddexp(0.0, clamped) - clamped * targets)
    truth_normals = grid.channel("normal")
    touched = (~grid.vertex_untouched).astype(float)
    l1 = (np.abs(normals_pred - truth_normals)
          * touched[:, None]).sum() / (touched.sum() * 3)
    kl = np.mean(0.5 * (mu ** 2 + np.exp(logvar) - logvar - 1))
    expect = w.occupancy * bce + w.normal * l1 + w.kl * kl
    assert np.allclose(total.data, expect, rtol=1e-12)
    assert np.allclose(parts["occupancy"].data, bce, rtol=1e-12)


def test_perfect_reconstruction_loss_is_bce_floor():
    rng = np.random.default_rng(7)
    pc, grid = tiny_scene(rng, extent=4, n_points=200)
    pyramid = occupancy_pyramid(grid, 1)
    children = (pyramid[1].voxels[:, None, :].astype(np.int64) * 2
                + np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1]
                            for c in range(8)])[None, :, :]).reshape(-1, 3)
    targets = pyramid[0].contains_voxels(children).astype(float)
    logits = np.where(targets > 0.5, 100.0, -100.0)  # saturates at the clamp
    truth_normals = grid.channel("normal")
    trace = PruneTrace(pyramid[1].spec, pyramid[1].voxels, [grid.voxels])
    res = DecodeResult(grid, Tensor(truth_normals), trace,
                       step_logits=[(Tensor(logits), targets)])
    out = VaeOutput(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 2))), res)
    total, parts = loss_dense(out, grid)
    floor = 20.0 * np.log1p(np.exp(-30.0))
    assert float(parts["normal"].data) == 0.0
    assert float(parts["kl"].data) == 0.0
    assert abs(float(total.data) - floor) < 1e-12
    assert float(total.data) < 1e-11
