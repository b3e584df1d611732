"""Acceptance criteria 1-9, one test each; every test records a pass/fail line."""
import time

import numpy as np
import pytest

from dsplat import autodiff as ad
from dsplat.cli import main, oracle_separation_inputs
from dsplat.deformation import DeformationField, NeighborGraph, coarse_offset
from dsplat.gaussian import Scene
from dsplat.opacity import physical_opacity, prune
from dsplat.pipeline import render_scene
from dsplat.render import SplatBatch, render, render_backward, ssim
from dsplat.scenegen import Dataset, generate
from dsplat.scenegen import preset as scene_preset
from dsplat.separation import classify
from dsplat.training import (_rebuild_tv_edges, importance_table, init_state, preset, read_metrics,
                             render_at, split_pairs, tv_loss)

from conftest import axis_camera, make_camera, random_scene
from test_render import fd_render_grads, random_2d, render2d
from test_training import full_pipeline_fd_error


def rel_err(num, ana):
    scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-8)
    return float(np.max(np.abs(num - ana)) / scale)


def numeric_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += h
        m[idx] -= h
        g[idx] = (fn(p) - fn(m)) / (2 * h)
    return g


def report(text):
    return dict(line.split("\t", 1) for line in text.strip().splitlines() if "\t" in line)


# ---------------------------------------------------------------------------
# 1. gradient integrity
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_integrity(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(11)
    errs = {}

    cam = axis_camera(12, 12)
    mu, cov, op, col = random_2d(rng, 6, 12)
    w = rng.normal(size=(12, 12, 3))
    g = render_backward(render2d(mu, cov, op, col, cam), w)
    num = fd_render_grads(mu, cov, op, col, cam, w)
    errs["renderer"] = max(rel_err(num[k], getattr(g, k)) for k in ("mu2d", "cov2d", "opacity", "color"))

    params = ad.init_mlp([6, 8, 4], rng, zero_last=False)
    x = rng.normal(size=(5, 6))
    leaves = ad.mlp_leaves(params, "m")
    out = ad.mlp_forward(params, x, leaves)
    grads = ad.grad(ad.tsum(ad.sin(out)), leaves)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(v, k=k):
            p = params.copy()
            (p.weights if k % 2 == 0 else p.biases)[k // 2] = v
            return float(np.sum(np.sin(ad.mlp_forward(p, x).data)))
        worst = max(worst, rel_err(numeric_grad(f, leaf.data.copy()), grads[k]))
    errs["mlp"] = worst

    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    _, gs = ssim(a, b, return_grad=True)
    errs["ssim"] = rel_err(numeric_grad(lambda v: ssim(v, b), a), gs)

    off = rng.normal(size=(7, 10))
    edges = np.array([[0, 1], [0, 2], [1, 3], [4, 6], [2, 5]])
    _, gt = tv_loss(off, edges, 0.3)
    errs["tv"] = rel_err(numeric_grad(lambda v: tv_loss(v, edges, 0.3)[0], off), gt)

    from dsplat.gaussian import covariances
    from dsplat.opacity import modulate_opacity, modulate_opacity_backward
    sc = random_scene(rng, 5, opacity=(0.1, 0.3))
    covs = covariances(sc.quats, sc.scales)
    eye = np.array([0.3, -0.2, -3.0])
    wo = rng.normal(size=5)
    _, ctx = modulate_opacity(sc.opacities, covs, sc.means, eye, 3.0)
    db, dm, _ = modulate_opacity_backward(ctx, wo)
    errs["opacity"] = max(
        rel_err(numeric_grad(lambda m: wo @ modulate_opacity(sc.opacities, covs, m, eye, 3.0)[0],
                             sc.means.copy()), dm),
        rel_err(numeric_grad(lambda o: wo @ modulate_opacity(o, covs, sc.means, eye, 3.0)[0],
                             sc.opacities.copy()), db))

    pipe = max(full_pipeline_fd_error(s, sep) for s in (0, 1) for sep in (False, True))
    elapsed = time.time() - t0
    ok = max(errs.values()) < 1e-3 and pipe < 1e-2 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", pipeline {pipe:.1e}, {elapsed:.0f}s"
    acceptance(1, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 2. compositing
# ---------------------------------------------------------------------------

def test_criterion_2_compositing(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(2)
    cam = axis_camera(24, 24)
    n = 40
    means = np.c_[rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(1.5, 3, n)]
    covs = np.stack([np.diag(s ** 2) for s in rng.uniform(0.05, 0.3, (n, 3))])
    out = render(SplatBatch(np.arange(n), means, covs, rng.uniform(0.2, 1.0, n),
                            rng.uniform(0, 1, (n, 3))), cam)
    closure = float(np.max(np.abs(out.accum + out.transmittance - 1.0)))

    # one splat: alpha = o * exp(-d^2 / (2 var2d)) at one pixel off centre; two splats stacked
    cam15 = axis_camera(15, 15, f=20.0)
    cov = np.diag([0.01, 0.01, 0.01])[None]
    one = render(SplatBatch(np.array([0]), np.array([[0, 0, 2.0]]), cov, np.array([0.6]),
                            np.array([[0.2, 0.5, 1.0]])), cam15, (0.1, 0.1, 0.1))
    alpha = 0.6 * np.exp(-0.5 / ((20.0 * 0.1 / 2.0) ** 2 + 0.3))
    e1 = np.max(np.abs(one.image[7, 8] - (alpha * np.array([0.2, 0.5, 1.0]) + (1 - alpha) * 0.1)))
    two = render(SplatBatch(np.array([0, 1]), np.array([[0, 0, 1.0], [0, 0, 2.0]]),
                            np.repeat(cov, 2, axis=0), np.array([1.0, 1.0]),
                            np.array([[1.0, 0, 0], [0, 1.0, 0]])), cam15)
    e2 = np.max(np.abs(two.image[7, 7] - [0.99, 0.01 * 0.99, 0.0]))
    elapsed = time.time() - t0
    ok = closure < 1e-6 and e1 < 1e-6 and e2 < 1e-6 and elapsed < 5
    acceptance(2, ok, f"alpha+T error {closure:.1e}, one-splat {e1:.1e}, two-splat {e2:.1e}, "
                      f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3-4. separation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_oracle():
    gen = generate(scene_preset("mini"))
    ds = Dataset.from_generated(gen)
    return gen, ds, oracle_separation_inputs(gen, ds)


def test_criterion_3_separation_fidelity(acceptance, tmp_path, capsys):
    t0 = time.time()
    assert main(["classify", "--preset", "mini", "--out", str(tmp_path)]) == 0
    elapsed = time.time() - t0
    rep = report(capsys.readouterr().out)
    p, r = float(rep["precision"]), float(rep["recall"])
    cfg = preset("mini")
    ok = p >= 0.95 and r >= 0.95 and elapsed < 30
    acceptance(3, ok, f"precision {p:.3f}, recall {r:.3f} at tau {cfg.tau_var}, eps {cfg.epsilon}, "
                      f"gamma {cfg.gamma}, {elapsed:.1f}s")
    assert ok


def test_criterion_4_separation_monotone(acceptance, mini_oracle):
    gen, _, (traj, proj, flows) = mini_oracle
    taus, gammas = (0.001, 0.01, 0.1), (0.25, 0.5, 0.75)
    sets = {(t, g): set(classify(gen.scene.ids, traj, proj, flows, t, 1.0, g).dynamic_ids.tolist())
            for t in taus for g in gammas}
    bad = [(a, b) for a in sets for b in sets
           if a[0] <= b[0] and a[1] <= b[1] and not sets[b] <= sets[a]]
    sizes = " ".join(f"{len(sets[k])}" for k in sorted(sets))
    acceptance(4, not bad, f"{len(sets) ** 2} ordered pairs checked, {len(bad)} violations; "
                           f"set sizes {sizes}")
    assert not bad


# ---------------------------------------------------------------------------
# 5. hierarchical decomposition
# ---------------------------------------------------------------------------

def test_criterion_5_hierarchy(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 30))
        k = int(rng.integers(1, n))
        nb = np.stack([rng.choice(np.delete(np.arange(n), i), size=k, replace=False)
                       for i in range(n)])
        graph = NeighborGraph(np.arange(n), nb)
        raw = rng.normal(size=(n, 10))
        for g in range(n):
            mean = sum(raw[j] for j in nb[g]) / k
            worst = max(worst, float(np.max(np.abs(coarse_offset(g, raw, graph).as_vector() - mean))))

    sc = random_scene(rng, 20)
    sc.has_feature[:] = True
    sc.features = rng.normal(size=(20, 16))
    field = DeformationField.create(rng)
    field.separate(sc.ids[:10], sc.means[:10], rng, noise=0.05)
    for m in field.blend.mode_params:
        m.weights[-1] = 0.05 * rng.normal(size=m.weights[-1].shape)
    cam = make_camera(24, 24)
    exact = True
    for t in (0.0, 0.3, 1.0):
        full = field.offsets(sc, t).data
        field.hierarchy = False
        coarse = field.offsets(sc, t).data
        coarse[:10] = field.graph.averaging_matrix() @ coarse[:10]
        field.hierarchy = True
        exact &= np.array_equal(render_scene(sc, full, cam, 3.0)[0].image,
                                render_scene(sc, coarse, cam, 3.0)[0].image)
    ok = worst < 1e-12 and exact
    acceptance(5, ok, f"max coarse error {worst:.1e} over 100 graphs, zero fine net pixel-exact {exact}")
    assert ok


# ---------------------------------------------------------------------------
# 6. physically based opacity
# ---------------------------------------------------------------------------

def test_criterion_6_physical_opacity(acceptance):
    z = np.array([0.0, 0.0, 1.0])
    law = abs(physical_opacity(1.0, z, z, 2 * 3.7, 3.7) - 0.25)
    rng = np.random.default_rng(6)
    sc = random_scene(rng, 10)
    cam = make_camera(24, 24)
    normals = rng.normal(size=(10, 3))
    normals *= np.sign(np.sum(normals * (cam.position - sc.means), axis=1))[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    back = np.array([1, 4, 7])
    normals[back] *= -1
    keep = ~np.isin(np.arange(10), back)
    a = render_scene(sc, None, cam, 3.0, normals=normals)[0].image
    b = render_scene(sc.subset(keep), None, cam, 3.0, normals=normals[keep])[0].image
    zero = np.array_equal(a, b)
    ok = law < 1e-12 and zero
    acceptance(6, ok, f"2*d_ref factor error {law:.1e}, backfacing splats invisible {zero}")
    assert ok


# ---------------------------------------------------------------------------
# 7. temporal importance filtering
# ---------------------------------------------------------------------------

def floater_state(gen, ds, n_float=20, seed=7):
    """Oracle canonical scene plus floaters behind every training camera."""
    rng = np.random.default_rng(seed)
    spec = gen.spec
    y0 = (spec.orbit_radius + 1.5) / np.sin(np.radians(spec.elevation_deg))
    pts = np.column_stack([rng.uniform(-1, 1, n_float), rng.uniform(y0, y0 + 2, n_float),
                           rng.uniform(-1, 1, n_float)])
    # sigma 0.1: the whole 3-sigma ball lies behind each image plane
    for row in ds.cameras:
        for cam in row:
            assert np.all(cam.project_points(pts)[1] < -0.3)
    g = gen.scene
    n0 = len(g)
    sc = Scene(ids=np.arange(n0 + n_float), means=np.vstack([g.means, pts]),
               quats=np.vstack([g.quats, np.tile([1.0, 0, 0, 0], (n_float, 1))]),
               scales=np.vstack([g.scales, np.full((n_float, 3), 0.1)]),
               opacities=np.r_[g.opacities, np.full(n_float, 0.9)],
               colors=np.vstack([g.colors, rng.uniform(0, 1, (n_float, 3))]))
    state = init_state(preset("mini"), ds)
    state.scene, state.d_ref = sc, gen.d_ref
    _rebuild_tv_edges(state)
    return state, set(range(n0, n0 + n_float))


def test_criterion_7_importance_filtering(acceptance, mini_oracle):
    gen, ds, _ = mini_oracle
    state, floaters = floater_state(gen, ds)
    table = importance_table(state, ds)
    removed = {tau: set(prune(state.scene, table, tau)[1]) for tau in (0.005, 0.02, 0.08)}
    all_floaters = floaters <= removed[0.02]
    nested = removed[0.005] <= removed[0.02] <= removed[0.08]

    train, _ = split_pairs(ds.n_views, ds.n_frames, state.config.holdout_stride)
    before = {p: render_at(state, ds.cameras[p[0]][p[1]], ds.times[p[1]]).image for p in train}
    state.scene = prune(state.scene, table, 0.02)[0]
    delta = max(float(np.max(np.abs(render_at(state, ds.cameras[v][f], ds.times[f]).image - before[v, f])))
                for v, f in train)
    ok = all_floaters and nested and delta <= 0.05
    acceptance(7, ok, f"floaters pruned {len(floaters & removed[0.02])}/20, removed "
                      f"{[len(removed[t]) for t in sorted(removed)]} nested {nested}, "
                      f"max pixel change {delta:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 8-9. end-to-end runs through the CLI
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    runs = {}
    for name, extra in (("a", []), ("b", []), ("nosep", ["--no-separation"])):
        t0 = time.time()
        code = main(["fit", "--preset", "mini", "--seed", "0", "--threads", "1",
                     "--out", str(root / name)] + extra)
        runs[name] = (code, time.time() - t0)
    return root, runs


@pytest.mark.slow
def test_criterion_8_end_to_end_fit(acceptance, mini_runs):
    root, runs = mini_runs
    assert runs["a"][0] == 0 and runs["nosep"][0] == 0
    sep = read_metrics(root / "a" / "metrics.csv")[-1]
    nosep = read_metrics(root / "nosep" / "metrics.csv")[-1]
    gain = sep["psnr"] - nosep["psnr"]
    secs = runs["a"][1]
    ok = sep["step"] <= 2000 and sep["psnr"] >= 30.0 and secs <= 600 and gain >= 0.5
    acceptance(8, ok, f"held-out {sep['psnr']:.2f} dB after {sep['step']} steps in {secs:.0f}s; "
                      f"no separation {nosep['psnr']:.2f} dB (gain {gain:+.2f} dB)")
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(acceptance, mini_runs, capsys):
    root, runs = mini_runs
    assert runs["a"][0] == 0 and runs["b"][0] == 0
    files = ("metrics.csv", "checkpoint.dsckpt", "partition.txt", "prune_report.txt")
    same = {f: (root / "a" / f).read_bytes() == (root / "b" / f).read_bytes() for f in files}
    for name in ("a", "b"):
        assert main(["render", "--checkpoint", str(root / name / "checkpoint.dsckpt"), "--t", "0.5",
                     "--threads", "1", "--out", str(root / name / "renders")]) == 0
    imgs = sorted(p.name for p in (root / "a" / "renders").glob("*.ppm"))
    same["images"] = bool(imgs) and all(
        (root / "a" / "renders" / n).read_bytes() == (root / "b" / "renders" / n).read_bytes()
        for n in imgs)
    ok = all(same.values())
    acceptance(9, ok, ", ".join(f"{k} {'identical' if v else 'DIFFER'}" for k, v in same.items()))
    assert ok


@pytest.mark.slow
def test_render_novel_time_against_oracle(mini_runs, capsys):
    root, _ = mini_runs
    assert main(["render", "--checkpoint", str(root / "a" / "checkpoint.dsckpt"), "--t", "0.5",
                 "--oracle", "--out", str(root / "oracle_check")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    head = lines[0].split("\t")
    values = [float(dict(zip(head, ln.split("\t")))["psnr_vs_oracle"]) for ln in lines[1:]]
    assert min(values) >= 28.0
