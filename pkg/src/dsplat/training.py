"""Three-stage optimization of a dynamic Gaussian scene.

Stages: ``early`` (a single deformation network, canonical scene optionally
frozen), ``joint`` (canonical scene and network together), then, at the
separation milestone, ``separated`` (static branch plus adaptive motion
networks with coarse/fine offsets for dynamic Gaussians).  Importance
filtering prunes Gaussians at its milestone and periodically after.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .deformation import DeformationField, _rows_of, build_neighbor_graph
from .errors import ConfigError, InvalidInputError, NumericalAbort, ShapeError
from .gaussian import Scene
from .opacity import ImportanceTable, accumulate_importance, prune, reference_distance
from .pipeline import backward as scene_backward
from .pipeline import render_scene
from .render import psnr, ssim
from .separation import Partition, camera_flow, classify, motion_flow

log = logging.getLogger("dsplat")

STAGES = ("early", "joint", "separated")
SCENE_PARAMS = ("means", "quats", "log_scales", "opacities", "colors", "features")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    early_end: int = 40
    separation_at: int = 80
    filter_at: int = 267
    filter_every: int = 40
    tau_var: float = 0.01
    epsilon: float = 1.0
    gamma: float = 0.5
    tau_prune: float = 0.02
    lam: float = 0.1
    M: int = 4
    k: int = 8
    pos_freqs: int = 10
    time_freqs: int = 6
    lr_deform_init: float = 8e-4
    lr_deform_final: float = 1.6e-6
    lr_means: float = 1e-3
    lr_means_final: float = 1e-5
    lr_colors: float = 1e-2
    lr_opacity: float = 2e-2
    lr_scales: float = 5e-3
    lr_quats: float = 2e-3
    lr_features: float = 5e-3
    tv_weight: float = 1e-3
    alpha0: float = 1.0
    separation: bool = True
    hierarchy: bool = True
    physical_opacity: bool = True
    freeze_canonical_early: bool = True
    holdout_stride: int = 5
    batch: int = 1
    eval_every: int = 100
    checkpoint_every: int = 0
    scene_preset: str = "mini"
    data: str = ""
    seed: int = 0
    threads: int = 1

    def validate(self):
        if not (0 <= self.early_end < self.separation_at < self.filter_at <= self.steps):
            raise ConfigError(
                "need early_end < separation_at < filter_at <= steps, got "
                f"{self.early_end}/{self.separation_at}/{self.filter_at}/{self.steps}")
        for name in ("tau_var", "epsilon", "gamma", "tau_prune", "filter_every", "M", "k",
                     "pos_freqs", "time_freqs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.tv_weight < 0:
            raise ConfigError("tv_weight must be non-negative")
        if self.holdout_stride < 2:
            raise ConfigError("holdout_stride must be at least 2")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    # key = value text ------------------------------------------------------

    def to_text(self):
        return "".join(f"{f.name} = {_fmt_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text, base=None):
        base = base or cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return base.with_overrides(values)

    def with_overrides(self, values):
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for key, val in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse_value(getattr(self, key), val, key)
        return replace(self, **parsed)


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(default, text, key):
    if not isinstance(text, str):
        return type(default)(text)
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


PRESETS = {
    # separation once learned motion clears tau_var; faster deformation lr for the short run
    "mini": TrainConfig(separation_at=800, filter_at=1000, filter_every=200, lr_deform_init=3e-3,
                        lr_deform_final=3e-4, freeze_canonical_early=False),
    "paper-shape": TrainConfig(steps=150000, early_end=3000, separation_at=6000, filter_at=20000,
                               filter_every=3000, eval_every=5000, checkpoint_every=10000),
    "smoke": TrainConfig(steps=60, early_end=5, separation_at=20, filter_at=40, filter_every=10,
                         eval_every=20, scene_preset="tiny"),
}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")
    return replace(PRESETS[name])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def recon_loss(rendered, target, lam=0.1):
    """``(1 - lam) * L1 + lam * (1 - SSIM)`` and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeError(f"image dimensions differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    loss = (1.0 - lam) * l1
    if lam > 0:
        s, ds = ssim(rendered, target, return_grad=True)
        loss += lam * (1.0 - s)
        grad = grad - lam * ds
    return loss, grad


def tv_loss(offsets, edges, weight):
    """``weight`` times the mean squared offset difference over unordered edges.

    ``edges`` is an (E, 2) array of row pairs or a ``NeighborGraph`` (whose
    rows must match ``offsets``).
    """
    off = np.asarray(offsets, dtype=np.float64)
    if hasattr(edges, "edges"):
        edges = edges.edges()
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    grad = np.zeros_like(off)
    if len(edges) == 0 or weight == 0:
        return 0.0, grad
    d = off[edges[:, 0]] - off[edges[:, 1]]
    loss = weight * float(np.mean(np.sum(d * d, axis=1)))
    g = (2.0 * weight / len(edges)) * d
    np.add.at(grad, edges[:, 0], g)
    np.add.at(grad, edges[:, 1], -g)
    return loss, grad


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    step: int
    stage: str
    scene: Scene
    field: DeformationField
    d_ref: float
    adam_scene: ad.AdamState = field(default_factory=ad.AdamState)
    adam_deform: ad.AdamState = field(default_factory=ad.AdamState)
    partition: Partition | None = None
    history: list = field(default_factory=list)
    tv_edges: np.ndarray | None = None
    last_checkpoint: str | None = None
    prune_log: list = field(default_factory=list)
    scene_spec: list | None = None
    loss_window: list = field(default_factory=list)  # losses since the last eval row

    @property
    def n_dynamic(self):
        return 0 if self.partition is None else int(len(self.field.dynamic_ids))


def init_scene_from_points(points, alpha0=1.0, k=3):
    """Isotropic Gaussians at the points, sized by mean distance to ``k`` neighbors."""
    pts = np.array(points, dtype=np.float64)  # copy: optimizer updates means in place
    xyz, rgb = pts[:, :3], np.clip(pts[:, 3:6], 0.0, 1.0)
    n = len(xyz)
    d2 = np.sum((xyz[:, None, :] - xyz[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    kk = min(k, n - 1) if n > 1 else 0
    if kk:
        near = np.sqrt(np.sort(d2, axis=1)[:, :kk]).mean(axis=1)
    else:
        near = np.full(n, 0.1)
    s = np.clip(0.5 * near, 0.01, 0.3)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Scene(ids=np.arange(n), means=xyz, quats=quats, scales=np.repeat(s[:, None], 3, axis=1),
                 opacities=np.full(n, alpha0), colors=rgb)


def split_pairs(n_views, n_frames, stride):
    """(train, holdout) lists of (view, frame); every ``stride``-th pair is held out."""
    train, hold = [], []
    for v in range(n_views):
        for f in range(n_frames):
            (hold if (v * n_frames + f) % stride == stride // 2 else train).append((v, f))
    return train, hold


def init_state(config, dataset):
    config.validate()
    rng = np.random.default_rng(config.seed)
    scene = init_scene_from_points(dataset.points, config.alpha0)
    cams = [c.position for row in dataset.cameras for c in row]
    d_ref = reference_distance(cams, np.median(scene.means, axis=0))
    fld = DeformationField.create(rng, config.pos_freqs, config.time_freqs, k=config.k)
    state = TrainState(config, 0, "early", scene, fld, d_ref)
    spec = getattr(dataset, "spec", None)
    state.scene_spec = spec.to_lines() if spec is not None else None
    _rebuild_tv_edges(state)
    return state


def _rebuild_tv_edges(state):
    sc = state.scene
    if len(sc) < 2:
        state.tv_edges = np.zeros((0, 2), dtype=np.int64)
        return
    g = build_neighbor_graph(sc.means, sc.ids, min(state.config.k, len(sc) - 1))
    edges = g.edges()
    if state.partition is not None:
        dyn = np.isin(sc.ids, state.field.dynamic_ids)
        edges = edges[dyn[edges[:, 0]] == dyn[edges[:, 1]]]
    state.tv_edges = edges


def stage_for_step(config, step):
    if step < config.early_end:
        return "early"
    if config.separation and step >= config.separation_at:
        return "separated"
    return "joint"


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------

@dataclass
class StepGrads:
    loss: float
    recon: float
    tv: float
    image: np.ndarray
    scene: dict
    deform: dict


def compute_grads(state, target, camera, t, background=(0.0, 0.0, 0.0)):
    """Loss and gradients for one image without touching the parameters."""
    cfg = state.config
    sc, fld = state.scene, state.field
    leaves = fld.make_leaves()
    feat_leaf = None
    dyn_rows = None
    if fld.stage == "separated" and fld.hierarchy and len(fld.dynamic_ids):
        dyn_rows = _rows_of(sc.ids, fld.dynamic_ids)
        feat_leaf = ad.leaf(sc.features[dyn_rows], "features")
    off = fld.offsets(sc, t, leaves, feat_leaf)
    result, ctx = render_scene(sc, off.data, camera, state.d_ref, background,
                               physical=cfg.physical_opacity, threads=cfg.threads, retain=True)
    recon, dimg = recon_loss(result.image, target, cfg.lam)
    g = scene_backward(result, ctx, dimg, threads=cfg.threads)
    tv, dtv = tv_loss(off.data, state.tv_edges, cfg.tv_weight)
    loss = recon + tv
    if not np.isfinite(loss):
        raise NumericalAbort(f"non-finite loss at step {state.step}", state.last_checkpoint)

    surrogate = ad.tsum(ad.mul(off, ad.Tensor(g.offsets + dtv)))
    ad.backward(surrogate)
    deform = {}
    for value in leaves.values():
        for lf in (value if isinstance(value, list) else [value]):
            deform[lf.name] = np.zeros(lf.shape) if lf.grad is None else lf.grad
    feats = np.zeros_like(sc.features)
    if feat_leaf is not None and feat_leaf.grad is not None:
        feats[dyn_rows] = feat_leaf.grad
    scene = {"means": g.means, "quats": g.quats, "log_scales": g.scales * sc.scales,
             "opacities": g.opacities, "colors": g.colors, "features": feats}
    return StepGrads(loss, recon, tv, result.image, scene, deform)


def _scene_arrays(sc):
    return {"means": sc.means, "quats": sc.quats, "log_scales": np.log(sc.scales),
            "opacities": sc.opacities, "colors": sc.colors, "features": sc.features}


def apply_grads(state, grads):
    cfg = state.config
    step = state.step
    lr_d = ad.lr_schedule(step, cfg.steps, cfg.lr_deform_init, cfg.lr_deform_final)
    ad.adam_step(state.field.arrays(), grads.deform, state.adam_deform, lr_d)
    if state.stage == "early" and cfg.freeze_canonical_early:
        return
    sc = state.scene
    params = _scene_arrays(sc)
    lr = {"means": ad.lr_schedule(step, cfg.steps, cfg.lr_means, cfg.lr_means_final),
          "quats": cfg.lr_quats, "log_scales": cfg.lr_scales, "opacities": cfg.lr_opacity,
          "colors": cfg.lr_colors, "features": cfg.lr_features}
    ad.adam_step(params, grads.scene, state.adam_scene, lr)
    sc.scales[:] = np.exp(params["log_scales"])
    sc.enforce_invariants()


def train_step(state, dataset, view, frame, background=(0.0, 0.0, 0.0)):
    """One optimizer step on image (view, frame); fires milestone events first.

    ``view``/``frame`` may also be equal-length sequences, in which case the
    gradients of those images are averaged.
    """
    _milestones(state, dataset, background)
    pairs = list(zip(np.atleast_1d(view), np.atleast_1d(frame)))
    grads = None
    for v, f in pairs:
        g = compute_grads(state, dataset.images[v][f], dataset.cameras[v][f], dataset.times[f],
                          background)
        grads = g if grads is None else _add_grads(grads, g)
    if len(pairs) > 1:
        grads = _scale_grads(grads, 1.0 / len(pairs))
    apply_grads(state, grads)
    state.step += 1
    return grads


def _add_grads(a, b):
    return StepGrads(a.loss + b.loss, a.recon + b.recon, a.tv + b.tv, b.image,
                     {k: a.scene[k] + b.scene[k] for k in a.scene},
                     {k: a.deform[k] + b.deform[k] for k in a.deform})


def _scale_grads(g, c):
    return StepGrads(g.loss * c, g.recon * c, g.tv * c, g.image,
                     {k: v * c for k, v in g.scene.items()}, {k: v * c for k, v in g.deform.items()})


def _milestones(state, dataset, background):
    cfg = state.config
    new_stage = stage_for_step(cfg, state.step)
    if new_stage == "separated" and state.stage != "separated":
        separate(state, dataset, background)
    state.stage = new_stage
    s = state.step
    if s >= cfg.filter_at and (s - cfg.filter_at) % cfg.filter_every == 0:
        importance_filter(state, dataset, background)


# ---------------------------------------------------------------------------
# separation and filtering events
# ---------------------------------------------------------------------------

def trajectories(state, times):
    """Position offsets (N, T, 3) of the current deformation at ``times``."""
    return np.stack([state.field.offsets(state.scene, t).data[:, 0:3] for t in times], axis=1)


def separation_inputs(state, dataset, background=(0.0, 0.0, 0.0)):
    """Trajectories, projected centers and motion flows used for classification."""
    sc = state.scene
    traj = trajectories(state, dataset.times)
    V, T = dataset.n_views, dataset.n_frames
    proj = np.full((V, T, len(sc), 2), np.nan)
    flows = []
    for v in range(V):
        row = []
        for f in range(T):
            cam = dataset.cameras[v][f]
            uv, z = cam.project_points(sc.means + traj[:, f])
            proj[v, f] = np.where((z > 1e-4)[:, None], uv, np.nan)
            optical = dataset.flows[v][f] if f < len(dataset.flows[v]) else None
            if optical is None or f + 1 >= T:
                row.append(None)
                continue
            off = state.field.offsets(sc, dataset.times[f]).data
            res, _ = render_scene(sc, off, cam, state.d_ref, background,
                                  physical=state.config.physical_opacity,
                                  threads=state.config.threads, retain=False)
            row.append(motion_flow(optical, camera_flow(res.depth, cam, dataset.cameras[v][f + 1])))
        flows.append(row)
    return traj, proj, flows


def classify_state(state, dataset, background=(0.0, 0.0, 0.0)):
    cfg = state.config
    traj, proj, flows = separation_inputs(state, dataset, background)
    return classify(state.scene.ids, traj, proj, flows, cfg.tau_var, cfg.epsilon, cfg.gamma)


def separate(state, dataset, background=(0.0, 0.0, 0.0)):
    if state.partition is not None:
        return state.partition
    cfg = state.config
    part = classify_state(state, dataset, background)
    rng = np.random.default_rng([cfg.seed, state.step, 1])
    sc = state.scene
    dyn = part.dynamic
    state.field.separate(sc.ids[dyn], sc.means[dyn], rng, modes=cfg.M, hierarchy=cfg.hierarchy)
    sc.features[dyn] = 0.5 * rng.standard_normal((int(dyn.sum()), sc.features.shape[1]))
    sc.has_feature[dyn] = True
    state.partition = part
    _rebuild_tv_edges(state)
    log.info("step %d: separation labels %d of %d Gaussians dynamic", state.step, dyn.sum(), len(sc))
    return part


def importance_table(state, dataset, background=(0.0, 0.0, 0.0)):
    sc = state.scene
    table = ImportanceTable(sc.ids)
    for f, t in enumerate(dataset.times):
        off = state.field.offsets(sc, t).data
        for v in range(dataset.n_views):
            res, _ = render_scene(sc, off, dataset.cameras[v][f], state.d_ref, background,
                                  physical=state.config.physical_opacity,
                                  threads=state.config.threads, retain=True)
            accumulate_importance(table, res, sc.ids)
    return table


def importance_filter(state, dataset, background=(0.0, 0.0, 0.0)):
    table = importance_table(state, dataset, background)
    keep_before = state.scene.ids.copy()
    new_scene, removed = prune(state.scene, table, state.config.tau_prune)
    state.prune_log += [(int(i), table.get(i), state.step) for i in removed]
    if not removed:
        return removed
    rows = np.flatnonzero(np.isin(keep_before, new_scene.ids))
    for name in SCENE_PARAMS:
        if name in state.adam_scene.m:
            state.adam_scene.m[name] = state.adam_scene.m[name][rows]
            state.adam_scene.v[name] = state.adam_scene.v[name][rows]
    state.scene = new_scene
    state.field.rebuild_graph(new_scene)
    _rebuild_tv_edges(state)
    log.info("step %d: pruned %d Gaussians", state.step, len(removed))
    return removed


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def render_at(state, camera, t, background=(0.0, 0.0, 0.0)):
    off = state.field.offsets(state.scene, t).data
    res, _ = render_scene(state.scene, off, camera, state.d_ref, background,
                          physical=state.config.physical_opacity, threads=state.config.threads,
                          retain=False)
    return res


def evaluate(state, dataset, pairs, background=(0.0, 0.0, 0.0)):
    """Mean PSNR and SSIM over (view, frame) ``pairs``."""
    ps, ss = [], []
    for v, f in pairs:
        img = render_at(state, dataset.cameras[v][f], dataset.times[f], background).image
        ps.append(psnr(img, dataset.images[v][f]))
        ss.append(ssim(img, dataset.images[v][f]))
    return float(np.mean(ps)), float(np.mean(ss))


METRIC_FIELDS = ("step", "stage", "loss", "psnr", "ssim", "n_gaussians", "n_dynamic")


def metrics_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in history:
        w.writerow([row["step"], row["stage"], repr(row["loss"]), repr(row["psnr"]),
                    repr(row["ssim"]), row["n_gaussians"], row["n_dynamic"]])
    return buf.getvalue()


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("step", "n_gaussians", "n_dynamic"):
            r[k] = int(r[k])
        for k in ("loss", "psnr", "ssim"):
            r[k] = float(r[k])
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state, path, extra_meta=None):
    sc = state.scene
    arrays = {"scene.ids": sc.ids, "scene.means": sc.means, "scene.quats": sc.quats,
              "scene.scales": sc.scales, "scene.opacities": sc.opacities,
              "scene.colors": sc.colors, "scene.features": sc.features,
              "scene.has_feature": sc.has_feature}
    for k, v in state.field.arrays().items():
        arrays["deform." + k] = v
    adam_t = {}
    for tag, st in (("adam_scene", state.adam_scene), ("adam_deform", state.adam_deform)):
        for name in st.m:
            arrays[f"{tag}.m.{name}"] = st.m[name]
            arrays[f"{tag}.v.{name}"] = st.v[name]
        adam_t[tag] = {k: int(v) for k, v in st.t.items()}
    if state.tv_edges is not None:
        arrays["tv_edges"] = state.tv_edges  # built from past means, so not recomputable
    if state.partition is not None:
        p = state.partition
        arrays.update({"partition.ids": p.ids, "partition.dynamic": p.dynamic,
                       "partition.variance": p.variance, "partition.ratio": p.ratio})
    meta = {"step": state.step, "stage": state.stage, "d_ref": state.d_ref,
            "config": state.config.to_text(), "deform": state.field.meta(), "adam_t": adam_t,
            "history": state.history,
            "prune_log": [[i, w, s] for i, w, s in state.prune_log],
            "scene_spec": state.scene_spec, "loss_window": state.loss_window}
    if extra_meta:
        meta.update(extra_meta)
    ad.save_tensors(path, arrays, meta)
    state.last_checkpoint = str(path)


def load_checkpoint(path):
    arrays, meta = ad.load_tensors(path)
    cfg = TrainConfig.from_text(meta["config"])
    sc = Scene(ids=arrays["scene.ids"], means=arrays["scene.means"], quats=arrays["scene.quats"],
               scales=arrays["scene.scales"], opacities=arrays["scene.opacities"],
               colors=arrays["scene.colors"], features=arrays["scene.features"],
               has_feature=arrays["scene.has_feature"].astype(bool))
    deform = {k[7:]: v for k, v in arrays.items() if k.startswith("deform.")}
    fld = DeformationField.from_arrays(deform, meta["deform"], sc)
    state = TrainState(cfg, int(meta["step"]), meta["stage"], sc, fld, float(meta["d_ref"]))
    for tag in ("adam_scene", "adam_deform"):
        st = getattr(state, tag)
        for name, t in meta["adam_t"][tag].items():
            st.m[name] = arrays[f"{tag}.m.{name}"]
            st.v[name] = arrays[f"{tag}.v.{name}"]
            st.t[name] = int(t)
    if "partition.ids" in arrays:
        state.partition = Partition(arrays["partition.ids"], arrays["partition.dynamic"].astype(bool),
                                    arrays["partition.variance"], arrays["partition.ratio"])
    state.history = list(meta["history"])
    state.prune_log = [tuple(x) for x in meta.get("prune_log", [])]
    state.scene_spec = meta.get("scene_spec")
    state.loss_window = [float(x) for x in meta.get("loss_window", [])]
    state.last_checkpoint = str(path)
    if "tv_edges" in arrays:
        state.tv_edges = arrays["tv_edges"].astype(np.int64)
    else:
        _rebuild_tv_edges(state)
    return state, meta


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def training_order(config, pairs):
    rng = np.random.default_rng([config.seed, 2])
    return [pairs[i] for i in rng.permutation(len(pairs))]


def fit(config, dataset, out_dir=None, state=None, background=(0.0, 0.0, 0.0), progress=None):
    """Train for ``config.steps`` steps (resuming from ``state`` if given).

    Writes ``metrics.csv``, ``checkpoint.dsckpt``, ``partition.txt`` and
    ``prune_report.txt`` to ``out_dir`` when one is given.
    ``progress(state)`` is called after every step.
    """
    config.validate()
    if dataset.n_frames < 2:
        raise InvalidInputError("training needs at least two frames")
    if state is None:
        state = init_state(config, dataset)
    train, hold = split_pairs(dataset.n_views, dataset.n_frames, config.holdout_stride)
    order = training_order(config, train)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.step < config.steps:
        b = config.batch
        batch = [order[(state.step * b + i) % len(order)] for i in range(b)]
        grads = train_step(state, dataset, [p[0] for p in batch], [p[1] for p in batch],
                           background)
        state.loss_window.append(float(grads.loss))
        s = state.step
        if s % config.eval_every == 0 or s == config.steps:
            p, q = evaluate(state, dataset, hold, background)
            state.history.append({"step": s, "stage": state.stage,
                                  "loss": float(np.mean(state.loss_window)), "psnr": p, "ssim": q,
                                  "n_gaussians": len(state.scene), "n_dynamic": state.n_dynamic})
            state.loss_window = []
            log.info("step %d [%s] loss %.5f heldout psnr %.2f ssim %.4f", s, state.stage,
                     state.history[-1]["loss"], p, q)
        if progress:
            progress(state)
        if out is not None and config.checkpoint_every and s % config.checkpoint_every == 0:
            save_checkpoint(state, out / "checkpoint.dsckpt")
    if out is not None:
        write_outputs(state, out)
    final = state.history[-1] if state.history else {}
    return state, final


def write_outputs(state, out):
    out = Path(out)
    (out / "metrics.csv").write_text(metrics_csv(state.history))
    save_checkpoint(state, out / "checkpoint.dsckpt")
    if state.partition is not None:
        state.partition.write(out / "partition.txt")
    lines = ["# id importance step"] + [f"{i} {float(w)!r} {s}" for i, w, s in state.prune_log]
    (out / "prune_report.txt").write_text("\n".join(lines) + "\n")
