"""Synthetic dynamic scenes with exact ground truth.

A scene is a textured ground disc and two static clusters, plus groups of
dynamic Gaussians that follow analytic recipes (linear translation,
sinusoidal oscillation, scale pulsation).  Cameras sit on an orbit and drift
slowly around it over time, so both object motion and camera-induced flow
are present.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .gaussian import Camera, Scene, save_scene
from .opacity import reference_distance
from .pipeline import assemble, render_scene
from .render import read_depth, read_ppm, to_bytes, write_depth, write_ppm
from .separation import FlowMap, offset_variances, read_flow, write_flow


@dataclass
class MotionRecipe:
    kind: str = "sinusoid"          # "translate" or "sinusoid"
    vector: tuple = (0.0, 0.4, 0.0)  # velocity (translate) or amplitude (sinusoid)
    frequency: float = 1.0           # cycles per unit time (sinusoid)
    pulse: float = 0.0               # relative scale pulsation amplitude
    pulse_frequency: float = 1.0

    def position_offset(self, t):
        v = np.asarray(self.vector, dtype=np.float64)
        if self.kind == "translate":
            return v * t
        if self.kind == "sinusoid":
            return v * np.sin(2.0 * np.pi * self.frequency * t)
        raise InvalidInputError(f"unknown motion recipe {self.kind!r}")

    def scale_offset(self, t, scales):
        return np.asarray(scales) * self.pulse * np.sin(2.0 * np.pi * self.pulse_frequency * t)

    def encode(self):
        return " ".join([self.kind] + [repr(float(x)) for x in self.vector]
                        + [repr(float(self.frequency)), repr(float(self.pulse)),
                           repr(float(self.pulse_frequency))])

    @classmethod
    def decode(cls, text):
        tok = text.split()
        return cls(tok[0], tuple(float(x) for x in tok[1:4]), float(tok[4]), float(tok[5]),
                   float(tok[6]))


def _default_groups():
    return [
        MotionRecipe("sinusoid", (0.0, 0.25, 0.0), 1.0),
        MotionRecipe("sinusoid", (0.18, 0.18, 0.0), 1.0),
        MotionRecipe("translate", (0.0, 0.5, 0.0)),
        MotionRecipe("sinusoid", (0.0, 0.25, 0.1), 1.0, pulse=0.3),
        MotionRecipe("sinusoid", (0.0, -0.25, 0.05), 1.0),
    ]


@dataclass
class SceneSpec:
    n_static: int = 200
    n_dynamic: int = 50
    groups: list = field(default_factory=_default_groups)
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    n_views: int = 4
    n_frames: int = 8
    orbit_radius: float = 4.0
    elevation_deg: float = 30.0
    drift: float = 0.01            # radians of orbit per frame
    dynamic_size: float = 0.14     # major-axis scale of dynamic Gaussians
    cluster_radius: float = 0.2    # spread of each dynamic group
    group_radius: float = 0.75     # dynamic groups sit on a ring of this radius
    group_height: float = 0.15
    noise: float = 0.0             # std of additive image noise
    point_jitter: float = 0.02     # std of the init point-cloud position noise
    color_jitter: float = 0.03
    n_outliers: int = 10           # init points placed outside every frustum
    far_plane: float = 100.0
    background: tuple = (0.0, 0.0, 0.0)
    tau_var: float = 0.01
    seed: int = 0

    def validate(self):
        if self.n_static < 0 or self.n_dynamic < 0 or self.n_static + self.n_dynamic == 0:
            raise InvalidInputError("scene needs at least one Gaussian")
        if self.n_dynamic and not self.groups:
            raise InvalidInputError("dynamic Gaussians need at least one motion group")
        if self.n_views < 1 or self.n_frames < 1:
            raise InvalidInputError("need at least one view and one frame")

    def times(self):
        if self.n_frames == 1:
            return np.zeros(1)
        return np.arange(self.n_frames) / (self.n_frames - 1)

    def to_lines(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "groups":
                lines += [f"spec.group.{i} = {g.encode()}" for i, g in enumerate(v)]
            elif isinstance(v, tuple):
                lines.append(f"spec.{f.name} = {' '.join(repr(float(x)) for x in v)}")
            else:
                lines.append(f"spec.{f.name} = {v!r}")
        return lines

    @classmethod
    def from_lines(cls, lines):
        kw, groups = {}, []
        types = {f.name: f for f in fields(cls)}
        for line in lines:
            if not line.startswith("spec."):
                continue
            key, _, val = line[5:].partition(" = ")
            if key.startswith("group."):
                groups.append((int(key.split(".")[1]), MotionRecipe.decode(val)))
            elif key in types:
                default = getattr(cls(), key)
                if isinstance(default, tuple):
                    kw[key] = tuple(float(x) for x in val.split())
                elif isinstance(default, bool):
                    kw[key] = val == "True"
                elif isinstance(default, int):
                    kw[key] = int(val)
                else:
                    kw[key] = float(val)
        kw["groups"] = [g for _, g in sorted(groups)]
        return cls(**kw)


PRESETS = {
    "mini": SceneSpec(),
    "static": SceneSpec(n_dynamic=0),
    "tiny": SceneSpec(n_static=40, n_dynamic=20, groups=_default_groups()[:2], width=32,
                      height=32, n_views=2, n_frames=4, n_outliers=4),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise InvalidInputError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")
    spec = replace(PRESETS[name], groups=list(PRESETS[name].groups))
    return replace(spec, **overrides)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def rig_camera(spec, view, t):
    """Camera for ``view`` at normalized time ``t`` (continuous in t)."""
    frame = t * max(spec.n_frames - 1, 0)
    az = 2.0 * np.pi * view / spec.n_views + np.pi / 4 + spec.drift * frame
    el = np.radians(spec.elevation_deg)
    eye = spec.orbit_radius * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    return Camera.look_at(eye, np.zeros(3), f, f, spec.width / 2.0, spec.height / 2.0,
                          spec.width, spec.height)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def _axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


@dataclass
class GeneratedScene:
    spec: SceneSpec
    scene: Scene
    dynamic: np.ndarray       # per row
    group: np.ndarray         # per row, -1 for static
    cameras: list             # [view][frame]
    times: np.ndarray
    d_ref: float
    points: np.ndarray        # (P, 6) xyz rgb

    @property
    def labels(self):
        return dict(zip((int(i) for i in self.scene.ids), (bool(d) for d in self.dynamic)))

    def offsets_at(self, t):
        """Ground-truth (N, 10) offsets at normalized time t."""
        out = np.zeros((len(self.scene), 10))
        for r in np.flatnonzero(self.dynamic):
            recipe = self.spec.groups[self.group[r]]
            out[r, 0:3] = recipe.position_offset(t)
            out[r, 7:10] = recipe.scale_offset(t, self.scene.scales[r])
        return out

    def offsets(self):
        return np.stack([self.offsets_at(t) for t in self.times])

    def camera(self, view, t):
        return rig_camera(self.spec, view, t)

    def render(self, view, t, threads=1, retain=False):
        cam = self.camera(view, t)
        return render_scene(self.scene, self.offsets_at(t), cam, self.d_ref,
                            self.spec.background, threads=threads, retain=retain)[0]


def generate(spec):
    """Build a ground-truth scene from ``spec`` (deterministic in ``spec.seed``)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means, quats, scales, colors, opac, group = [], [], [], [], [], []

    n_ground = int(round(0.75 * spec.n_static))
    n_clusters = spec.n_static - n_ground
    # ground disc of flat surfels with a smooth color field
    r = 1.6 * np.sqrt(rng.uniform(0, 1, n_ground))
    th = rng.uniform(0, 2 * np.pi, n_ground)
    gx, gz = r * np.cos(th), r * np.sin(th)
    gy = -0.55 + 0.02 * rng.standard_normal(n_ground)
    for i in range(n_ground):
        tilt = _axis_angle_quat(rng.standard_normal(3) * [1, 0, 1] + [1e-9, 0, 0], rng.uniform(0, 0.2))
        spin = _axis_angle_quat([0, 1, 0], rng.uniform(0, np.pi))
        means.append([gx[i], gy[i], gz[i]])
        quats.append(_quat_mul(tilt, spin))
        scales.append(np.array([0.17, 0.04, 0.17]) * rng.uniform(0.85, 1.15, 3))
        colors.append(np.clip([0.5 + 0.35 * np.sin(2.2 * gx[i]), 0.45 + 0.3 * np.cos(1.7 * gz[i]),
                               0.35 + 0.25 * np.sin(1.3 * (gx[i] + gz[i]))]
                              + 0.04 * rng.standard_normal(3), 0, 1))
        opac.append(rng.uniform(0.8, 1.0))
        group.append(-1)
    # static clusters
    centers = [np.array([-0.8, -0.25, 0.7]), np.array([0.75, -0.2, -0.75])]
    tints = [np.array([0.9, 0.85, 0.2]), np.array([0.2, 0.8, 0.85])]
    for i in range(n_clusters):
        c = i % 2
        means.append(centers[c] + 0.18 * rng.standard_normal(3) * [1, 0.8, 1])
        quats.append(_random_quats(rng, 1)[0])
        scales.append(np.array([0.1, 0.1, 0.05]) * rng.uniform(0.8, 1.2, 3))
        colors.append(np.clip(tints[c] + 0.08 * rng.standard_normal(3), 0, 1))
        opac.append(rng.uniform(0.75, 1.0))
        group.append(-1)
    # dynamic groups
    n_groups = len(spec.groups)
    palette = np.array([[0.95, 0.25, 0.2], [0.3, 0.35, 0.95], [0.95, 0.5, 0.9],
                        [0.35, 0.95, 0.35], [1.0, 0.6, 0.15], [0.6, 0.3, 0.9]])
    if spec.n_dynamic:
        sizes = np.full(n_groups, spec.n_dynamic // n_groups)
        sizes[: spec.n_dynamic % n_groups] += 1
        for gi, size in enumerate(sizes):
            ang = 2 * np.pi * gi / n_groups + 0.3
            center = np.array([spec.group_radius * np.cos(ang), spec.group_height + 0.12 * (gi % 3),
                               spec.group_radius * np.sin(ang)])
            recipe = spec.groups[gi]
            if recipe.kind == "translate":
                center = center - 0.5 * np.asarray(recipe.vector)
            for _ in range(size):
                means.append(center + spec.cluster_radius * rng.standard_normal(3))
                quats.append(_random_quats(rng, 1)[0])
                scales.append(spec.dynamic_size * np.array([1.0, 1.0, 0.5]) * rng.uniform(0.8, 1.2, 3))
                colors.append(np.clip(palette[gi % len(palette)] + 0.06 * rng.standard_normal(3), 0, 1))
                opac.append(rng.uniform(0.8, 1.0))
                group.append(gi)

    n = len(means)
    group = np.array(group)
    ids = rng.permutation(n)
    scene = Scene(ids=ids, means=means, quats=quats, scales=scales, opacities=opac, colors=colors)
    times = spec.times()
    cameras = [[rig_camera(spec, v, t) for t in times] for v in range(spec.n_views)]
    centroid = np.median(scene.means, axis=0)
    d_ref = reference_distance([c.position for row in cameras for c in row], centroid)

    pts = scene.means + spec.point_jitter * rng.standard_normal((n, 3))
    pcol = np.clip(scene.colors + spec.color_jitter * rng.standard_normal((n, 3)), 0, 1)
    # high enough that every orbit camera sees them behind its image plane by > 1 unit
    y0 = (spec.orbit_radius + 1.0 + 1.5) / np.sin(np.radians(spec.elevation_deg))
    k = spec.n_outliers
    out_pts = np.column_stack([rng.uniform(-1, 1, k), rng.uniform(y0, y0 + 2, k), rng.uniform(-1, 1, k)])
    out_col = rng.uniform(0, 1, (spec.n_outliers, 3))
    points = np.vstack([np.hstack([pts, pcol]), np.hstack([out_pts, out_col])])

    gen = GeneratedScene(spec, scene, group >= 0, group, cameras, times, d_ref, points)
    _check_margins(gen)
    return gen


def _check_margins(gen):
    if not gen.dynamic.any() or len(gen.times) < 2:
        return
    var = offset_variances(gen.offsets()[:, :, 0:3].transpose(1, 0, 2))
    low = var[gen.dynamic].min()
    if low <= 2 * gen.spec.tau_var:
        raise InvalidInputError(
            f"dynamic offset variance {low:.4g} is within 2x of tau_var={gen.spec.tau_var}")


# ---------------------------------------------------------------------------
# ground-truth flow
# ---------------------------------------------------------------------------

def center_flow(means_t, means_t1, cam_t, cam_t1):
    uv0, z0 = cam_t.project_points(means_t)
    uv1, z1 = cam_t1.project_points(means_t1)
    ok = (z0 > 1e-4) & (z1 > 1e-4)
    return np.where(ok[:, None], uv1 - uv0, 0.0), ok


def far_plane_flow(cam_t, cam_t1, far):
    h, w = cam_t.height, cam_t.width
    return _reproject_grid(np.full((h, w), float(far)), cam_t, cam_t1)


def _reproject_grid(depth, cam_t, cam_t1):
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(np.float64)
    world = cam_t.unproject(pix, depth.reshape(-1))
    uv, z = cam_t1.project_points(world)
    return (uv - pix).reshape(h, w, 2), (z > 1e-4).reshape(h, w)


def ground_truth_flow(scene, offsets_t, offsets_t1, cam_t, cam_t1, d_ref, far=100.0):
    """Per pixel: projected-center displacement of the frontmost contributing
    Gaussian; background pixels carry the far-plane camera flow."""
    h, w = cam_t.height, cam_t.width
    result, ctx = render_scene(scene, offsets_t, cam_t, d_ref, retain=True)
    means_t1 = scene.means + np.asarray(offsets_t1)[:, 0:3]
    cflow, cok = center_flow(ctx.means, means_t1, cam_t, cam_t1)
    front = np.full(h * w, -1, dtype=np.int64)
    for band in result._bands:
        if band is None:
            continue
        cand, y0, alpha = band[0], band[1], band[2]
        hit = alpha > 0
        anyhit = hit.any(axis=0)
        first = np.argmax(hit, axis=0)
        px = y0 * w + np.arange(alpha.shape[1])
        front[px[anyhit]] = cand[first[anyhit]]
    bg_flow, bg_ok = far_plane_flow(cam_t, cam_t1, far)
    flow = bg_flow.reshape(-1, 2).copy()
    valid = bg_ok.reshape(-1).copy()
    fg = front >= 0
    flow[fg] = cflow[front[fg]]
    valid[fg] = cok[front[fg]]
    return FlowMap(flow.reshape(h, w, 2), valid.reshape(h, w))


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "DSDATA1"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def frame_image(gen, view, f, rng=None):
    img = gen.render(view, gen.times[f]).image
    if gen.spec.noise > 0 and rng is not None:
        img = img + gen.spec.noise * rng.standard_normal(img.shape)
    return to_bytes(img)


def render_dataset(gen, out_dir):
    """Write frames, depth maps, flows, cameras, ground truth and a manifest."""
    out = Path(out_dir)
    spec = gen.spec
    T = len(gen.times)
    noise_rng = np.random.default_rng(spec.seed + 1)
    files = []
    for v in range(spec.n_views):
        for sub in ("frames", "depth", "flow"):
            (out / sub / str(v)).mkdir(parents=True, exist_ok=True)
        for f in range(T):
            res = gen.render(v, gen.times[f])
            img = res.image
            if spec.noise > 0:
                img = img + spec.noise * noise_rng.standard_normal(img.shape)
            p = out / "frames" / str(v) / f"{f}.ppm"
            write_ppm(p, img)
            files.append(p)
            p = out / "depth" / str(v) / f"{f}.dsd"
            write_depth(p, res.depth)
            files.append(p)
            if f + 1 < T:
                fm = ground_truth_flow(gen.scene, gen.offsets_at(gen.times[f]),
                                       gen.offsets_at(gen.times[f + 1]), gen.cameras[v][f],
                                       gen.cameras[v][f + 1], gen.d_ref, spec.far_plane)
                p = out / "flow" / str(v) / f"{f}.dsflow"
                write_flow(p, fm)
                files.append(p)

    cam_lines = ["# view frame t R(9) T(3) fx fy cx cy width height"]
    for v in range(spec.n_views):
        for f in range(T):
            row = gen.cameras[v][f].as_row()
            cam_lines.append(f"{v} {f} {float(gen.times[f])!r} " + " ".join(repr(float(x)) for x in row))
    (out / "cameras.txt").write_text("\n".join(cam_lines) + "\n")
    files.append(out / "cameras.txt")

    save_scene(gen.scene, out / "scene_gt.dsplat")
    files.append(out / "scene_gt.dsplat")
    (out / "labels.txt").write_text(
        "# id label\n" + "".join(f"{int(i)} {'dynamic' if d else 'static'}\n"
                                 for i, d in zip(gen.scene.ids, gen.dynamic)))
    files.append(out / "labels.txt")
    mot = ["# frame t id d_mu(3) d_rot(4) d_scale(3)"]
    for f, t in enumerate(gen.times):
        off = gen.offsets_at(t)
        for r in np.flatnonzero(gen.dynamic):
            mot.append(f"{f} {float(t)!r} {int(gen.scene.ids[r])} " + " ".join(repr(float(x)) for x in off[r]))
    (out / "motion_gt.txt").write_text("\n".join(mot) + "\n")
    files.append(out / "motion_gt.txt")
    (out / "points.txt").write_text(
        "# x y z r g b\n" + "".join(" ".join(repr(float(x)) for x in p) + "\n" for p in gen.points))
    files.append(out / "points.txt")

    lines = [MANIFEST_HEADER, f"seed = {spec.seed}", f"d_ref = {float(gen.d_ref)!r}"] + spec.to_lines()
    lines += [f"file {_sha256(p)} {p.relative_to(out).as_posix()}" for p in sorted(files)]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out / "manifest.txt"


def verify_manifest(data_dir):
    """List of files whose checksum no longer matches the manifest."""
    data_dir = Path(data_dir)
    bad = []
    for line in (data_dir / "manifest.txt").read_text().splitlines():
        if line.startswith("file "):
            _, digest, rel = line.split(" ", 2)
            p = data_dir / rel
            if not p.exists() or _sha256(p) != digest:
                bad.append(rel)
    return bad


def read_manifest(data_dir):
    lines = (Path(data_dir) / "manifest.txt").read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{data_dir}: missing {MANIFEST_HEADER} manifest")
    return lines


@dataclass
class Dataset:
    """Training inputs: images, cameras, optical flows and an init point cloud."""

    spec: SceneSpec
    images: list      # [view][frame] float arrays
    cameras: list     # [view][frame]
    times: np.ndarray
    flows: list       # [view][frame] FlowMap or None (last frame)
    points: np.ndarray
    gt: GeneratedScene | None = None

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def n_frames(self):
        return len(self.times)

    @classmethod
    def from_generated(cls, gen):
        """In-memory dataset identical to what ``render_dataset`` + ``load`` give."""
        spec = gen.spec
        T = len(gen.times)
        noise_rng = np.random.default_rng(spec.seed + 1)
        images, flows = [], []
        for v in range(spec.n_views):
            row, frow = [], []
            for f in range(T):
                img = gen.render(v, gen.times[f]).image
                if spec.noise > 0:
                    img = img + spec.noise * noise_rng.standard_normal(img.shape)
                row.append(to_bytes(img).astype(np.float64) / 255.0)
                if f + 1 < T:
                    fm = ground_truth_flow(gen.scene, gen.offsets_at(gen.times[f]),
                                           gen.offsets_at(gen.times[f + 1]), gen.cameras[v][f],
                                           gen.cameras[v][f + 1], gen.d_ref, spec.far_plane)
                    frow.append(FlowMap(fm.flow.astype(np.float32).astype(np.float64), fm.valid))
                else:
                    frow.append(None)
            images.append(row)
            flows.append(frow)
        pts = np.array([[float(repr(float(x))) for x in p] for p in gen.points])
        return cls(spec, images, [list(r) for r in gen.cameras], gen.times.copy(), flows, pts, gen)

    @classmethod
    def load(cls, data_dir):
        data_dir = Path(data_dir)
        spec = SceneSpec.from_lines(read_manifest(data_dir))
        cams, times = {}, {}
        for line in (data_dir / "cameras.txt").read_text().splitlines():
            if line.startswith("#") or not line.strip():
                continue
            tok = line.split()
            v, f = int(tok[0]), int(tok[1])
            times[f] = float(tok[2])
            cams[(v, f)] = Camera.from_row([float(x) for x in tok[3:]])
        V = 1 + max(v for v, _ in cams)
        T = 1 + max(f for _, f in cams)
        images, flows = [], []
        for v in range(V):
            images.append([read_ppm(data_dir / "frames" / str(v) / f"{f}.ppm") for f in range(T)])
            frow = []
            for f in range(T):
                p = data_dir / "flow" / str(v) / f"{f}.dsflow"
                frow.append(read_flow(p) if p.exists() else None)
            flows.append(frow)
        pts = np.loadtxt(data_dir / "points.txt", comments="#", ndmin=2)
        return cls(spec, images, [[cams[(v, f)] for f in range(T)] for v in range(V)],
                   np.array([times[f] for f in range(T)]), flows, pts)

    def depth(self, data_dir, view, frame):
        return read_depth(Path(data_dir) / "depth" / str(view) / f"{frame}.dsd")
