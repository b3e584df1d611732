"""Per-Gaussian, per-time offsets: a single deformation MLP early on, then a
static branch and a blended motion-mode branch with neighbor-averaged
(coarse) plus learned residual (fine) offsets for dynamic Gaussians.

Offsets are 10-vectors laid out ``[d_mu (3), d_rot (4), d_scale (3)]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateRotationError, InvalidInputError
from .gaussian import FEATURE_DIM, SCALE_FLOOR, normalize_backward

OFFSET_DIM = 10
POS_FREQS = 10
TIME_FREQS = 6
HIDDEN = 64


@dataclass
class OffsetTriple:
    d_mu: np.ndarray
    d_rot: np.ndarray
    d_scale: np.ndarray

    def __post_init__(self):
        self.d_mu = np.asarray(self.d_mu, dtype=np.float64).reshape(3)
        self.d_rot = np.asarray(self.d_rot, dtype=np.float64).reshape(4)
        self.d_scale = np.asarray(self.d_scale, dtype=np.float64).reshape(3)

    @classmethod
    def zeros(cls):
        return cls(np.zeros(3), np.zeros(4), np.zeros(3))

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(OFFSET_DIM)
        return cls(v[0:3], v[3:7], v[7:10])

    def as_vector(self):
        return np.concatenate([self.d_mu, self.d_rot, self.d_scale])


# ---------------------------------------------------------------------------
# neighbor graph
# ---------------------------------------------------------------------------

@dataclass
class NeighborGraph:
    ids: np.ndarray
    neighbors: np.ndarray  # (n, k') row positions, not ids

    @property
    def k(self):
        return self.neighbors.shape[1]

    def neighbor_ids(self, i):
        return self.ids[self.neighbors[i]]

    def averaging_matrix(self):
        n = len(self.ids)
        A = np.zeros((n, n))
        if self.k == 0:
            return np.eye(n)
        rows = np.repeat(np.arange(n), self.k)
        np.add.at(A, (rows, self.neighbors.ravel()), 1.0 / self.k)
        return A

    def edges(self):
        """Unordered neighbor pairs (each once) as an (E, 2) array of row positions."""
        if self.k == 0:
            return np.zeros((0, 2), dtype=np.int64)
        i = np.repeat(np.arange(len(self.ids)), self.k)
        j = self.neighbors.ravel()
        pairs = np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1)
        return np.unique(pairs, axis=0)


def build_neighbor_graph(positions, ids=None, k=8):
    """k nearest neighbors by Euclidean distance (ties broken by row order)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    kk = max(0, min(k, n - 1))
    if kk == 0:
        return NeighborGraph(ids, np.zeros((n, 0), dtype=np.int64))
    d2 = np.sum((positions[:, None, :] - positions[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nb = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    return NeighborGraph(ids, nb.astype(np.int64))


# ---------------------------------------------------------------------------
# network inputs and single-Gaussian operations
# ---------------------------------------------------------------------------

def deform_inputs(means, t, pos_freqs=POS_FREQS, time_freqs=TIME_FREQS):
    """Encoded ``[gamma(mu), gamma(t)]`` rows for N Gaussians at time t."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    te = ad.positional_encoding(np.array([float(t)]), time_freqs)
    return np.concatenate([ad.positional_encoding(means, pos_freqs),
                           np.broadcast_to(te, (len(means), len(te)))], axis=1)


def deform_input_dim(pos_freqs=POS_FREQS, time_freqs=TIME_FREQS):
    return 2 * pos_freqs * 3 + 2 * time_freqs


def _check_t(t):
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"normalized time {t} outside [0, 1]")


def deform_single(net, gaussian, t, pos_freqs=POS_FREQS, time_freqs=TIME_FREQS):
    _check_t(t)
    x = deform_inputs(gaussian.mu_c[None], t, pos_freqs, time_freqs)
    return OffsetTriple.from_vector(ad.mlp_forward(net, x).data[0])


@dataclass
class MotionBlend:
    mode_params: list
    betas: np.ndarray

    def __post_init__(self):
        if len(self.mode_params) < 1:
            raise InvalidInputError("a motion blend needs at least one mode")
        self.betas = np.asarray(self.betas, dtype=np.float64).reshape(len(self.mode_params))

    @property
    def M(self):
        return len(self.mode_params)

    def weights(self):
        z = np.exp(self.betas - self.betas.max())
        return z / z.sum()


def motion_inputs(means, scales, quats, t, pos_freqs=POS_FREQS, time_freqs=TIME_FREQS):
    return np.concatenate([deform_inputs(means, t, pos_freqs, time_freqs),
                           np.asarray(scales).reshape(-1, 3), np.asarray(quats).reshape(-1, 4)],
                          axis=1)


def blend_forward(blend, x, leaves=None):
    """Softmax(beta)-weighted sum of the mode outputs for input rows ``x``."""
    n = x.shape[0]
    if leaves is None:
        modes = [ad.mlp_forward(p, x) for p in blend.mode_params]
        betas = ad.Tensor(blend.betas)
    else:
        modes = [ad.mlp_forward(p, x, leaves[f"mode{m}"]) for m, p in enumerate(blend.mode_params)]
        betas = leaves["betas"]
    w = ad.reshape(ad.softmax(betas), (1, blend.M))
    stacked = ad.concat([ad.reshape(o, (1, n * OFFSET_DIM)) for o in modes], axis=0)
    return ad.reshape(ad.matmul(w, stacked), (n, OFFSET_DIM))


def adaptive_motion(blend, gaussian, t, pos_freqs=POS_FREQS, time_freqs=TIME_FREQS):
    _check_t(t)
    x = motion_inputs(gaussian.mu_c[None], gaussian.scale_c[None], gaussian.rot_c[None], t,
                      pos_freqs, time_freqs)
    return OffsetTriple.from_vector(blend_forward(blend, x).data[0])


def coarse_offset(g, raw_offsets, graph):
    """Mean of the neighbors' raw offsets for row ``g`` (own offset when isolated)."""
    raw = np.asarray(raw_offsets, dtype=np.float64).reshape(-1, OFFSET_DIM)
    nb = graph.neighbors[g]
    if len(nb) == 0:
        return OffsetTriple.from_vector(raw[g])
    return OffsetTriple.from_vector(raw[nb].mean(axis=0))


def fine_offset(refiner, coarse, feature):
    if feature is None:
        raise InvalidInputError("fine offsets need a per-Gaussian feature vector")
    feature = np.asarray(feature, dtype=np.float64).reshape(FEATURE_DIM)
    x = np.concatenate([coarse.as_vector(), feature])[None]
    return OffsetTriple.from_vector(ad.mlp_forward(refiner, x).data[0])


def compose_offsets(coarse, fine):
    return OffsetTriple(coarse.d_mu + fine.d_mu, coarse.d_rot + fine.d_rot,
                        coarse.d_scale + fine.d_scale)


def apply_offsets(gaussian, triple):
    """Time-t ``(mu, rot, scale)`` for one Gaussian."""
    mu, q, s, _ = apply_offsets_batch(gaussian.mu_c[None], gaussian.rot_c[None],
                                      gaussian.scale_c[None], triple.as_vector()[None])
    return mu[0], q[0], s[0]


def apply_offsets_batch(means, quats, scales, offsets):
    """Additive offsets; quaternions renormalized, scales floored at 1e-6."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, OFFSET_DIM)
    mu = means + offsets[:, 0:3]
    q_raw = quats + offsets[:, 3:7]
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateRotationError("quaternion vanished after adding its offset")
    s_raw = scales + offsets[:, 7:10]
    return mu, q_raw / norm, np.maximum(s_raw, SCALE_FLOOR), (q_raw, s_raw)


def apply_offsets_backward(ctx, dmu, dq, ds):
    """Gradients w.r.t. (canonical mean, canonical quat, canonical scale, offsets)."""
    q_raw, s_raw = ctx
    dq_raw = normalize_backward(q_raw, dq)
    ds_raw = ds * (s_raw > SCALE_FLOOR)
    return dmu, dq_raw, ds_raw, np.concatenate([dmu, dq_raw, ds_raw], axis=1)


# ---------------------------------------------------------------------------
# the full deformation field
# ---------------------------------------------------------------------------

class DeformationField:
    """All deformation parameters for a scene plus the stage they belong to.

    In the ``early`` stage every Gaussian goes through ``static_net``.  After
    separation, static Gaussians keep ``static_net`` and dynamic Gaussians use
    ``blend`` (raw offsets), neighbor averaging over ``graph`` (coarse) and
    ``refiner`` (fine).
    """

    def __init__(self, static_net, pos_freqs=POS_FREQS, time_freqs=TIME_FREQS, k=8):
        self.static_net = static_net
        self.pos_freqs = pos_freqs
        self.time_freqs = time_freqs
        self.k = k
        self.stage = "early"
        self.blend = None
        self.refiner = None
        self.hierarchy = True
        self.dynamic_ids = np.zeros(0, dtype=np.int64)
        self.graph = None

    @classmethod
    def create(cls, rng, pos_freqs=POS_FREQS, time_freqs=TIME_FREQS, k=8):
        net = ad.init_mlp([deform_input_dim(pos_freqs, time_freqs), HIDDEN, HIDDEN, OFFSET_DIM], rng)
        return cls(net, pos_freqs, time_freqs, k)

    @property
    def M(self):
        return 0 if self.blend is None else self.blend.M

    def separate(self, dynamic_ids, canonical_means_dyn, rng, modes=4, hierarchy=True,
                 noise=1e-3):
        """Switch to the separated stage.

        Each motion mode starts as a copy of the early network with an extra
        identity hidden layer (exact for post-ReLU activations) and zero
        columns for the scale/rotation inputs, plus small noise so the modes
        can diverge.  Equal betas make the initial blend equal the early net.
        """
        self.stage = "separated"
        self.hierarchy = hierarchy
        self.dynamic_ids = np.asarray(dynamic_ids, dtype=np.int64)
        base = self.static_net
        modes_params = []
        for _ in range(modes):
            w0 = np.vstack([base.weights[0], np.zeros((7, base.weights[0].shape[1]))])
            ws = [w0] + [w.copy() for w in base.weights[1:-1]] + [np.eye(HIDDEN), base.weights[-1].copy()]
            bs = [b.copy() for b in base.biases[:-1]] + [np.zeros(HIDDEN), base.biases[-1].copy()]
            for i in range(len(ws) - 1):
                lim = np.sqrt(6.0 / sum(ws[i].shape))
                ws[i] = ws[i] + noise * lim * rng.standard_normal(ws[i].shape)
            modes_params.append(ad.MlpParams(ws, bs))
        self.blend = MotionBlend(modes_params, np.zeros(modes))
        self.refiner = ad.init_mlp([OFFSET_DIM + FEATURE_DIM, HIDDEN, HIDDEN, OFFSET_DIM], rng)
        self.graph = build_neighbor_graph(canonical_means_dyn, self.dynamic_ids, self.k)

    def rebuild_graph(self, scene):
        if self.stage != "separated":
            return
        keep = np.isin(self.dynamic_ids, scene.ids)
        self.dynamic_ids = self.dynamic_ids[keep]
        rows = _rows_of(scene.ids, self.dynamic_ids)
        self.graph = build_neighbor_graph(scene.means[rows], self.dynamic_ids, self.k)

    # -- parameters -------------------------------------------------------

    def arrays(self):
        out = dict(self.static_net.arrays("static"))
        if self.blend is not None:
            for m, p in enumerate(self.blend.mode_params):
                out.update(p.arrays(f"mode{m}"))
            out["betas"] = self.blend.betas
            out.update(self.refiner.arrays("refiner"))
        return out

    def meta(self):
        return {
            "stage": self.stage, "M": self.M, "k": self.k, "pos_freqs": self.pos_freqs,
            "time_freqs": self.time_freqs, "hierarchy": self.hierarchy,
            "dynamic_ids": [int(i) for i in self.dynamic_ids],
        }

    @classmethod
    def from_arrays(cls, arrays, meta, scene=None):
        f = cls(ad.MlpParams.from_arrays(arrays, "static"), meta["pos_freqs"],
                meta["time_freqs"], meta["k"])
        f.stage = meta["stage"]
        f.hierarchy = meta.get("hierarchy", True)
        f.dynamic_ids = np.asarray(meta.get("dynamic_ids", []), dtype=np.int64)
        if f.stage == "separated":
            f.blend = MotionBlend([ad.MlpParams.from_arrays(arrays, f"mode{m}")
                                   for m in range(meta["M"])], arrays["betas"])
            f.refiner = ad.MlpParams.from_arrays(arrays, "refiner")
            if scene is not None:
                f.rebuild_graph(scene)
        return f

    # -- evaluation -------------------------------------------------------

    def offsets(self, scene, t, leaves=None, feature_leaf=None):
        """Offsets (N, 10) for every Gaussian of ``scene`` at time ``t`` as a Tensor.

        ``leaves`` maps parameter groups to leaf tensors (see ``make_leaves``);
        ``feature_leaf`` is a leaf over the dynamic rows' features.
        """
        _check_t(t)
        n = len(scene)
        if self.stage == "early":
            x = deform_inputs(scene.means, t, self.pos_freqs, self.time_freqs)
            return ad.mlp_forward(self.static_net, x, None if leaves is None else leaves["static"])

        dyn_rows = _rows_of(scene.ids, self.dynamic_ids)
        is_dyn = np.zeros(n, dtype=bool)
        is_dyn[dyn_rows] = True
        st_rows = np.flatnonzero(~is_dyn)
        parts = []
        if len(st_rows):
            xs = deform_inputs(scene.means[st_rows], t, self.pos_freqs, self.time_freqs)
            parts.append(ad.mlp_forward(self.static_net, xs, None if leaves is None else leaves["static"]))
        if len(dyn_rows):
            xd = motion_inputs(scene.means[dyn_rows], scene.scales[dyn_rows], scene.quats[dyn_rows],
                               t, self.pos_freqs, self.time_freqs)
            raw = blend_forward(self.blend, xd, leaves)
            if self.hierarchy:
                coarse = ad.matmul(ad.Tensor(self.graph.averaging_matrix()), raw)
                feats = feature_leaf if feature_leaf is not None else ad.Tensor(scene.features[dyn_rows])
                fine = ad.mlp_forward(self.refiner, ad.concat([coarse, feats], axis=1),
                                      None if leaves is None else leaves["refiner"])
                raw = coarse + fine
            parts.append(raw)
        out = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        perm = np.concatenate([st_rows, dyn_rows])
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        return ad.take_rows(out, inv)

    def make_leaves(self):
        leaves = {"static": ad.mlp_leaves(self.static_net, "static")}
        if self.stage == "separated":
            for m, p in enumerate(self.blend.mode_params):
                leaves[f"mode{m}"] = ad.mlp_leaves(p, f"mode{m}")
            leaves["betas"] = ad.leaf(self.blend.betas, "betas")
            leaves["refiner"] = ad.mlp_leaves(self.refiner, "refiner")
        return leaves

    def param_arrays_for_leaves(self):
        """Flat name -> array mapping matching the leaf names (arrays are live)."""
        return self.arrays()


def _rows_of(all_ids, wanted):
    pos = {int(i): r for r, i in enumerate(all_ids)}
    return np.array([pos[int(i)] for i in wanted if int(i) in pos], dtype=np.int64)
