import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsplat.errors import InvalidInputError, NearSingularError
from dsplat.gaussian import covariances
from dsplat.opacity import (ImportanceTable, accumulate_importance, gaussian_normal,
                            modulate_opacity, modulate_opacity_backward, physical_opacity, prune,
                            reference_distance, write_prune_report)
from dsplat.pipeline import render_scene
from dsplat.render import SplatBatch, render

from conftest import axis_camera, make_camera, random_scene


def test_gaussian_normal_examples():
    n = gaussian_normal(np.diag([1.0, 1.0, 1e-4]), [0, 0, 1.0])
    np.testing.assert_allclose(n, [0, 0, -1.0], atol=1e-12)
    np.testing.assert_allclose(gaussian_normal(np.eye(3) * 0.3, [0.6, 0, 0.8]), [-0.6, 0, -0.8])
    cov = np.diag([2.0, 0.5, 1.0])
    a = gaussian_normal(cov, [0.3, 0.8, 0.2])
    b = gaussian_normal(cov, [-0.3, -0.8, -0.2])
    np.testing.assert_allclose(a, -b, atol=1e-12)


@pytest.mark.parametrize(
    "base, cos, dist, d_ref, expected",
    [
        (1.0, 1.0, 3.0, 3.0, 1.0),
        (1.0, 1.0, 6.0, 3.0, 0.25),
        (1.0, -0.5, 3.0, 3.0, 0.0),
        (0.8, 0.5, 1.0, 2.0, 1.0),
    ],
)
def test_physical_opacity_examples(base, cos, dist, d_ref, expected):
    normal = np.array([cos, np.sqrt(1 - cos**2), 0.0])
    assert physical_opacity(base, normal, [1.0, 0, 0], dist, d_ref) == pytest.approx(expected, abs=1e-12)


def test_physical_opacity_backfacing_unclamped_is_negative():
    normal = np.array([-0.5, np.sqrt(0.75), 0.0])
    assert 1.0 * float(normal @ [1.0, 0, 0]) < 0
    assert physical_opacity(1.0, normal, [1.0, 0, 0], 2.0, 2.0) == 0.0


def test_physical_opacity_errors():
    with pytest.raises(NearSingularError):
        physical_opacity(1.0, [1, 0, 0], [1, 0, 0], 1e-7, 1.0)
    with pytest.raises(InvalidInputError):
        physical_opacity(1.0, [1, 0, 0], [1, 0, 0], 1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 5))
def test_physical_opacity_monotone(base, cos, d1, d2, d_ref):
    n = np.array([cos, np.sqrt(1 - cos**2), 0.0])
    lo, hi = min(d1, d2), max(d1, d2)
    assert physical_opacity(base, n, [1, 0, 0], hi, d_ref) <= physical_opacity(base, n, [1, 0, 0], lo, d_ref)
    n2 = np.array([min(1.0, cos + 0.1), np.sqrt(1 - min(1.0, cos + 0.1) ** 2), 0])
    assert physical_opacity(base, n2, [1, 0, 0], d1, d_ref) >= physical_opacity(base, n, [1, 0, 0], d1, d_ref) - 1e-15


def test_reference_distance_is_median():
    cams = [[0, 0, 1.0], [0, 0, 2.0], [0, 0, 7.0]]
    assert reference_distance(cams, [0, 0, 0]) == 2.0


@pytest.mark.parametrize("fixed", [False, True])
def test_modulate_opacity_backward_finite_differences(rng, fixed):
    n = 6
    sc = random_scene(rng, n, opacity=(0.1, 0.3))
    sc.scales[:, 2] *= 0.3
    covs = covariances(sc.quats, sc.scales)
    cam = np.array([0.3, -0.2, -3.0])
    normals = None
    if fixed:
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    w = rng.normal(size=n)
    opac, ctx = modulate_opacity(sc.opacities, covs, sc.means, cam, 3.0, normals)
    db, dm, dc = modulate_opacity_backward(ctx, w)

    def f(base, means, cv):
        return float(w @ modulate_opacity(base, cv, means, cam, 3.0, normals)[0])

    h = 1e-6
    for i in range(n):
        for k in range(3):
            p, m = sc.means.copy(), sc.means.copy()
            p[i, k] += h
            m[i, k] -= h
            num = (f(sc.opacities, p, covs) - f(sc.opacities, m, covs)) / (2 * h)
            assert num == pytest.approx(dm[i, k], rel=1e-3, abs=1e-7)
        if not fixed:
            for r, c in ((0, 0), (0, 1), (1, 2), (2, 2)):
                p, m = covs.copy(), covs.copy()
                for arr, s in ((p, h), (m, -h)):
                    arr[i, r, c] += s
                    if r != c:
                        arr[i, c, r] += s
                num = (f(sc.opacities, sc.means, p) - f(sc.opacities, sc.means, m)) / (2 * h)
                ana = dc[i, r, c] * (1 if r == c else 2)
                assert num == pytest.approx(ana, rel=1e-3, abs=1e-6)
        p, m = sc.opacities.copy(), sc.opacities.copy()
        p[i] += h
        m[i] -= h
        num = (f(p, sc.means, covs) - f(m, sc.means, covs)) / (2 * h)
        assert num == pytest.approx(db[i], rel=1e-6, abs=1e-9)


def test_backfacing_splat_contributes_nothing(rng):
    sc = random_scene(rng, 8)
    cam = make_camera(24, 24)
    normals = rng.normal(size=(8, 3))
    to_cam = cam.position - sc.means
    # flip every normal to face the camera, then turn one around
    s = np.sign(np.sum(normals * to_cam, axis=1))
    normals *= s[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[3] *= -1
    with_it = render_scene(sc, None, cam, 3.0, normals=normals)[0].image
    keep = np.arange(8) != 3
    without = render_scene(sc.subset(keep), None, cam, 3.0, normals=normals[keep])[0].image
    assert np.array_equal(with_it, without)


def test_accumulate_importance_examples():
    cam = axis_camera(15, 15)
    covs = np.stack([np.eye(3) * 4.0, np.eye(3) * 0.01, np.eye(3) * 0.01])
    means = np.array([[0, 0, 2.0], [0, 0, 3.0], [50, 0, 2.0]])
    sb = SplatBatch(np.array([10, 11, 12]), means, covs, np.array([1.0, 0.6, 1.0]), np.ones((3, 3)))
    table = ImportanceTable([10, 11, 12])
    accumulate_importance(table, render(sb, cam), sb.ids)
    assert table.get(10) == pytest.approx(0.99)
    assert table.get(11) <= 0.01 * 0.6 + 1e-12
    assert table.get(12) == 0.0
    before = table.w.copy()
    accumulate_importance(table, render(SplatBatch(sb.ids, means, covs, np.full(3, 0.1), np.ones((3, 3))), cam), sb.ids)
    assert np.all(table.w >= before)
    table.reset()
    assert np.all(table.w == 0)


def test_prune_examples(tmp_path, rng):
    sc = random_scene(rng, 5)
    table = ImportanceTable(sc.ids)
    table.w[:] = 1.0
    kept, removed = prune(sc, table, 0.02)
    assert removed == [] and len(kept) == 5
    table.w[2] = 0.0
    kept, removed = prune(sc, table, 0.02)
    assert removed == [int(sc.ids[2])] and len(kept) == 4
    kept, removed = prune(sc, table, 0.0)
    assert removed == []
    table.w[:] = 0.0
    with pytest.raises(InvalidInputError):
        prune(sc, table, 0.02)
    write_prune_report(tmp_path / "r.txt", [int(sc.ids[2])], table)
    assert (tmp_path / "r.txt").read_text().splitlines()[1].split()[0] == str(sc.ids[2])
