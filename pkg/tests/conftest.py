import numpy as np
import pytest

from dsplat.gaussian import Camera, Scene


def make_camera(width=16, height=16, f=20.0, eye=(0.0, 0.0, -3.0), target=(0.0, 0.0, 0.0)):
    return Camera.look_at(eye, target, f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def axis_camera(width=16, height=16, f=20.0):
    """Identity-rotation camera at the origin looking down +z."""
    return Camera(np.eye(3), np.zeros(3), f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def random_scene(rng, n, spread=0.5, scale=(0.08, 0.25), sh=False, opacity=(0.5, 0.95)):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Scene(
        ids=np.arange(n),
        means=rng.uniform(-spread, spread, size=(n, 3)),
        quats=q,
        scales=rng.uniform(*scale, size=(n, 3)),
        opacities=rng.uniform(*opacity, size=n),
        colors=rng.uniform(0.1, 0.9, size=(n, 3)),
        sh1=rng.normal(scale=0.2, size=(n, 9)) if sh else None,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed once at the end of the run
_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """record(n, ok, detail) stores one pass/fail line for criterion n."""
    table = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, ok, detail):
        table[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_ACCEPTANCE, None)
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n not in table:
            terminalreporter.write_line(f"criterion {n}: NOT RUN  (deselected or errored before a verdict)")
            continue
        ok, detail = table[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
