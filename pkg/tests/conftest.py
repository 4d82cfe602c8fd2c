import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from spatialground.scene import CameraView, Pose, Primitive, Scene  # noqa: E402


def box(pid, category, center, half, albedo=(0.5, 0.5, 0.5), yaw=0.0):
    return Primitive(pid, category, "box", Pose.from_yaw(yaw, center), np.asarray(half, float), np.asarray(albedo, float))


def ring_cameras(n=3, radius=2.2, height=1.2, size=(48, 36), focal=48.0, target=(0, 0, 0.2)):
    w, h = size
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n + 0.3
        eye = (radius * np.cos(a), radius * np.sin(a), height)
        cams.append(CameraView.look_at(eye, target, fx=focal, fy=focal, width=w, height=h, view_id=k))
    return cams


@pytest.fixture
def two_box_scene():
    prims = [box(1, "mug", (-0.4, 0.0, 0.15), (0.15, 0.15, 0.15), (0.9, 0.2, 0.2)),
             box(2, "book", (0.4, 0.1, 0.1), (0.2, 0.12, 0.1), (0.2, 0.3, 0.9))]
    return Scene(prims, ring_cameras())


@pytest.fixture(scope="session")
def trained_pair():
    """A two-object scene trained briefly on small grids; shared by the slower tests."""
    from spatialground.embed import Vocabulary
    from spatialground.field import build_caches
    from spatialground.train import TrainConfig, build_supervision, train_fields
    prims = [box(1, "mug", (-0.4, 0.0, 0.15), (0.15, 0.15, 0.15), (0.9, 0.2, 0.2)),
             box(2, "book", (0.4, 0.1, 0.1), (0.2, 0.12, 0.1), (0.2, 0.3, 0.9)),
             box(3, "floor", (0.0, 0.0, -0.03), (1.2, 1.2, 0.03), (0.6, 0.6, 0.6))]
    scene = Scene(prims, ring_cameras(4))
    cfg = TrainConfig(steps=400, K=64, near=0.5, far=4.5, resolutions=(8, 16, 32), rays_per_step=256, seed=3)
    vocab = Vocabulary()
    caches = build_caches(scene, scene.cameras, cfg.sampling)
    sup = build_supervision(scene, scene.cameras, vocab, 0.1, caches=caches, sampling=cfg.sampling)
    fld = train_fields(scene, sup, cfg, caches=caches)
    return scene, fld, sup, caches, cfg, vocab


_CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Report one acceptance line, live and again in the terminal summary, then assert it."""
    def report(name: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
