import numpy as np
import pytest

from nvfi import scene_io as S
from nvfi.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_scene():
    """Sliding box seen by three 12x12 cameras over 10 stamps."""
    return S.generate_scene(S.sliding_box(), S.orbit_cameras(3, width=12, height=12), 10, samples_per_ray=64,
                            test_cameras=S.orbit_cameras(1, width=12, height=12, start_id=3, phase=0.5))


def tiny_config(**kw):
    base = dict(iters=4, keyframe_rays=64, interframe_rays=64, samples_per_ray=16, physics_samples=256,
                keyframes=2, n_density=4, n_app=6, feat_dim=6, hidden=16, grid_resolutions=[8, 10],
                grid_fractions=[0.5], occupancy_every=0, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
