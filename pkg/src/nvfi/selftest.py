"""Analytic oracles runnable on any install (``nvfi selftest``)."""
from __future__ import annotations

import numpy as np

from . import physics
from .decomposition import weighted_kabsch
from .diffcore import tape as T
from .renderer import composite
from .transport import rk2_integrate


def check_transmittance():
    sigma, length, S = 3.0, 0.8, 256
    deltas = np.full(S, length / S)
    _, alpha, _ = composite(np.ones((S, 3)), np.full(S, sigma), deltas)
    err = abs(float(alpha.data) - (1 - np.exp(-sigma * length)))
    return err < 1e-3, f"homogeneous alpha error {err:.2e}"


def rotation_field(p, t):
    p = T.data_of(p)
    return np.stack([-p[:, 1], p[:, 0], np.zeros(len(p))], axis=1)


def rk2_errors(steps=(4, 8, 16, 32), t_end=1.0):
    p0 = np.array([[1.0, 0.0, 0.3], [0.2, -0.5, 0.0]])
    c, s = np.cos(t_end), np.sin(t_end)
    exact = np.stack([c * p0[:, 0] - s * p0[:, 1], s * p0[:, 0] + c * p0[:, 1], p0[:, 2]], axis=1)
    return np.array([np.abs(T.data_of(rk2_integrate(p0, 0.0, t_end, rotation_field, n)) - exact).max() for n in steps])


def check_rk2_order():
    steps = np.array([4, 8, 16, 32])
    slope = -np.polyfit(np.log(steps), np.log(rk2_errors(steps)), 1)[0]
    return 1.8 <= slope <= 2.2, f"convergence order {slope:.3f}"


def check_divergence():
    rng = np.random.default_rng(0)
    p = rng.uniform(-1, 1, (64, 3))
    J, _ = physics.fd_jacobian(lambda q, t: T.data_of(q), p, 0.0, 1e-3)
    div = T.data_of(physics.divergence(J))
    err = np.abs(div - 3.0).max()
    return err < 1e-6, f"div(p) error {err:.2e}"


def check_kabsch():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        R0 = q * np.sign(np.linalg.det(q))
        tau0 = rng.normal(size=3)
        P = rng.normal(size=(30, 3))
        R, tau, _ = weighted_kabsch(P, P @ R0.T + tau0, rng.uniform(0.1, 1, 30))
        worst = max(worst, np.abs(R - R0).max(), np.abs(tau - tau0).max())
    return worst < 1e-6, f"max recovery error {worst:.2e}"


CHECKS = {
    "renderer transmittance": check_transmittance,
    "rk2 order": check_rk2_order,
    "divergence": check_divergence,
    "kabsch": check_kabsch,
}


def run_all():
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed oracle
            ok, detail = False, f"raised {exc!r}"
        out.append((name, bool(ok), detail))
    return out
