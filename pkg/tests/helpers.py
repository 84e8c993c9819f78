"""Shared test utilities: geometry generators and independent oracles."""

from __future__ import annotations

import numpy as np

from dia_sgn.static_env import fit_reference_path


def quarter_circle_points(radius: float = 10.0, n: int = 64) -> np.ndarray:
    """CCW quarter circle from (r, 0) to (0, r)."""
    theta = np.linspace(0.0, np.pi / 2, n)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def random_smooth_path(rng: np.random.Generator, path_id: str = "rnd"):
    """Curvature-bounded random polyline.

    Min turning radius ~10 m and bounded total heading change, so points
    within |d| <= 3 m project uniquely (no self-approach, no fan overlap).
    """
    n = int(rng.integers(30, 80))
    step = float(rng.uniform(1.0, 2.5))
    heading = float(rng.uniform(-np.pi, np.pi))
    max_turn = step / 10.0
    total = 0.0
    p = rng.uniform(-50, 50, size=2)
    pts = [p.copy()]
    for _ in range(n):
        turn = float(rng.uniform(-max_turn, max_turn))
        if abs(total + turn) > 2.0:
            turn = -turn
        total += turn
        heading += turn
        p = p + step * np.array([np.cos(heading), np.sin(heading)])
        pts.append(p.copy())
    return fit_reference_path(pts, speed_limit=10.0, path_id=path_id)


def arc_length_quadrature(fx, fy, t0: float, t1: float, n: int = 200_000) -> float:
    """Numerical arc length of a parametric curve via midpoint quadrature."""
    t = np.linspace(t0, t1, n + 1)
    mid = 0.5 * (t[:-1] + t[1:])
    dt = (t1 - t0) / n
    h = 1e-6
    dx = (fx(mid + h) - fx(mid - h)) / (2 * h)
    dy = (fy(mid + h) - fy(mid - h)) / (2 * h)
    return float(np.sum(np.hypot(dx, dy)) * dt)
