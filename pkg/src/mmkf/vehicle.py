"""Planar single-track (bicycle) vehicle dynamics with a linear tire.

State layout is ``[vx, vy, r]``: longitudinal velocity (m/s), lateral velocity
(m/s), yaw rate (rad/s). Controls are ``[delta, tau]``: road-wheel steering
angle (rad, steering-wheel angle already divided by the steering ratio
upstream) and total drive torque (N m).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

GRAVITY = 9.81

#: Slip angles divide by vx; below this the model is kinematically singular.
MIN_VX = 0.1


@dataclass(frozen=True)
class VehicleParams:
    """Single-track parameters. Defaults describe a ~2.3 t electric AWD crossover.

    Units: mass kg, yaw_inertia kg m^2, a/b (front/rear axle to CG) m,
    wheel_radius m, cornering_stiffness N/rad (per axle), wheel_inertia kg m^2,
    steering_ratio dimensionless.
    """

    mass: float = 2271.0
    yaw_inertia: float = 4600.0
    a: float = 1.42
    b: float = 1.43
    wheel_radius: float = 0.347
    cornering_stiffness: float = 83700.0
    wheel_inertia: float = 1.7
    steering_ratio: float = 18.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (value > 0.0 and math.isfinite(value)):
                raise ValueError(f"vehicle parameter {f.name} must be strictly positive, got {value}")

    @property
    def wheelbase(self) -> float:
        return self.a + self.b


def _derivatives(vx: float, vy: float, r: float, delta: float, tau: float, p: VehicleParams):
    alpha_f = delta - (vy + p.a * r) / vx
    alpha_r = -(vy - p.b * r) / vx
    fyf = p.cornering_stiffness * alpha_f
    fyr = p.cornering_stiffness * alpha_r
    cd = math.cos(delta)
    ax = tau / (p.wheel_radius * p.mass) + r * vy
    ay = (fyf * cd + fyr) / p.mass - r * vx
    rdot = (p.a * fyf * cd - p.b * fyr) / p.yaw_inertia
    return ax, ay, rdot


def bicycle_step(x, u, p: VehicleParams, dt: float) -> np.ndarray:
    """One explicit-Euler step of the linear-tire single-track model.

    Raises ValueError for dt <= 0 or vx at/below the standstill guard.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    vx, vy, r = (float(v) for v in np.asarray(x, dtype=float).ravel())
    if vx <= MIN_VX:
        raise ValueError(
            f"kinematic singularity: vx={vx:.4g} m/s is at or below the {MIN_VX} m/s standstill guard"
        )
    u = np.asarray(u, dtype=float).ravel()
    delta, tau = float(u[0]), float(u[1])
    ax, ay, rdot = _derivatives(vx, vy, r, delta, tau, p)
    return np.array([vx + dt * ax, vy + dt * ay, r + dt * rdot])


def bicycle_step_batch(X, u, p: VehicleParams, dt: float) -> np.ndarray:
    """Vectorized :func:`bicycle_step` over rows of ``X`` with one shared control.

    On a standstill violation the error names the first offending row so the
    ensemble layer can report the member index.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    u = np.asarray(u, dtype=float).ravel()
    delta, tau = float(u[0]), float(u[1])
    vx, vy, r = X[:, 0], X[:, 1], X[:, 2]
    bad = np.flatnonzero(vx <= MIN_VX)
    if bad.size:
        raise ValueError(
            f"kinematic singularity: vx={vx[bad[0]]:.4g} m/s at row {bad[0]} is at or below "
            f"the {MIN_VX} m/s standstill guard"
        )
    alpha_f = delta - (vy + p.a * r) / vx
    alpha_r = -(vy - p.b * r) / vx
    fyf = p.cornering_stiffness * alpha_f
    fyr = p.cornering_stiffness * alpha_r
    cd = math.cos(delta)
    ax = tau / (p.wheel_radius * p.mass) + r * vy
    ay = (fyf * cd + fyr) / p.mass - r * vx
    rdot = (p.a * fyf * cd - p.b * fyr) / p.yaw_inertia
    return np.column_stack([vx + dt * ax, vy + dt * ay, r + dt * rdot])


def bicycle_jacobian(x, u, p: VehicleParams, dt: float, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of :func:`bicycle_step` w.r.t. the state.

    Per-component step ``h_i = rel_step * (1 + |x_i|)``. Stays correct if the
    step function is swapped for another model; accuracy is guarded by an
    analytic check in the test suite. Propagates bicycle_step errors.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    J = np.empty((n, n))
    for i in range(n):
        h = rel_step * (1.0 + abs(x[i]))
        hi = x.copy()
        lo = x.copy()
        hi[i] += h
        lo[i] -= h
        J[:, i] = (bicycle_step(hi, u, p, dt) - bicycle_step(lo, u, p, dt)) / (2.0 * h)
    return J


