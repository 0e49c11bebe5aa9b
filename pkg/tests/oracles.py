"""Independent reference implementations used as test oracles.

Everything here is deliberately written from first principles (explicit
inverses, textbook recursions, analytic formulas) and stays independent of the
package code paths it is used to check.
"""

from __future__ import annotations

import numpy as np


def info_form_fusion(means, covs):
    """Information-form fusion of Gaussians sharing one state space:
    P = (sum P_i^-1)^-1, x = P sum P_i^-1 x_i."""
    info = sum(np.linalg.inv(P) for P in covs)
    P = np.linalg.inv(info)
    x = P @ sum(np.linalg.inv(Pi) @ xi for xi, Pi in zip(means, covs))
    return x, P


def lateral_matrices(vx, mass, yaw_inertia, a, b, cf, cr):
    """Continuous-time (A, B) of the classical linear single-track model,
    states [vy, r], input = road-wheel angle."""
    A = np.array(
        [
            [-(cf + cr) / (mass * vx), (-a * cf + b * cr) / (mass * vx) - vx],
            [(-a * cf + b * cr) / (yaw_inertia * vx), -(a * a * cf + b * b * cr) / (yaw_inertia * vx)],
        ]
    )
    B = np.array([cf / mass, a * cf / yaw_inertia])
    return A, B


def yaw_rate_frequency_gain(vx, params, freq_hz):
    """|r/delta| of the linear single-track model at one frequency."""
    A, B = lateral_matrices(vx, params.mass, params.yaw_inertia, params.a, params.b,
                            params.cornering_stiffness, params.cornering_stiffness)
    w = 2.0 * np.pi * freq_hz
    G = np.array([0.0, 1.0]) @ np.linalg.solve(1j * w * np.eye(2) - A, B)
    return float(np.abs(G))


def steady_state_yaw_rate(vx, delta, params):
    """Steady-state yaw-rate of the linear single-track model:
    r = vx delta / (L + K_us vx^2) with the understeer gradient for equal
    front/rear cornering stiffness."""
    L = params.a + params.b
    c = params.cornering_stiffness
    k_us = params.mass * (params.b * c - params.a * c) / (c * c * L)
    return vx * delta / (L + k_us * vx * vx)


class TextbookEkf:
    """Plain extended Kalman filter: predict with a step function and its
    Jacobian, update with the short-form covariance. No hygiene, no Joseph
    form, no adaptation."""

    def __init__(self, step_fn, jacobian_fn, Q, x0, P0):
        self.step_fn = step_fn
        self.jacobian_fn = jacobian_fn
        self.Q = np.asarray(Q, dtype=float)
        self.x = np.asarray(x0, dtype=float).copy()
        self.P = np.asarray(P0, dtype=float).copy()

    def predict(self, u):
        F = self.jacobian_fn(self.x, u)
        self.x = self.step_fn(self.x, u)
        self.P = F @ self.P @ F.T + self.Q

    def update(self, y, H, R):
        S = H @ self.P @ H.T + R
        K = self.P @ H.T @ np.linalg.inv(S)
        self.x = self.x + K @ (y - H @ self.x)
        self.P = (np.eye(self.x.size) - K @ H) @ self.P


def random_spd(rng, n, eig_lo=0.5, eig_hi=5.0):
    """Random symmetric positive-definite matrix with controlled spectrum."""
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = rng.uniform(eig_lo, eig_hi, size=n)
    return (Q * eigs) @ Q.T
