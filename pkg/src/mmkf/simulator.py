"""Ground-truth generation and dataset I/O.

The truth model is deliberately richer than the estimator's physics predictor:
the same single-track geometry but with a saturating lateral tire force
``F_y = mu F_z tanh(C alpha / (mu F_z))`` on static axle loads, the
longitudinal reaction of the steered front force (cornering scrub), and RK4
integration at a fraction of the output step. Model mismatch at high slip
exists by construction; absorbing it is the fusion layer's job.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .exceptions import DataFormatError, NumericError
from .fusion import MeasurementFrame
from .vehicle import GRAVITY, VehicleParams

SCENARIO_KINDS = ("sine_steer", "step_steer", "launch", "double_lane_change", "constant_radius")

#: Beyond this yaw rate the vehicle is considered spun out.
SPIN_OUT_YAW_RATE = 3.0

#: Proportional speed-regulation gain (1/s) and acceleration clamp (m/s^2).
SPEED_GAIN = 2.0
ACCEL_LIMIT = 4.0


@dataclass(frozen=True)
class Scenario:
    """One scripted maneuver."""

    kind: str
    duration: float = 10.0
    dt: float = 0.005
    speed: float | None = 19.4          # setpoint m/s; None coasts (zero torque)
    steer_amplitude: float = 0.0        # road-wheel angle, rad
    steer_frequency: float = 0.5        # Hz, for the periodic profiles
    mu: float = 1.0                     # surface friction
    seed: int = 0
    v0: float | None = None             # initial speed; default: setpoint (launches: 1 m/s)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}, expected one of {SCENARIO_KINDS}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.duration < self.dt:
            raise ValueError(f"duration {self.duration} must be at least one step {self.dt}")
        if not 0.0 < self.mu <= 1.2:
            raise ValueError(f"friction mu must be in (0, 1.2], got {self.mu}")
        if self.steer_frequency <= 0.0:
            raise ValueError(f"steer frequency must be positive, got {self.steer_frequency}")

    @property
    def initial_speed(self) -> float:
        if self.v0 is not None:
            return self.v0
        if self.kind == "launch":
            return 1.0
        if self.speed is not None:
            return self.speed
        return 1.0

    def steering(self, t: float) -> float:
        """Road-wheel steering angle at time t."""
        A, f = self.steer_amplitude, self.steer_frequency
        if self.kind == "sine_steer":
            return A * math.sin(2.0 * math.pi * f * t)
        if self.kind == "step_steer":
            return A if t >= min(1.0, self.duration / 5.0) else 0.0
        if self.kind == "constant_radius":
            return A
        if self.kind == "double_lane_change":
            period = 1.0 / f
            t0 = 0.1 * self.duration
            t1 = t0 + 1.5 * period
            if t0 <= t < t0 + period:
                return A * math.sin(2.0 * math.pi * f * (t - t0))
            if t1 <= t < t1 + period:
                return -A * math.sin(2.0 * math.pi * f * (t - t1))
            return 0.0
        return 0.0  # launch


@dataclass(frozen=True)
class SensorConfig:
    """Direct-state sensing with per-channel white noise and dropout.

    Deployment mode (``observe_vy=False``) never exposes lateral velocity:
    that channel is simply absent from the observation matrix.
    """

    sigma_vx: float = 0.1
    sigma_vy: float = 0.1
    sigma_yaw: float = 0.01
    observe_vy: bool = False
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_vx", "sigma_vy", "sigma_yaw"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {self.dropout}")

    def observation(self, n: int = 3):
        """Observation matrix H and noise covariance R for an [vx, vy, r] state."""
        if self.observe_vy:
            H = np.eye(3, n)
            sig = np.array([self.sigma_vx, self.sigma_vy, self.sigma_yaw])
        else:
            H = np.zeros((2, n))
            H[0, 0] = 1.0
            H[1, 2] = 1.0
            sig = np.array([self.sigma_vx, self.sigma_yaw])
        return H, np.diag(sig ** 2)


@dataclass
class Trajectory:
    """Time-indexed truth states, controls and (optionally) measurements."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    measurements: np.ndarray | None = None
    meas_mask: np.ndarray | None = None
    H: np.ndarray | None = None
    R: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        T = self.times.size
        if T == 0:
            self.states = self.states.reshape(0, self.states.shape[-1] if self.states.size else 3)
            self.controls = self.controls.reshape(0, self.controls.shape[-1] if self.controls.size else 2)
        for name in ("states", "controls"):
            if getattr(self, name).shape[0] != T:
                raise ValueError(f"{name} length {getattr(self, name).shape[0]} != times length {T}")
        if self.measurements is not None:
            self.measurements = np.atleast_2d(np.asarray(self.measurements, dtype=float))
            if T == 0:
                self.measurements = self.measurements.reshape(0, -1)
            if self.measurements.shape[0] != T:
                raise ValueError("measurements length does not match times")
            if self.meas_mask is None:
                self.meas_mask = np.ones(self.measurements.shape, dtype=bool)
            else:
                self.meas_mask = np.asarray(self.meas_mask, dtype=bool).reshape(self.measurements.shape)
        if T >= 2:
            gaps = np.diff(self.times)
            if gaps.min() <= 0.0:
                raise ValueError("times must be strictly increasing")
            if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-12):
                raise ValueError("times must be uniformly spaced")

    def __len__(self) -> int:
        return self.times.size

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def q(self) -> int:
        return self.controls.shape[1]

    @property
    def p(self) -> int:
        return 0 if self.measurements is None else self.measurements.shape[1]

    @property
    def dt(self) -> float:
        if len(self) < 2:
            raise ValueError("dt is undefined for a trajectory with fewer than 2 steps")
        return float(self.times[1] - self.times[0])

    def frames(self):
        """Measurement frames per step (requires sensed measurements with H, R)."""
        if self.measurements is None or self.H is None or self.R is None:
            raise ValueError("trajectory has no sensed measurements attached")
        out = []
        for k in range(len(self)):
            y = np.where(self.meas_mask[k], self.measurements[k], 0.0)
            out.append(MeasurementFrame(y=y, H=self.H, R=self.R,
                                        t=float(self.times[k]), mask=self.meas_mask[k]))
        return out


def _truth_derivatives(vx, vy, r, delta, tau, p: VehicleParams, mu: float, scenario: Scenario):
    if vx <= 1e-6:
        raise NumericError(
            f"scenario '{scenario.kind}' infeasible at mu={mu}: vehicle stalled (vx <= 0)"
        )
    fzf = p.mass * GRAVITY * p.b / p.wheelbase
    fzr = p.mass * GRAVITY * p.a / p.wheelbase
    alpha_f = delta - (vy + p.a * r) / vx
    alpha_r = -(vy - p.b * r) / vx
    cap_f = mu * fzf
    cap_r = mu * fzr
    fyf = cap_f * math.tanh(p.cornering_stiffness * alpha_f / cap_f)
    fyr = cap_r * math.tanh(p.cornering_stiffness * alpha_r / cap_r)
    cd = math.cos(delta)
    sd = math.sin(delta)
    # The -fyf*sd term is the cornering scrub the estimator's model omits.
    ax = (tau / p.wheel_radius - fyf * sd) / p.mass + r * vy
    ay = (fyf * cd + fyr) / p.mass - r * vx
    rdot = (p.a * fyf * cd - p.b * fyr) / p.yaw_inertia
    return ax, ay, rdot


def _drive_torque(scenario: Scenario, vx: float, p: VehicleParams) -> float:
    if scenario.speed is None:
        return 0.0
    accel = SPEED_GAIN * (scenario.speed - vx)
    accel = max(-ACCEL_LIMIT, min(ACCEL_LIMIT, accel))
    return accel * p.wheel_radius * p.mass


def simulate_truth(scenario: Scenario, params: VehicleParams | None = None,
                   substeps: int = 10) -> Trajectory:
    """Integrate the saturating-tire truth model for one scenario.

    Controls (steering from the maneuver script, torque from a clamped
    proportional speed regulator) are held constant over each output step;
    the dynamics are integrated with RK4 at ``dt / substeps`` inside it.
    Raises NumericError when the scenario is infeasible at the requested
    friction (spin-out beyond 3 rad/s yaw rate, or a stall).
    """
    p = params if params is not None else VehicleParams()
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    dt = scenario.dt
    T = int(round(scenario.duration / dt)) + 1
    h = dt / substeps

    times = np.arange(T) * dt
    states = np.empty((T, 3))
    controls = np.empty((T, 2))

    vx, vy, r = scenario.initial_speed, 0.0, 0.0
    states[0] = (vx, vy, r)
    for k in range(T):
        t = k * dt
        delta = scenario.steering(t)
        tau = _drive_torque(scenario, vx, p)
        controls[k] = (delta, tau)
        if k == T - 1:
            break
        for _ in range(substeps):
            k1 = _truth_derivatives(vx, vy, r, delta, tau, p, scenario.mu, scenario)
            k2 = _truth_derivatives(vx + 0.5 * h * k1[0], vy + 0.5 * h * k1[1],
                                    r + 0.5 * h * k1[2], delta, tau, p, scenario.mu, scenario)
            k3 = _truth_derivatives(vx + 0.5 * h * k2[0], vy + 0.5 * h * k2[1],
                                    r + 0.5 * h * k2[2], delta, tau, p, scenario.mu, scenario)
            k4 = _truth_derivatives(vx + h * k3[0], vy + h * k3[1],
                                    r + h * k3[2], delta, tau, p, scenario.mu, scenario)
            vx += (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
            vy += (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
            r += (h / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        if abs(r) > SPIN_OUT_YAW_RATE:
            raise NumericError(
                f"scenario '{scenario.kind}' infeasible at mu={scenario.mu}: "
                f"|yaw rate| {abs(r):.2f} rad/s exceeded {SPIN_OUT_YAW_RATE} at t={t + dt:.3f} s"
            )
        states[k + 1] = (vx, vy, r)
    return Trajectory(times=times, states=states, controls=controls)


def sense(traj: Trajectory, cfg: SensorConfig, seed: int | None = None) -> Trajectory:
    """Synthesize measurements for a truth trajectory.

    ``y = H s + noise`` from a seeded stream; dropout independently replaces a
    channel with NaN (mask 0) for that step.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    H, R = cfg.observation(traj.n)
    p = H.shape[0]
    sig = np.sqrt(np.diag(R))
    clean = traj.states @ H.T
    noise = rng.standard_normal((len(traj), p)) * sig
    mask = rng.uniform(size=(len(traj), p)) >= cfg.dropout
    y = np.where(mask, clean + noise, np.nan)
    return Trajectory(times=traj.times, states=traj.states, controls=traj.controls,
                      measurements=y, meas_mask=mask, H=H, R=R)


# ------------------------------------------------------------------ CSV I/O


def _csv_header(n: int, q: int, p: int):
    cols = ["t"]
    cols += [f"x{i + 1}" for i in range(n)]
    cols += [f"u{i + 1}" for i in range(q)]
    cols += [f"y{i + 1}" for i in range(p)]
    cols += [f"y_mask{i + 1}" for i in range(p)]
    return cols


def export_csv(traj: Trajectory, path) -> None:
    """Write a trajectory in the declared CSV schema.

    Line 1 is the metadata comment ``# n=.. q=.. p=.. dt=..``, line 2 the
    column header, then one row per step. Floats carry 17 significant digits,
    so the round trip through :func:`import_csv` is value-exact; missing
    measurements are NaN with mask 0.
    """
    n, q, p = traj.n, traj.q, traj.p
    dt = traj.dt if len(traj) >= 2 else 0.0
    lines = [f"# n={n} q={q} p={p} dt={dt:.17g}", ",".join(_csv_header(n, q, p))]
    for k in range(len(traj)):
        row = [f"{traj.times[k]:.17g}"]
        row += [f"{v:.17g}" for v in traj.states[k]]
        row += [f"{v:.17g}" for v in traj.controls[k]]
        if p:
            row += [f"{v:.17g}" for v in traj.measurements[k]]
            row += [str(int(m)) for m in traj.meas_mask[k]]
        lines.append(",".join(row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


_META_RE = re.compile(r"^# n=(\d+) q=(\d+) p=(\d+) dt=([-+0-9.eE]+)\s*$")


def import_csv(path) -> Trajectory:
    """Read a trajectory written by :func:`export_csv`.

    Malformed metadata/header, ragged rows and non-numeric cells raise
    DataFormatError citing the 1-based line number.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: line 1: empty file, expected metadata comment")
    meta = _META_RE.match(lines[0])
    if meta is None:
        raise DataFormatError(f"{path}: line 1: expected metadata comment '# n=.. q=.. p=.. dt=..'")
    n, q, p = (int(meta.group(i)) for i in (1, 2, 3))
    if len(lines) < 2:
        raise DataFormatError(f"{path}: line 2: missing column header")
    expected_header = ",".join(_csv_header(n, q, p))
    if lines[1].strip() != expected_header:
        raise DataFormatError(f"{path}: line 2: header does not match declared dimensions")

    ncols = 1 + n + q + 2 * p
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != ncols:
            raise DataFormatError(
                f"{path}: line {lineno}: expected {ncols} columns, found {len(cells)}"
            )
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: non-numeric cell ({exc})") from exc

    data = np.array(rows, dtype=float) if rows else np.empty((0, ncols))
    times = data[:, 0]
    states = data[:, 1:1 + n].reshape(-1, n)
    controls = data[:, 1 + n:1 + n + q].reshape(-1, q)
    measurements = mask = None
    if p:
        measurements = data[:, 1 + n + q:1 + n + q + p].reshape(-1, p)
        mask = data[:, 1 + n + q + p:].reshape(-1, p).astype(bool)
    return Trajectory(times=times, states=states, controls=controls,
                      measurements=measurements, meas_mask=mask)
