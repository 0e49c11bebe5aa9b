"""Consensus fusion core and the multi-model filter loop.

Per step the filter runs four phases in strict order: (1) every model
forecasts independently, (2) forecasts are folded into a consensus belief by
pairwise Kalman-style incorporation, (3) the consensus is updated with the
measurement, (4) the analysis is mapped back to every model. Innovation
statistics accumulated along the way calibrate the model error covariances.

A filter instance is not shareable across concurrent callers; distinct
instances are independent.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_EIG_FLOOR,
    ModelBelief,
    check_covariance,
    pinv_backproject,
    psd_project,
    solve_spd,
    symmetrize,
)
from .ensemble import adapt_sampling_cov, ensemble_statistics, generate_ensemble, propagate_ensemble
from .exceptions import NumericError


@dataclass(frozen=True)
class Transform:
    """Linear map from the reference state space to one model's space."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", m)
        if np.linalg.matrix_rank(m) < m.shape[0]:
            raise ValueError("transform must have full row rank")

    @classmethod
    def identity(cls, n: int) -> "Transform":
        return cls(np.eye(n))

    @property
    def is_identity(self) -> bool:
        m = self.matrix
        return m.shape[0] == m.shape[1] and np.array_equal(m, np.eye(m.shape[0]))


@dataclass
class MeasurementFrame:
    """Timestamped observation with its observation matrix and noise covariance.

    ``mask`` marks which channels are present this step (None means all).
    """

    y: np.ndarray
    H: np.ndarray
    R: np.ndarray
    t: float = 0.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        p = self.y.size
        if self.H.shape[0] != p:
            raise ValueError(f"H has {self.H.shape[0]} rows but y has {p} entries")
        if self.R.shape != (p, p):
            raise ValueError(f"R shape {self.R.shape} does not match measurement length {p}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).ravel()
            if self.mask.size != p:
                raise ValueError(f"mask length {self.mask.size} does not match measurement length {p}")

    @property
    def is_complete(self) -> bool:
        return self.mask is None or bool(self.mask.all())

    def reduce(self) -> "MeasurementFrame | None":
        """Drop masked-out channels; None when nothing is observed this step."""
        if self.is_complete:
            return self
        keep = np.flatnonzero(self.mask)
        if keep.size == 0:
            return None
        return MeasurementFrame(
            y=self.y[keep], H=self.H[keep], R=self.R[np.ix_(keep, keep)], t=self.t
        )


# --------------------------------------------------------------- fusion ops


def _incorporation_gain(P, T, P_m):
    S = T @ P @ T.T + P_m
    # K = P T^T S^{-1}; S is symmetric so solve against (T P)^T.
    return solve_spd(S, T @ P, context="innovation-of-models matrix").T


def fuse_pair(consensus: ModelBelief, model: ModelBelief, transform: Transform | None = None,
              floor: float = DEFAULT_EIG_FLOOR) -> ModelBelief:
    """Incorporate one model belief into the consensus.

    With an identity transform this equals information-form fusion of the two
    Gaussians. Raises NumericError if the innovation-of-models matrix is
    singular even after flooring (unreachable with floored covariances).
    """
    belief, _ = _fuse_pair(consensus, model, transform, floor)
    return belief


def _fuse_pair(consensus, model, transform, floor):
    T = transform.matrix if transform is not None else np.eye(consensus.dim)
    K = _incorporation_gain(consensus.cov, T, model.cov)
    mean = consensus.mean + K @ (model.mean - T @ consensus.mean)
    cov = psd_project((np.eye(consensus.dim) - K @ T) @ consensus.cov, floor)
    return ModelBelief(mean, cov, model_id=consensus.model_id), K


def fuse_all(beliefs, transforms=None, floor: float = DEFAULT_EIG_FLOOR,
             return_weights: bool = False):
    """Left fold of :func:`fuse_pair` starting from the first belief.

    The first model defines the reference space, so its transform must be the
    identity. With ``return_weights`` the per-model influence on the consensus
    mean is returned as well (trace of each combination matrix over n; the
    weights sum to one by construction).
    """
    beliefs = list(beliefs)
    if not beliefs:
        raise ValueError("fuse_all needs at least one model belief")
    n = beliefs[0].dim
    if transforms is None:
        transforms = [Transform.identity(n) for _ in beliefs]
    transforms = list(transforms)
    if len(transforms) != len(beliefs):
        raise ValueError(f"{len(beliefs)} beliefs but {len(transforms)} transforms")
    if not transforms[0].is_identity:
        raise ValueError("the first transform must be the identity (reference model)")

    consensus = ModelBelief(beliefs[0].mean.copy(), beliefs[0].cov.copy(), model_id="consensus")
    gains = []
    for belief, transform in zip(beliefs[1:], transforms[1:]):
        consensus, K = _fuse_pair(consensus, belief, transform, floor)
        gains.append((K, transform.matrix))

    if not return_weights:
        return consensus

    weights = np.zeros(len(beliefs))
    carry = np.eye(n)
    for m in range(len(beliefs) - 1, 0, -1):
        K, T = gains[m - 1]
        weights[m] = np.trace(carry @ K @ T) / n
        carry = carry @ (np.eye(n) - K @ T)
    weights[0] = np.trace(carry) / n
    return consensus, weights


def measurement_update(consensus: ModelBelief, frame: MeasurementFrame,
                       floor: float = DEFAULT_EIG_FLOOR) -> ModelBelief:
    """Standard Kalman update of the consensus with one measurement frame.

    The covariance uses the Joseph form, which preserves symmetry and positive
    semidefiniteness where the short form does not (identical in exact
    arithmetic). Raises NumericError on a singular innovation covariance.
    """
    H, R = frame.H, frame.R
    S = H @ consensus.cov @ H.T + R
    try:
        K = solve_spd(S, H @ consensus.cov, context="innovation covariance").T
    except NumericError:
        raise
    mean = consensus.mean + K @ (frame.y - H @ consensus.mean)
    ikh = np.eye(consensus.dim) - K @ H
    cov = psd_project(ikh @ consensus.cov @ ikh.T + K @ R @ K.T, floor)
    return ModelBelief(mean, cov, model_id=consensus.model_id)


def feedback(analysis: ModelBelief, transforms, floor: float = DEFAULT_EIG_FLOOR):
    """Map the consensus analysis into every model's space."""
    out = []
    for transform in transforms:
        T = transform.matrix
        out.append(ModelBelief(T @ analysis.mean, psd_project(T @ analysis.cov @ T.T, floor)))
    return out


# ------------------------------------------------------ innovation tracking


@dataclass
class InnovationWindow:
    """Ring buffer of the last ``capacity`` innovation vectors for one model."""

    model_id: str
    capacity: int
    _buffer: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.capacity < 2:
            raise ValueError("innovation window needs capacity >= 2")
        self._buffer = deque(self._buffer, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._buffer)

    def record(self, frame: MeasurementFrame, forecast: ModelBelief) -> "InnovationWindow":
        """Append ``y - H x_f``, evicting the oldest entry beyond capacity."""
        d = frame.y - frame.H @ forecast.mean
        self._buffer.append(np.asarray(d, dtype=float))
        return self

    def innovations(self) -> np.ndarray:
        return np.array(list(self._buffer))

    def empirical_cov(self) -> np.ndarray:
        """Raw second moment sum(d d^T) / (count - 1); needs >= 2 entries."""
        if len(self._buffer) < 2:
            raise ValueError(f"need at least 2 innovations, have {len(self._buffer)}")
        D = self.innovations()
        return symmetrize(D.T @ D / (D.shape[0] - 1))

    def estimate_model_error(self, R) -> np.ndarray:
        """Observed-space model error implied by the innovation spread:
        the PSD part of (empirical innovation covariance - R)."""
        return psd_project(self.empirical_cov() - np.asarray(R, dtype=float), 0.0)


def record_innovation(window: InnovationWindow, frame: MeasurementFrame,
                      forecast: ModelBelief) -> InnovationWindow:
    return window.record(frame, forecast)


def estimate_model_error(window: InnovationWindow, H, R) -> np.ndarray:
    # H is part of the op signature for symmetry with the back-projection
    # helpers; the observed-space estimate itself only needs R.
    del H
    return window.estimate_model_error(R)


# ------------------------------------------------------------ filter loop


#: Forecast method tags.
METHOD_JACOBIAN = "jacobian"
METHOD_KOOPMAN = "koopman_linearization"
METHOD_ENSEMBLE = "ensemble"
METHODS = (METHOD_JACOBIAN, METHOD_KOOPMAN, METHOD_ENSEMBLE)


@dataclass
class ChannelConfig:
    """Everything the filter needs to run one model."""

    name: str
    method: str
    predictor: object | None = None                # step(x, u); jacobian(x, u) for METHOD_JACOBIAN
    process_noise: np.ndarray | None = None        # Q, jacobian path
    sampling_cov: np.ndarray | None = None         # S0, ensemble path
    ensemble_size: int = 100
    koopman: object | None = None                  # fitted KoopmanEstimator, koopman path
    blend: float = 0.8                             # LTV vs direct-embedding mean blend
    transform: Transform | None = None             # None means identity
    #: Whether innovation statistics refresh this model's error terms. A model
    #: whose errors are stable across regimes can keep its historical values.
    adapt_noise: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown forecast method {self.method!r}, expected one of {METHODS}")
        if self.method == METHOD_JACOBIAN:
            if self.predictor is None or not hasattr(self.predictor, "jacobian"):
                raise ValueError(f"model {self.name!r}: jacobian method needs a predictor with a jacobian")
            if self.process_noise is None:
                raise ValueError(f"model {self.name!r}: jacobian method needs a process noise covariance")
        elif self.method == METHOD_ENSEMBLE:
            if self.predictor is None:
                raise ValueError(f"model {self.name!r}: ensemble method needs a predictor")
            if self.sampling_cov is None:
                raise ValueError(f"model {self.name!r}: ensemble method needs a sampling covariance")
            if self.ensemble_size < 2:
                raise ValueError(f"model {self.name!r}: ensemble size must be >= 2")
        elif self.method == METHOD_KOOPMAN:
            if self.koopman is None:
                raise ValueError(f"model {self.name!r}: koopman method needs a fitted lifted model")
            if self.blend < 1.0 and self.predictor is None:
                raise ValueError(f"model {self.name!r}: blending needs a predictor (or blend = 1)")


class _Channel:
    """Runtime state of one model inside the filter."""

    def __init__(self, cfg: ChannelConfig, x0, P0, rng, floor):
        self.cfg = cfg
        self.name = cfg.name
        self.rng = rng
        self.analysis = ModelBelief(np.array(x0, dtype=float), np.array(P0, dtype=float),
                                    model_id=cfg.name)
        self.q_correction = np.zeros_like(self.analysis.cov)
        self.sampling_cov = None if cfg.sampling_cov is None else np.array(cfg.sampling_cov, dtype=float)
        self.lifted = None
        if cfg.method == METHOD_KOOPMAN:
            self.lifted = cfg.koopman.initial_lifted(x0, P0, floor=floor)

    def forecast(self, u, floor) -> ModelBelief:
        cfg = self.cfg
        if cfg.method == METHOD_JACOBIAN:
            mean = cfg.predictor.step(self.analysis.mean, u)
            F = cfg.predictor.jacobian(self.analysis.mean, u)
            cov = F @ self.analysis.cov @ F.T + cfg.process_noise + self.q_correction
            return ModelBelief(mean, psd_project(cov, floor), model_id=self.name)
        if cfg.method == METHOD_ENSEMBLE:
            ens = generate_ensemble(self.analysis.mean, self.sampling_cov, cfg.ensemble_size, self.rng)
            ens = propagate_ensemble(cfg.predictor, ens, u)
            belief = ensemble_statistics(ens, model_id=self.name, floor=floor)
            return belief
        # Koopman path: forecast in lifted space, expose the projection.
        self.lifted = cfg.koopman.forecast(self.lifted, u, predictor=cfg.predictor,
                                           alpha=cfg.blend, floor=floor)
        return cfg.koopman.project_to_state(self.lifted, model_id=self.name, floor=floor)

    def absorb(self, analysis: ModelBelief, floor) -> None:
        self.analysis = ModelBelief(analysis.mean, analysis.cov, model_id=self.name)
        if self.cfg.method == METHOD_KOOPMAN:
            self.lifted = self.cfg.koopman.reanchor(self.analysis, self.lifted, floor=floor)

    def recalibrate(self, window: InnovationWindow, H, R, rho_effective, margin) -> None:
        """Refresh the model error terms from innovation statistics.

        Only the variances of the implied error are used: off-diagonals of a
        short-window sample covariance are mostly noise. A margin factor
        covers the window's lag against time-varying model bias.
        """
        if len(window) < 2 or not self.cfg.adapt_noise:
            return
        R = np.asarray(R, dtype=float)
        excess = np.diag(np.maximum(np.diag(window.empirical_cov() - R), 0.0))
        if self.cfg.method == METHOD_JACOBIAN:
            implied = pinv_backproject(excess, H)
            self.q_correction = margin * np.diag(np.diag(implied))
        elif self.cfg.method == METHOD_ENSEMBLE:
            self.sampling_cov = adapt_sampling_cov(
                self.sampling_cov, R + margin * excess, H, R, rho_effective
            )


@dataclass
class FilterStep:
    """Everything one filter step produced (for logging and diagnostics)."""

    step: int
    forecasts: list
    consensus: ModelBelief
    analysis: ModelBelief
    weights: np.ndarray


class MultiModelFilter:
    """Consensus multi-model Kalman filter over a fixed model roster.

    ``step(u, frame)`` advances every model with the shared control ``u`` and
    assimilates ``frame``. Innovation statistics are refreshed into the model
    error terms every ``window // 2`` steps when ``innovation_correction`` is
    on (continuous refresh would make replay boundaries irreproducible).
    """

    def __init__(self, channels, x0, P0, *, window: int = 50, rho: float = 0.98,
                 floor: float = DEFAULT_EIG_FLOOR, innovation_correction: bool = True,
                 calibration_margin: float = 2.5, seed: int = 0):
        channels = list(channels)
        if not channels:
            raise ValueError("filter needs at least one model channel")
        names = [c.name for c in channels]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate model names in roster: {names}")
        self.floor = float(floor)
        self.window = int(window)
        self.rho = float(rho)
        self.innovation_correction = bool(innovation_correction)
        self.calibration_margin = float(calibration_margin)
        x0 = np.asarray(x0, dtype=float).ravel()
        P0 = psd_project(P0, self.floor)
        self.n = x0.size

        seeds = np.random.SeedSequence(seed).spawn(len(channels))
        self.channels = [
            _Channel(cfg, x0, P0, np.random.default_rng(s), self.floor)
            for cfg, s in zip(channels, seeds)
        ]
        self.transforms = [
            c.cfg.transform if c.cfg.transform is not None else Transform.identity(self.n)
            for c in self.channels
        ]
        if not self.transforms[0].is_identity:
            raise ValueError("the first model defines the reference space; its transform must be identity")
        self.windows = [InnovationWindow(c.name, self.window) for c in self.channels]
        self.analysis = ModelBelief(x0, P0, model_id="consensus")
        self._step_count = 0
        self._last_complete: MeasurementFrame | None = None

    def _phase(self, phase, step, fn, *args):
        try:
            return fn(*args)
        except NumericError as exc:
            raise NumericError(str(exc), phase=phase, step=step) from exc
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise NumericError(f"{type(exc).__name__}: {exc}", phase=phase, step=step) from exc

    def step(self, u, frame: MeasurementFrame) -> FilterStep:
        k = self._step_count
        u = np.asarray(u, dtype=float).ravel()

        forecasts = [
            self._phase(f"forecast[{ch.name}]", k, ch.forecast, u, self.floor)
            for ch in self.channels
        ]
        consensus, weights = self._phase(
            "consensus_fusion", k, lambda: fuse_all(
                forecasts, self.transforms, floor=self.floor, return_weights=True
            )
        )

        observed = frame.reduce()
        if observed is not None:
            analysis = self._phase(
                "measurement_update", k, measurement_update, consensus, observed, self.floor
            )
        else:
            analysis = consensus
        if frame.is_complete:
            for window, forecast in zip(self.windows, forecasts):
                window.record(frame, forecast)
            self._last_complete = frame

        for ch, fb in zip(self.channels, self._phase(
                "feedback", k, feedback, analysis, self.transforms, self.floor)):
            ch.absorb(fb, self.floor)
        self.analysis = analysis

        self._step_count += 1
        refresh_every = max(1, self.window // 2)
        if (self.innovation_correction and self._last_complete is not None
                and self._step_count % refresh_every == 0):
            ref = self._last_complete
            # rho is a per-step forgetting factor; refreshes happen in blocks.
            rho_effective = self.rho ** refresh_every
            for ch, window in zip(self.channels, self.windows):
                self._phase(f"recalibrate[{ch.name}]", k, ch.recalibrate,
                            window, ref.H, ref.R, rho_effective, self.calibration_margin)

        return FilterStep(step=k, forecasts=forecasts, consensus=consensus,
                          analysis=analysis, weights=weights)

    def run(self, controls, frames):
        """Filter a whole record: ``controls[k]`` advances step k -> k+1 and
        ``frames[k+1]`` is assimilated. Returns (means, covs, weights) with the
        initial belief in row 0 and weights for steps 1..T-1."""
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        frames = list(frames)
        T = len(frames)
        means = np.empty((T, self.n))
        covs = np.empty((T, self.n, self.n))
        weights = np.empty((T - 1, len(self.channels)))
        means[0] = self.analysis.mean
        covs[0] = self.analysis.cov
        for k in range(T - 1):
            result = self.step(controls[k], frames[k + 1])
            means[k + 1] = result.analysis.mean
            covs[k + 1] = result.analysis.cov
            weights[k] = result.weights
        return means, covs, weights

    def validate(self) -> None:
        """Check every internal covariance against the shared invariants."""
        slack = 1e-12
        check_covariance(self.analysis.cov, min_eig=self.floor - slack, name="consensus analysis")
        for ch in self.channels:
            check_covariance(ch.analysis.cov, min_eig=self.floor - slack,
                             name=f"{ch.name} analysis")
            if ch.sampling_cov is not None:
                check_covariance(ch.sampling_cov, min_eig=-1e-9, name=f"{ch.name} sampling covariance")
            if ch.lifted is not None:
                check_covariance(ch.lifted.cov, min_eig=self.floor - slack,
                                 name=f"{ch.name} lifted covariance")
            check_covariance(ch.q_correction, min_eig=-1e-9, name=f"{ch.name} error correction")
