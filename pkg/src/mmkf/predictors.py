"""Pluggable one-step predictors.

Every predictor exposes ``step(x, u) -> x_next`` (single state) and
``step_batch(X, u)`` (rows of states, one shared control), plus a ``kind`` tag
in {"physics", "data_driven"}. Predictors are immutable after construction or
fit, and step calls are pure, so they are safe to share across threads.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import DataFormatError
from .vehicle import VehicleParams, bicycle_jacobian, bicycle_step, bicycle_step_batch

RFF_FORMAT_VERSION = 1


class PhysicsPredictor:
    """Linear-tire bicycle model wrapped as a one-step predictor."""

    kind = "physics"

    def __init__(self, params: VehicleParams | None = None, dt: float = 0.005):
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.params = params if params is not None else VehicleParams()
        self.dt = float(dt)

    def step(self, x, u) -> np.ndarray:
        return bicycle_step(x, u, self.params, self.dt)

    def step_batch(self, X, u) -> np.ndarray:
        return bicycle_step_batch(X, u, self.params, self.dt)

    def jacobian(self, x, u) -> np.ndarray:
        return bicycle_jacobian(x, u, self.params, self.dt)


class RffRegressor(BaseEstimator):
    """Random-Fourier-feature ridge regressor for one-step state prediction.

    Features are ``sqrt(2/n_features) * cos(W v + b)`` on per-channel
    normalized inputs ``v = [state; control]``, with ``W ~ Normal(0,
    feature_scale**-2)`` and ``b ~ Uniform[0, 2pi)`` drawn from ``seed``. The
    output weights solve a ridge regression against the raw successor states.
    Fitting is deterministic given the seed.
    """

    kind = "data_driven"

    def __init__(self, n_features: int = 128, feature_scale: float = 1.0,
                 ridge: float = 1e-6, seed: int = 0):
        self.n_features = n_features
        self.feature_scale = feature_scale
        self.ridge = ridge
        self.seed = seed

    def fit(self, X, y):
        """Fit from stacked transition pairs.

        X: (N, n_in) rows of [state, control]; y: (N, n_out) successor states.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X and y disagree on sample count: {X.shape[0]} vs {y.shape[0]}")
        if X.shape[0] < 2:
            raise ValueError("need at least 2 training samples")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.ridge <= 0.0:
            raise ValueError("ridge must be > 0")

        std = X.std(axis=0)
        if not np.any(std > 0.0):
            raise ValueError("rank-deficient regression: all training samples are identical")
        self.input_mean_ = X.mean(axis=0)
        # Constant channels get unit scale instead of dividing by zero.
        self.input_scale_ = np.where(std > 0.0, std, 1.0)

        rng = np.random.default_rng(self.seed)
        d = int(self.n_features)
        self.frequencies_ = rng.normal(0.0, 1.0 / self.feature_scale, size=(d, X.shape[1]))
        self.phases_ = rng.uniform(0.0, 2.0 * np.pi, size=d)

        phi = self._features(X)                      # (N, d)
        gram = phi.T @ phi + self.ridge * np.eye(d)
        # W (n_out, d) solves min ||y - phi W^T||^2 + ridge ||W||^2.
        self.weights_ = np.linalg.solve(gram, phi.T @ y).T
        self.n_inputs_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("RffRegressor is not fitted yet")

    def _features(self, X) -> np.ndarray:
        Xn = (X - self.input_mean_) / self.input_scale_
        d = self.frequencies_.shape[0]
        return np.sqrt(2.0 / d) * np.cos(Xn @ self.frequencies_.T + self.phases_)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_inputs_:
            raise ValueError(f"expected {self.n_inputs_} input columns, got {X.shape[1]}")
        return self._features(X) @ self.weights_.T

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        u = np.asarray(u, dtype=float).ravel()
        return self.predict(np.concatenate([x, u])[None, :])[0]

    def step_batch(self, X, u) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        u = np.asarray(u, dtype=float).ravel()
        U = np.broadcast_to(u, (X.shape[0], u.size))
        return self.predict(np.hstack([X, U]))

    def save(self, path) -> None:
        self._check_fitted()
        params = json.dumps(self.get_params(), sort_keys=True)
        np.savez(
            path,
            format_version=np.int64(RFF_FORMAT_VERSION),
            params_json=np.bytes_(params.encode()),
            frequencies=self.frequencies_,
            phases=self.phases_,
            weights=self.weights_,
            input_mean=self.input_mean_,
            input_scale=self.input_scale_,
        )

    @classmethod
    def load(cls, path) -> "RffRegressor":
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != RFF_FORMAT_VERSION:
                raise DataFormatError(
                    f"unsupported predictor file version {version}, expected {RFF_FORMAT_VERSION}"
                )
            model = cls(**json.loads(bytes(data["params_json"]).decode()))
            model.frequencies_ = data["frequencies"]
            model.phases_ = data["phases"]
            model.weights_ = data["weights"]
            model.input_mean_ = data["input_mean"]
            model.input_scale_ = data["input_scale"]
        model.n_inputs_ = model.frequencies_.shape[1]
        model.n_outputs_ = model.weights_.shape[0]
        return model


def transition_dataset(trajectories):
    """Stack one-step transition pairs from trajectories.

    Returns (X, Y): X rows are [state_t, control_t], Y rows are state_{t+1}.
    """
    xs, ys = [], []
    for traj in trajectories:
        states = np.asarray(traj.states, dtype=float)
        controls = np.asarray(traj.controls, dtype=float)
        if states.shape[0] < 2:
            continue
        xs.append(np.hstack([states[:-1], controls[:-1]]))
        ys.append(states[1:])
    if not xs:
        raise ValueError("no transitions available: every trajectory is shorter than 2 steps")
    return np.vstack(xs), np.vstack(ys)


def fit_rff_predictor(trajectories, n_features: int = 128, ridge: float = 1e-6,
                      seed: int = 0, feature_scale: float = 1.0) -> RffRegressor:
    """Fit an RffRegressor on a set of trajectories (states + controls)."""
    X, Y = transition_dataset(trajectories)
    model = RffRegressor(n_features=n_features, feature_scale=feature_scale,
                         ridge=ridge, seed=seed)
    return model.fit(X, Y)
