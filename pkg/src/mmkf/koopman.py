"""Lifted bilinear dynamics for analytic covariance propagation.

States are lifted into an observable space whose first n coordinates are the
raw state (identity block) and whose remaining coordinates are random Fourier
features. In that space the dynamics are modelled as

    z' = A z + B u + H kron(u, z) + noise,

fitted by a two-stage regularized least squares: stage one solves a Tikhonov
block regression for [A B H] (and, optionally, the output map C), stage two
sets the noise covariances from the regularized residual spread. Freezing the
control turns the bilinear model into a linear time-varying one, so the
forecast covariance propagates with plain congruence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import (
    DEFAULT_EIG_FLOOR,
    ModelBelief,
    khatri_rao,
    kron_identity,
    psd_project,
    solve_spd,
)
from .exceptions import DataFormatError

KOOPMAN_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RffLifting:
    """Random-Fourier-feature lifting with an identity state block.

    ``lift(x) = [x; sqrt(2/m) cos(F xn + b)]`` where ``m`` is the feature
    count, ``xn`` the per-channel normalized state. ``m == 0`` is the identity
    lifting used when the raw state is already a good observable basis.
    """

    frequencies: np.ndarray  # (m, n)
    phases: np.ndarray       # (m,)
    input_mean: np.ndarray   # (n,)
    input_scale: np.ndarray  # (n,)

    @property
    def state_dim(self) -> int:
        return self.input_mean.size

    @property
    def dim(self) -> int:
        return self.state_dim + self.phases.size

    @property
    def n_features(self) -> int:
        return self.phases.size

    @classmethod
    def create(cls, state_dim: int, lifted_dim: int, feature_scale: float = 1.0,
               seed: int = 0, states=None) -> "RffLifting":
        """Draw the lifting from ``seed``; normalization comes from ``states`` rows."""
        if lifted_dim < state_dim:
            raise ValueError(f"lifted dimension {lifted_dim} must be >= state dimension {state_dim}")
        m = lifted_dim - state_dim
        rng = np.random.default_rng(seed)
        frequencies = rng.normal(0.0, 1.0 / feature_scale, size=(m, state_dim))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=m)
        if states is not None and len(states):
            states = np.atleast_2d(np.asarray(states, dtype=float))
            mean = states.mean(axis=0)
            std = states.std(axis=0)
            scale = np.where(std > 0.0, std, 1.0)
        else:
            mean = np.zeros(state_dim)
            scale = np.ones(state_dim)
        return cls(frequencies=frequencies, phases=phases, input_mean=mean, input_scale=scale)

    def lift(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if self.n_features == 0:
            return x.copy()
        xn = (x - self.input_mean) / self.input_scale
        feats = np.sqrt(2.0 / self.n_features) * np.cos(self.frequencies @ xn + self.phases)
        return np.concatenate([x, feats])

    def lift_columns(self, X) -> np.ndarray:
        """Lift rows of ``X`` into columns of a (dim, T) matrix."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.n_features == 0:
            return X.T.copy()
        Xn = (X - self.input_mean) / self.input_scale
        feats = np.sqrt(2.0 / self.n_features) * np.cos(Xn @ self.frequencies.T + self.phases)
        return np.vstack([X.T, feats.T])


@dataclass
class LiftedBelief:
    """Gaussian belief carried in the lifted space."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(
                f"lifted covariance shape {self.cov.shape} does not match mean length {self.mean.size}"
            )

    @property
    def dim(self) -> int:
        return self.mean.size


class KoopmanEstimator(BaseEstimator):
    """Fits and evaluates the lifted bilinear model.

    Fitted attributes: ``A_`` (d, d), ``B_`` (d, q), ``H_`` (d, d*q),
    ``C_`` (n, d), ``Q_`` (d, d), ``R_`` (n, n), ``lifting_``.
    Immutable after fitting; all evaluation methods are pure.
    """

    def __init__(self, lifted_dim: int = 64, feature_scale: float = 1.0,
                 lam_a: float = 1e-6, lam_b: float = 1e-6, lam_h: float = 1e-6,
                 lam_c: float = 0.0, lam_q: float = 1e-9, lam_r: float = 1e-9,
                 learn_output_map: bool = False, normalize_controls: bool = False,
                 seed: int = 0):
        self.lifted_dim = lifted_dim
        self.feature_scale = feature_scale
        self.lam_a = lam_a
        self.lam_b = lam_b
        self.lam_h = lam_h
        self.lam_c = lam_c
        self.lam_q = lam_q
        self.lam_r = lam_r
        self.learn_output_map = learn_output_map
        # With physical controls of very different magnitudes (rad vs N m) the
        # block regression is badly scaled; this learns the dynamics in
        # standardized control coordinates instead. The operators then act on
        # the standardized control, transparently handled by ltv_matrices.
        self.normalize_controls = normalize_controls
        self.seed = seed

    # ------------------------------------------------------------------ fit

    def _design_matrices(self, trajectories, lifting: RffLifting):
        """Build (Z_prev, Z_next, U, Y): lifted predecessors/successors, controls,
        raw successor states, all column-major with one column per transition."""
        zp, zn, us, ys = [], [], [], []
        for traj in trajectories:
            states = np.atleast_2d(np.asarray(traj.states, dtype=float))
            controls = np.atleast_2d(np.asarray(traj.controls, dtype=float))
            if states.shape[0] < 2:
                continue
            zp.append(lifting.lift_columns(states[:-1]))
            zn.append(lifting.lift_columns(states[1:]))
            us.append(controls[:-1].T)
            ys.append(states[1:].T)
        if not zp:
            raise ValueError("no transitions available: every trajectory is shorter than 2 steps")
        return (np.hstack(zp), np.hstack(zn), np.hstack(us), np.hstack(ys))

    def fit(self, trajectories):
        lams = dict(lam_a=self.lam_a, lam_b=self.lam_b, lam_h=self.lam_h,
                    lam_c=self.lam_c, lam_q=self.lam_q, lam_r=self.lam_r)
        for name, lam in lams.items():
            if lam < 0.0:
                raise ValueError(f"{name} must be >= 0, got {lam}")

        trajectories = list(trajectories)
        all_states = np.vstack([np.atleast_2d(np.asarray(t.states, dtype=float)) for t in trajectories])
        n = all_states.shape[1]
        d = int(self.lifted_dim)
        lifting = RffLifting.create(n, d, self.feature_scale, self.seed, all_states)

        Z_prev, Z_next, U, Y = self._design_matrices(trajectories, lifting)
        q = U.shape[0]
        if self.normalize_controls:
            self.control_mean_ = U.mean(axis=1)
            std = U.std(axis=1)
            self.control_scale_ = np.where(std > 0.0, std, 1.0)
        else:
            self.control_mean_ = np.zeros(q)
            self.control_scale_ = np.ones(q)
        U = (U - self.control_mean_[:, None]) / self.control_scale_[:, None]
        n_samples = Z_prev.shape[1]
        needed = d + q + d * q
        if n_samples < needed:
            raise ValueError(
                f"not enough transitions for the block regression: have {n_samples}, need >= {needed}"
            )

        # Stage 1: Tikhonov block regression for [A B H] against the stacked
        # regressors [Z_prev; U; khatri_rao(U, Z_prev)] with per-block weights.
        G = np.vstack([Z_prev, U, khatri_rao(U, Z_prev)])
        lam_diag = np.concatenate([
            np.full(d, self.lam_a),
            np.full(q, self.lam_b),
            np.full(d * q, self.lam_h),
        ])
        M = G @ G.T + n_samples * np.diag(lam_diag)
        theta = self._solve_block(M, G @ Z_next.T, G, d, q).T
        self.A_ = theta[:, :d]
        self.B_ = theta[:, d:d + q]
        self.H_ = theta[:, d + q:]

        if self.learn_output_map:
            Mc = Z_next @ Z_next.T + n_samples * self.lam_c * np.eye(d)
            self.C_ = self._solve_block(Mc, Z_next @ Y.T, Z_next, d, q, block="lifted outputs").T
        else:
            self.C_ = np.eye(n, d)

        # Stage 2: noise covariances from the regularized residual spread.
        resid = Z_next - theta @ G
        self.Q_ = psd_project(resid @ resid.T / n_samples + self.lam_q * np.eye(d), 0.0)
        resid_out = Y - self.C_ @ Z_next
        self.R_ = psd_project(resid_out @ resid_out.T / n_samples + self.lam_r * np.eye(n), 0.0)

        self.lifting_ = lifting
        self.state_dim_ = n
        self.control_dim_ = q
        return self

    def _solve_block(self, M, rhs, G, d, q, block: str | None = None):
        """Solve the normal equations, naming the rank-deficient block on failure."""
        try:
            return solve_spd(M, rhs, context="regressor Gram matrix")
        except Exception as exc:
            if block is None:
                block = self._deficient_block(G, d, q)
            raise ValueError(
                f"rank-deficient regression even after regularization: deficient block is {block}"
            ) from exc

    @staticmethod
    def _deficient_block(G, d, q) -> str:
        blocks = {
            "lifted states": G[:d],
            "controls": G[d:d + q],
            "control-state products": G[d + q:],
        }
        for name, rows in blocks.items():
            if np.linalg.matrix_rank(rows) < rows.shape[0]:
                return name
        return "unknown"

    # ----------------------------------------------------------- evaluation

    def _check_fitted(self):
        if not hasattr(self, "A_"):
            raise NotFittedError("KoopmanEstimator is not fitted yet")

    @classmethod
    def from_operators(cls, A, B, H, C, Q, R, lifting: RffLifting,
                       control_mean=None, control_scale=None, **params) -> "KoopmanEstimator":
        """Assemble a fitted estimator from explicit operators (tests, file load)."""
        model = cls(**params)
        model.A_ = np.asarray(A, dtype=float)
        model.B_ = np.asarray(B, dtype=float)
        model.H_ = np.asarray(H, dtype=float)
        model.C_ = np.asarray(C, dtype=float)
        model.Q_ = np.asarray(Q, dtype=float)
        model.R_ = np.asarray(R, dtype=float)
        model.lifting_ = lifting
        model.state_dim_ = model.C_.shape[0]
        model.control_dim_ = model.B_.shape[1]
        q = model.control_dim_
        model.control_mean_ = np.zeros(q) if control_mean is None else np.asarray(control_mean, dtype=float)
        model.control_scale_ = np.ones(q) if control_scale is None else np.asarray(control_scale, dtype=float)
        return model

    def lift(self, x) -> np.ndarray:
        self._check_fitted()
        return self.lifting_.lift(x)

    def ltv_matrices(self, u):
        """Freeze the control: returns (A_t, v_t) with
        ``A_t z + v_t == A z + B u + H kron(u, z)`` for every z, where u is
        taken in the (possibly standardized) coordinates the operators were
        learned in."""
        self._check_fitted()
        u = np.asarray(u, dtype=float).ravel()
        u = (u - self.control_mean_) / self.control_scale_
        d = self.A_.shape[0]
        A_t = self.A_ + self.H_ @ kron_identity(u, d)
        v_t = self.B_ @ u
        return A_t, v_t

    def forecast(self, belief: LiftedBelief, u, predictor=None, alpha: float = 1.0,
                 floor: float = DEFAULT_EIG_FLOOR) -> LiftedBelief:
        """One-step lifted forecast.

        Mean blends the LTV forecast with the direct embedding of a predictor
        output (``alpha`` = weight of the LTV part; 1 disables blending).
        Covariance propagates by congruence with the frozen-control matrix
        plus the fitted process noise.
        """
        self._check_fitted()
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"blend alpha must be in [0, 1], got {alpha}")
        A_t, v_t = self.ltv_matrices(u)
        z_lin = A_t @ belief.mean + v_t
        if alpha < 1.0:
            if predictor is None:
                raise ValueError("blending with alpha < 1 requires a predictor")
            x = self.C_ @ belief.mean
            z_emb = self.lifting_.lift(predictor.step(x, u))
            mean = alpha * z_lin + (1.0 - alpha) * z_emb
        else:
            mean = z_lin
        cov = psd_project(A_t @ belief.cov @ A_t.T + self.Q_, floor)
        return LiftedBelief(mean, cov)

    def project_to_state(self, belief: LiftedBelief, model_id: str = "",
                         floor: float = DEFAULT_EIG_FLOOR) -> ModelBelief:
        """Project a lifted belief down to state space through the output map."""
        self._check_fitted()
        mean = self.C_ @ belief.mean
        cov = psd_project(self.C_ @ belief.cov @ self.C_.T, floor)
        return ModelBelief(mean, cov, model_id=model_id)

    def reanchor(self, analysis: ModelBelief, previous: LiftedBelief,
                 floor: float = DEFAULT_EIG_FLOOR) -> LiftedBelief:
        """Re-anchor the lifted belief after a state-space analysis update.

        The lifted mean becomes the lift of the analysis mean; the covariance
        keeps the feature block from the previous lifted belief, takes the
        analysis covariance as its state block, and zeroes the cross block.
        """
        self._check_fitted()
        n = self.state_dim_
        d = self.lifting_.dim
        mean = self.lifting_.lift(analysis.mean)
        cov = np.zeros((d, d))
        cov[:n, :n] = analysis.cov
        cov[n:, n:] = previous.cov[n:, n:]
        return LiftedBelief(mean, psd_project(cov, floor))

    def initial_lifted(self, x0, P0, floor: float = DEFAULT_EIG_FLOOR) -> LiftedBelief:
        """Initial lifted belief: state block from P0, feature block scaled from
        the fitted process noise (a deterministic, transient-only choice)."""
        self._check_fitted()
        n = self.state_dim_
        d = self.lifting_.dim
        cov = np.zeros((d, d))
        cov[:n, :n] = np.asarray(P0, dtype=float)
        if d > n:
            spread = max(float(np.diag(self.Q_)[n:].mean()), floor)
            cov[n:, n:] = spread * np.eye(d - n)
        return LiftedBelief(self.lifting_.lift(x0), psd_project(cov, floor))

    def training_loss_v1(self, trajectories) -> float:
        """Unweighted data-fit part of the training loss on the given data
        (noise covariances fixed at identity, as in fitting stage one)."""
        self._check_fitted()
        Z_prev, Z_next, U, Y = self._design_matrices(trajectories, self.lifting_)
        G = np.vstack([Z_prev, U, khatri_rao(U, Z_prev)])
        theta = np.hstack([self.A_, self.B_, self.H_])
        dyn = Z_next - theta @ G
        out = Y - self.C_ @ Z_next
        return 0.5 * float(np.sum(dyn * dyn)) + 0.5 * float(np.sum(out * out))

    # -------------------------------------------------------- serialization

    def save(self, path) -> None:
        self._check_fitted()
        params = json.dumps(self.get_params(), sort_keys=True)
        np.savez(
            path,
            format_version=np.int64(KOOPMAN_FORMAT_VERSION),
            params_json=np.bytes_(params.encode()),
            A=self.A_, B=self.B_, H=self.H_, C=self.C_, Q=self.Q_, R=self.R_,
            frequencies=self.lifting_.frequencies,
            phases=self.lifting_.phases,
            input_mean=self.lifting_.input_mean,
            input_scale=self.lifting_.input_scale,
            control_mean=self.control_mean_,
            control_scale=self.control_scale_,
        )

    @classmethod
    def load(cls, path) -> "KoopmanEstimator":
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != KOOPMAN_FORMAT_VERSION:
                raise DataFormatError(
                    f"unsupported model file version {version}, expected {KOOPMAN_FORMAT_VERSION}"
                )
            lifting = RffLifting(
                frequencies=data["frequencies"],
                phases=data["phases"],
                input_mean=data["input_mean"],
                input_scale=data["input_scale"],
            )
            params = json.loads(bytes(data["params_json"]).decode())
            return cls.from_operators(
                data["A"], data["B"], data["H"], data["C"], data["Q"], data["R"],
                lifting, control_mean=data["control_mean"],
                control_scale=data["control_scale"], **params,
            )
