"""Ensemble covariance propagation.

The forecast uncertainty of any predictor, physics-based or data-driven, is
measured the same way: perturb the analysis state with draws from a sampling
covariance, push every member through the predictor, and read mean and
covariance off the propagated spread. Perturbations are drawn fresh each step;
no ensemble persists between steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_EIG_FLOOR, ModelBelief, min_eigenvalue, psd_project, symmetrize


@dataclass
class EnsembleSet:
    """Perturbed state samples for one model, with the covariance they came from."""

    members: np.ndarray          # (N, n)
    sampling_cov: np.ndarray     # (n, n)
    seed: int | None = None

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        self.sampling_cov = np.asarray(self.sampling_cov, dtype=float)
        if self.members.shape[0] < 2:
            raise ValueError(f"ensemble needs at least 2 members, got {self.members.shape[0]}")
        n = self.members.shape[1]
        if self.sampling_cov.shape != (n, n):
            raise ValueError(
                f"sampling covariance shape {self.sampling_cov.shape} does not match state dim {n}"
            )

    @property
    def size(self) -> int:
        return self.members.shape[0]


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Lower-triangular-ish square root; falls back to an eigen square root for
    singular PSD input (e.g. a zero sampling covariance)."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(symmetrize(S))
        return V * np.sqrt(np.maximum(w, 0.0))


def generate_ensemble(x, S, n_members: int, seed) -> EnsembleSet:
    """Draw ``n_members`` perturbed copies of ``x`` with covariance ``S``.

    ``seed`` is an int or a numpy Generator; a given int always produces the
    same members. Raises for fewer than 2 members or a non-PSD S.
    """
    if n_members < 2:
        raise ValueError(f"ensemble needs at least 2 members (covariance undefined), got {n_members}")
    x = np.asarray(x, dtype=float).ravel()
    S = symmetrize(S)
    if S.shape != (x.size, x.size):
        raise ValueError(f"sampling covariance shape {S.shape} does not match state dim {x.size}")
    if min_eigenvalue(S) < -1e-9:
        raise ValueError("sampling covariance is not positive semidefinite")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    root = _psd_sqrt(S)
    members = x + rng.standard_normal((n_members, x.size)) @ root.T
    seed_id = seed if isinstance(seed, (int, np.integer)) else None
    return EnsembleSet(members=members, sampling_cov=S, seed=seed_id)


def propagate_ensemble(predictor, ensemble: EnsembleSet, u) -> EnsembleSet:
    """Advance every member one step through ``predictor``; order is preserved
    and the sampling covariance is carried through unchanged.

    Member evaluation is independent, so a vectorized predictor path must give
    the same members as a sequential loop. On failure the error names the
    offending member index.
    """
    members = ensemble.members
    if hasattr(predictor, "step_batch"):
        try:
            out = np.atleast_2d(np.asarray(predictor.step_batch(members, u), dtype=float))
        except Exception as exc:
            _raise_with_member_index(predictor, members, u, exc)
    else:
        out = np.empty_like(members)
        for i in range(members.shape[0]):
            try:
                out[i] = predictor.step(members[i], u)
            except Exception as exc:
                raise type(exc)(f"ensemble member {i} failed: {exc}") from exc
    return EnsembleSet(members=out, sampling_cov=ensemble.sampling_cov, seed=ensemble.seed)


def _raise_with_member_index(predictor, members, u, batch_exc):
    """Replay members one by one to localize a batch failure."""
    for i in range(members.shape[0]):
        try:
            predictor.step(members[i], u)
        except Exception as exc:
            raise type(exc)(f"ensemble member {i} failed: {exc}") from exc
    raise batch_exc


def ensemble_statistics(ensemble: EnsembleSet, model_id: str = "",
                        floor: float = DEFAULT_EIG_FLOOR) -> ModelBelief:
    """Mean and unbiased sample covariance of the members (then PSD-floored).

    Deviations are summed in member index order (vectorized, fixed order), so
    the result is deterministic for a given member list.
    """
    members = ensemble.members
    mean = members.mean(axis=0)
    dev = members - mean
    cov = dev.T @ dev / (members.shape[0] - 1)
    return ModelBelief(mean, psd_project(cov, floor), model_id=model_id)


def adapt_sampling_cov(S, innovation_cov, H, R, rho: float) -> np.ndarray:
    """Exponential update of the sampling covariance from innovation statistics.

    The excess of the empirical innovation covariance over the measurement
    noise is mapped back to state space through pinv(H) and blended into S at
    rate (1 - rho) on the observed block; rows and columns touching states the
    measurement does not observe are left unchanged.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"forgetting factor must be in (0, 1], got {rho}")
    S = symmetrize(S)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    excess_obs = psd_project(np.asarray(innovation_cov, dtype=float) - np.asarray(R, dtype=float), 0.0)
    Hp = np.linalg.pinv(H)
    excess = Hp @ excess_obs @ Hp.T
    observed = np.flatnonzero(np.any(H != 0.0, axis=0))
    blended = S.copy()
    idx = np.ix_(observed, observed)
    blended[idx] = rho * S[idx] + (1.0 - rho) * excess[idx]
    return psd_project(blended, 0.0)
