import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from mmkf.core import ModelBelief, check_covariance, khatri_rao
from mmkf.koopman import KoopmanEstimator, LiftedBelief, RffLifting
from mmkf.simulator import Trajectory


def scalar_linear_trajectory(n_steps, seed, a=0.9, b=0.1):
    """Noise-free x' = a x + b u driven by a persistent random input."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=n_steps)
    x = np.empty(n_steps)
    x[0] = rng.uniform(-1.0, 1.0)
    for k in range(n_steps - 1):
        x[k + 1] = a * x[k] + b * u[k]
    return Trajectory(times=np.arange(n_steps) * 0.01, states=x[:, None], controls=u[:, None])


def identity_estimator(n_steps=501, seed=0, lam=1e-8, u_zero=False):
    traj = scalar_linear_trajectory(n_steps, seed)
    if u_zero:
        states = np.empty(n_steps)
        states[0] = 1.0
        for k in range(n_steps - 1):
            states[k + 1] = 0.9 * states[k]
        traj = Trajectory(times=traj.times, states=states[:, None],
                          controls=np.zeros((n_steps, 1)))
    est = KoopmanEstimator(lifted_dim=1, lam_a=lam, lam_b=lam, lam_h=lam,
                           lam_c=lam, lam_q=lam, lam_r=lam, seed=0)
    return est.fit([traj]), traj


def ridge_oracle(traj, lam):
    """Closed-form ridge regression on the same design matrices, written with
    explicit inverses, independent of the estimator's solver path."""
    x = traj.states[:, 0]
    u = traj.controls[:, 0]
    Zp = x[:-1][None, :]
    Zn = x[1:][None, :]
    U = u[:-1][None, :]
    G = np.vstack([Zp, U, U * Zp])
    L = Zp.shape[1]
    M = G @ G.T + L * lam * np.eye(3)
    return (Zn @ G.T) @ np.linalg.inv(M)


class TestRffLifting:
    def test_zero_frequencies_constant_features(self):
        lift = RffLifting(frequencies=np.zeros((5, 2)), phases=np.zeros(5),
                          input_mean=np.zeros(2), input_scale=np.ones(2))
        z = lift.lift([0.3, -0.7])
        np.testing.assert_allclose(z[2:], np.sqrt(2.0 / 5.0) * np.ones(5), atol=1e-15)

    def test_identity_block(self):
        lift = RffLifting.create(3, 16, seed=4)
        x = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(lift.lift(x)[:3], x)

    def test_feature_bound(self):
        lift = RffLifting.create(3, 64, seed=4)
        z = lift.lift([10.0, -3.0, 2.0])
        bound = np.sqrt(2.0 / 61.0)
        assert np.all(np.abs(z[3:]) <= bound + 1e-15)

    def test_identity_mode(self):
        lift = RffLifting.create(2, 2, seed=0)
        np.testing.assert_array_equal(lift.lift([1.0, 2.0]), [1.0, 2.0])

    def test_lifted_dim_guard(self):
        with pytest.raises(ValueError, match="lifted dimension"):
            RffLifting.create(3, 2, seed=0)

    def test_lift_columns_matches_lift(self):
        lift = RffLifting.create(3, 10, seed=9, states=np.random.default_rng(0).normal(size=(20, 3)))
        X = np.random.default_rng(1).normal(size=(7, 3))
        cols = lift.lift_columns(X)
        for i in range(7):
            np.testing.assert_allclose(cols[:, i], lift.lift(X[i]), atol=1e-15)


class TestFit:
    def test_recovers_scalar_linear_system(self):
        est, traj = identity_estimator()
        assert est.A_[0, 0] == pytest.approx(0.9, abs=1e-3)
        assert est.B_[0, 0] == pytest.approx(0.1, abs=1e-3)
        assert np.linalg.norm(est.H_) < 1e-6

    def test_matches_closed_form_ridge_oracle(self):
        lam = 1e-8
        est, traj = identity_estimator(lam=lam)
        theta = ridge_oracle(traj, lam)
        np.testing.assert_allclose(np.hstack([est.A_, est.B_, est.H_]), theta, atol=1e-9)

    def test_unexcited_input_gain_driven_to_zero(self):
        est, _ = identity_estimator(u_zero=True)
        assert abs(est.B_[0, 0]) < 1e-6

    def test_refit_bit_identical(self):
        est1, _ = identity_estimator()
        est2, _ = identity_estimator()
        np.testing.assert_array_equal(est1.A_, est2.A_)
        np.testing.assert_array_equal(est1.Q_, est2.Q_)

    def test_default_output_map_is_selector(self):
        traj = scalar_linear_trajectory(800, 3)
        est = KoopmanEstimator(lifted_dim=6, seed=1).fit([traj])
        np.testing.assert_array_equal(est.C_, np.eye(1, 6))

    def test_learned_output_map_recovers_selector(self):
        # With identity lifting the best linear readout of the state is the
        # state itself.
        traj = scalar_linear_trajectory(600, 9)
        est = KoopmanEstimator(lifted_dim=1, lam_c=1e-10, learn_output_map=True,
                               seed=1).fit([traj])
        assert est.C_[0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_sample_count_precondition(self):
        traj = scalar_linear_trajectory(10, 0)
        with pytest.raises(ValueError, match="not enough transitions"):
            KoopmanEstimator(lifted_dim=8, seed=0).fit([traj])

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError, match="lam_a"):
            KoopmanEstimator(lam_a=-1.0).fit([scalar_linear_trajectory(100, 0)])

    def test_rank_deficiency_names_block(self):
        # Constant zero input with zero input regularization leaves the
        # control row unidentifiable.
        n_steps = 200
        states = np.linspace(1.0, 2.0, n_steps)
        traj = Trajectory(times=np.arange(n_steps) * 0.01, states=states[:, None],
                          controls=np.zeros((n_steps, 1)))
        est = KoopmanEstimator(lifted_dim=1, lam_a=0.0, lam_b=0.0, lam_h=0.0, seed=0)
        with pytest.raises(ValueError, match="rank-deficient"):
            est.fit([traj])

    def test_v1_non_increasing_with_less_regularization(self):
        traj = scalar_linear_trajectory(600, 5)
        lam = 1e-3
        strong = KoopmanEstimator(lifted_dim=4, lam_a=lam, lam_b=lam, lam_h=lam,
                                  lam_c=lam, lam_q=lam, lam_r=lam, seed=2).fit([traj])
        weak = KoopmanEstimator(lifted_dim=4, lam_a=lam / 10, lam_b=lam / 10, lam_h=lam / 10,
                                lam_c=lam / 10, lam_q=lam / 10, lam_r=lam / 10, seed=2).fit([traj])
        assert weak.training_loss_v1([traj]) <= strong.training_loss_v1([traj]) + 1e-12

    def test_one_step_error_close_to_least_squares(self):
        # On a genuinely linear system the learned model's prediction error is
        # within 1e-3 of the plain least-squares oracle's error.
        traj = scalar_linear_trajectory(500, 7)
        est = KoopmanEstimator(lifted_dim=1, lam_a=1e-8, lam_b=1e-8, lam_h=1e-8, seed=0).fit([traj])
        theta = ridge_oracle(traj, 0.0)
        x, u = traj.states[:-1, 0], traj.controls[:-1, 0]
        target = traj.states[1:, 0]
        pred_model = est.A_[0, 0] * x + est.B_[0, 0] * u + est.H_[0, 0] * u * x
        pred_oracle = theta[0, 0] * x + theta[0, 1] * u + theta[0, 2] * u * x
        err_model = np.sqrt(np.mean((pred_model - target) ** 2))
        err_oracle = np.sqrt(np.mean((pred_oracle - target) ** 2))
        assert err_model <= err_oracle + 1e-3


class TestLtv:
    def make_model(self, d, q, seed):
        rng = np.random.default_rng(seed)
        lift = RffLifting.create(d, d, seed=seed)
        return KoopmanEstimator.from_operators(
            A=rng.normal(size=(d, d)), B=rng.normal(size=(d, q)),
            H=rng.normal(size=(d, d * q)), C=np.eye(d), Q=np.eye(d), R=np.eye(d),
            lifting=lift,
        )

    def test_zero_input(self):
        model = self.make_model(3, 2, 0)
        A_t, v_t = model.ltv_matrices(np.zeros(2))
        np.testing.assert_allclose(A_t, model.A_, atol=1e-15)
        np.testing.assert_allclose(v_t, np.zeros(3), atol=1e-15)

    def test_no_bilinear_term(self):
        model = self.make_model(3, 2, 1)
        model.H_ = np.zeros_like(model.H_)
        A_t, _ = model.ltv_matrices([0.7, -0.3])
        np.testing.assert_allclose(A_t, model.A_, atol=1e-15)

    def test_matches_bilinear_rhs(self):
        # Oracle: direct evaluation of A z + B u + H kron(u, z).
        rng = np.random.default_rng(12)
        for d in (2, 4, 8):
            for q in (1, 2):
                model = self.make_model(d, q, int(rng.integers(1 << 30)))
                for _ in range(10):
                    z = rng.normal(size=d)
                    u = rng.normal(size=q)
                    direct = model.A_ @ z + model.B_ @ u + model.H_ @ np.kron(u, z)
                    A_t, v_t = model.ltv_matrices(u)
                    np.testing.assert_allclose(A_t @ z + v_t, direct, atol=1e-12)


class TestForecastProject:
    def fitted(self):
        traj = scalar_linear_trajectory(800, 2)
        return KoopmanEstimator(lifted_dim=5, seed=3).fit([traj])

    def test_alpha_one_pure_ltv(self):
        est = self.fitted()
        belief = LiftedBelief(est.lift([0.4]), 0.1 * np.eye(5))
        out = est.forecast(belief, [0.2], alpha=1.0)
        A_t, v_t = est.ltv_matrices([0.2])
        np.testing.assert_allclose(out.mean, A_t @ belief.mean + v_t, atol=1e-14)

    def test_alpha_zero_direct_embedding(self):
        est = self.fitted()

        class Doubler:
            def step(self, x, u):
                return 2.0 * np.asarray(x)

        belief = LiftedBelief(est.lift([0.4]), 0.1 * np.eye(5))
        out = est.forecast(belief, [0.2], predictor=Doubler(), alpha=0.0)
        assert out.mean[0] == pytest.approx(0.8, abs=1e-12)

    def test_identity_propagation_keeps_covariance(self):
        lift = RffLifting.create(2, 2, seed=0)
        est = KoopmanEstimator.from_operators(
            A=np.eye(2), B=np.zeros((2, 1)), H=np.zeros((2, 2)), C=np.eye(2),
            Q=np.zeros((2, 2)), R=np.zeros((2, 2)), lifting=lift,
        )
        P = np.array([[0.5, 0.1], [0.1, 0.3]])
        out = est.forecast(LiftedBelief(np.ones(2), P), [0.0], alpha=1.0, floor=0.0)
        np.testing.assert_allclose(out.cov, P, atol=1e-14)

    def test_blend_requires_predictor(self):
        est = self.fitted()
        with pytest.raises(ValueError, match="predictor"):
            est.forecast(LiftedBelief(np.zeros(5), np.eye(5)), [0.0], alpha=0.5)

    def test_project_selector(self):
        est = self.fitted()
        z = est.lift([0.7])
        belief = est.project_to_state(LiftedBelief(z, np.eye(5)), model_id="m")
        assert belief.mean[0] == pytest.approx(0.7)
        np.testing.assert_allclose(belief.cov, np.eye(1), atol=1e-12)
        assert belief.model_id == "m"

    def test_projection_preserves_psd(self):
        rng = np.random.default_rng(3)
        est = self.fitted()
        for _ in range(25):
            M = rng.normal(size=(5, 5))
            belief = LiftedBelief(np.zeros(5), M @ M.T)
            out = est.project_to_state(belief)
            check_covariance(out.cov, min_eig=0.0)

    def test_propagation_preserves_psd(self):
        rng = np.random.default_rng(4)
        est = self.fitted()
        for _ in range(25):
            M = rng.normal(size=(5, 5))
            belief = LiftedBelief(rng.normal(size=5), M @ M.T)
            out = est.forecast(belief, rng.normal(size=1))
            check_covariance(out.cov, min_eig=0.0)

    def test_reanchor_blocks(self):
        est = self.fitted()
        prev = LiftedBelief(np.zeros(5), np.diag([1.0, 2.0, 3.0, 4.0, 5.0]))
        analysis = ModelBelief(np.array([0.3]), np.array([[0.25]]))
        out = est.reanchor(analysis, prev, floor=0.0)
        assert out.mean[0] == pytest.approx(0.3)
        assert out.cov[0, 0] == pytest.approx(0.25, abs=1e-12)
        np.testing.assert_allclose(np.diag(out.cov)[1:], [2.0, 3.0, 4.0, 5.0], atol=1e-12)
        np.testing.assert_allclose(out.cov[0, 1:], np.zeros(4), atol=1e-12)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            KoopmanEstimator().ltv_matrices([0.0])


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        traj = scalar_linear_trajectory(900, 6)
        est = KoopmanEstimator(lifted_dim=8, seed=5).fit([traj])
        path = tmp_path / "koopman.npz"
        est.save(path)
        loaded = KoopmanEstimator.load(path)
        for attr in ("A_", "B_", "H_", "C_", "Q_", "R_"):
            np.testing.assert_array_equal(getattr(loaded, attr), getattr(est, attr))
        np.testing.assert_array_equal(loaded.lifting_.frequencies, est.lifting_.frequencies)
        np.testing.assert_array_equal(loaded.lifting_.input_scale, est.lifting_.input_scale)
        assert loaded.get_params() == est.get_params()
        z = est.lift([0.3])
        A1, v1 = est.ltv_matrices([0.1])
        A2, v2 = loaded.ltv_matrices([0.1])
        np.testing.assert_array_equal(A1, A2)
        np.testing.assert_array_equal(v1, v2)
        np.testing.assert_array_equal(z, loaded.lift([0.3]))

    def test_version_check(self, tmp_path):
        traj = scalar_linear_trajectory(900, 6)
        est = KoopmanEstimator(lifted_dim=4, seed=5).fit([traj])
        path = tmp_path / "koopman.npz"
        est.save(path)
        data = dict(np.load(path, allow_pickle=False))
        data["format_version"] = np.int64(99)
        np.savez(path, **data)
        from mmkf.exceptions import DataFormatError

        with pytest.raises(DataFormatError, match="version"):
            KoopmanEstimator.load(path)


class TestDesignMatrices:
    def test_khatri_rao_block_layout(self):
        # The regressor stack pairs each control with each lifted coordinate in
        # control-major order, matching kron(u, z).
        rng = np.random.default_rng(0)
        U = rng.normal(size=(2, 5))
        Z = rng.normal(size=(3, 5))
        KR = khatri_rao(U, Z)
        for col in range(5):
            np.testing.assert_allclose(KR[:, col], np.kron(U[:, col], Z[:, col]), atol=1e-15)
