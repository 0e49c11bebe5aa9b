import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from mmkf.predictors import PhysicsPredictor, RffRegressor, fit_rff_predictor, transition_dataset
from mmkf.simulator import Trajectory
from mmkf.vehicle import VehicleParams, bicycle_step


def scalar_system_data(n_samples, rng, noise=0.0):
    """x' = 0.9 x + 0.1 u, optionally with target noise."""
    x = rng.uniform(-2.0, 2.0, size=n_samples)
    u = rng.uniform(-1.0, 1.0, size=n_samples)
    y = 0.9 * x + 0.1 * u + noise * rng.standard_normal(n_samples)
    return np.column_stack([x, u]), y[:, None]


class TestPhysicsPredictor:
    def test_delegates_to_bicycle_step(self):
        pred = PhysicsPredictor(VehicleParams(), dt=0.005)
        x, u = np.array([18.0, 0.2, 0.05]), np.array([0.01, 40.0])
        np.testing.assert_array_equal(pred.step(x, u), bicycle_step(x, u, pred.params, pred.dt))

    def test_deterministic(self):
        pred = PhysicsPredictor()
        x, u = np.array([18.0, 0.2, 0.05]), np.array([0.01, 40.0])
        np.testing.assert_array_equal(pred.step(x, u), pred.step(x, u))

    def test_jacobian_shape(self):
        assert PhysicsPredictor().jacobian([20.0, 0.0, 0.0], [0.0, 0.0]).shape == (3, 3)


class TestRffRegressorFit:
    def test_identity_dynamics_reproduced(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1.0, 1.0, size=(400, 3))
        U = rng.uniform(-1.0, 1.0, size=(400, 1))
        inputs = np.hstack([X, U])
        model = RffRegressor(n_features=256, ridge=1e-8, seed=1).fit(inputs, X)
        rmse = np.sqrt(np.mean((model.predict(inputs) - X) ** 2))
        assert rmse < 1e-3

    def test_beats_linear_oracle_margin(self):
        # Oracle: closed-form linear least squares on the same noisy data,
        # scored on held-out samples; the regressor must come within 10%.
        rng = np.random.default_rng(42)
        X_train, y_train = scalar_system_data(500, rng, noise=0.01)
        X_test, y_test = scalar_system_data(300, rng, noise=0.01)

        A = np.hstack([X_train, np.ones((500, 1))])
        coef, *_ = np.linalg.lstsq(A, y_train, rcond=None)
        oracle_pred = np.hstack([X_test, np.ones((300, 1))]) @ coef
        oracle_rmse = np.sqrt(np.mean((oracle_pred - y_test) ** 2))

        model = RffRegressor(n_features=128, ridge=1e-8, seed=0).fit(X_train, y_train)
        rmse = np.sqrt(np.mean((model.predict(X_test) - y_test) ** 2))
        assert rmse <= 1.1 * oracle_rmse

    def test_seed_robustness(self):
        rng = np.random.default_rng(42)
        X_train, y_train = scalar_system_data(500, rng, noise=0.01)
        X_test, y_test = scalar_system_data(300, rng, noise=0.01)
        A = np.hstack([X_train, np.ones((500, 1))])
        coef, *_ = np.linalg.lstsq(A, y_train, rcond=None)
        oracle_rmse = np.sqrt(np.mean((np.hstack([X_test, np.ones((300, 1))]) @ coef - y_test) ** 2))
        for seed in (7, 8):
            model = RffRegressor(n_features=128, ridge=1e-8, seed=seed).fit(X_train, y_train)
            rmse = np.sqrt(np.mean((model.predict(X_test) - y_test) ** 2))
            assert rmse <= 1.1 * oracle_rmse

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(1)
        X, y = scalar_system_data(100, rng)
        m1 = RffRegressor(n_features=32, seed=5).fit(X, y)
        m2 = RffRegressor(n_features=32, seed=5).fit(X, y)
        np.testing.assert_array_equal(m1.weights_, m2.weights_)
        np.testing.assert_array_equal(m1.predict(X), m2.predict(X))

    def test_training_loss_monotone_in_features(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1.0, 1.0, size=(300, 2))
        y = np.column_stack([np.sin(2.0 * X[:, 0]) + 0.3 * X[:, 1]])
        losses = []
        for d in (16, 64, 256):
            model = RffRegressor(n_features=d, ridge=1e-10, seed=11).fit(X, y)
            losses.append(float(np.mean((model.predict(X) - y) ** 2)))
        assert losses[0] >= losses[1] >= losses[2]

    def test_identical_samples_rejected(self):
        X = np.ones((10, 3))
        y = np.ones((10, 2))
        with pytest.raises(ValueError, match="rank-deficient"):
            RffRegressor().fit(X, y)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 2"):
            RffRegressor().fit(np.ones((1, 2)), np.ones((1, 1)))

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            RffRegressor().predict(np.ones((1, 2)))

    def test_sklearn_get_params_round_trip(self):
        params = RffRegressor(n_features=77, ridge=1e-3, seed=9).get_params()
        assert params["n_features"] == 77
        assert RffRegressor(**params).ridge == 1e-3


class TestRffRegressorPredict:
    def test_step_matches_predict(self):
        rng = np.random.default_rng(4)
        X, y = scalar_system_data(200, rng)
        model = RffRegressor(n_features=64, seed=2).fit(X, y)
        x, u = np.array([0.5]), np.array([-0.2])
        np.testing.assert_array_equal(model.step(x, u), model.predict([[0.5, -0.2]])[0])

    def test_step_batch_rows(self):
        rng = np.random.default_rng(4)
        X, y = scalar_system_data(200, rng)
        model = RffRegressor(n_features=64, seed=2).fit(X, y)
        states = np.array([[0.1], [0.2], [0.3]])
        out = model.step_batch(states, [0.5])
        for i in range(3):
            np.testing.assert_allclose(out[i], model.step(states[i], [0.5]), atol=1e-15)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(4)
        X, y = scalar_system_data(50, rng)
        model = RffRegressor(n_features=16, seed=2).fit(X, y)
        with pytest.raises(ValueError, match="input columns"):
            model.predict(np.ones((1, 5)))

    def test_bitwise_deterministic_calls(self):
        rng = np.random.default_rng(4)
        X, y = scalar_system_data(50, rng)
        model = RffRegressor(n_features=16, seed=2).fit(X, y)
        a = model.step([0.3], [0.1])
        b = model.step([0.3], [0.1])
        np.testing.assert_array_equal(a, b)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        X, y = scalar_system_data(200, rng)
        model = RffRegressor(n_features=64, seed=3).fit(X, y)
        path = tmp_path / "rff.npz"
        model.save(path)
        loaded = RffRegressor.load(path)
        np.testing.assert_array_equal(loaded.weights_, model.weights_)
        np.testing.assert_array_equal(loaded.frequencies_, model.frequencies_)
        np.testing.assert_array_equal(loaded.predict(X), model.predict(X))
        assert loaded.get_params() == model.get_params()


class TestTrajectoryFitting:
    def test_transition_dataset_stacking(self):
        traj = Trajectory(times=[0.0, 0.005, 0.01],
                          states=[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
                          controls=[[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]])
        X, Y = transition_dataset([traj])
        assert X.shape == (2, 5)
        np.testing.assert_array_equal(X[0], [1.0, 0.0, 0.0, 0.1, 0.0])
        np.testing.assert_array_equal(Y[1], [3.0, 0.0, 0.0])

    def test_fit_rff_predictor_runs(self):
        rng = np.random.default_rng(8)
        trajs = []
        for _ in range(3):
            states = rng.normal(size=(50, 2)).cumsum(axis=0) * 0.01 + [10.0, 0.0]
            controls = rng.normal(size=(50, 1)) * 0.01
            trajs.append(Trajectory(times=np.arange(50) * 0.005, states=states, controls=controls))
        model = fit_rff_predictor(trajs, n_features=32, seed=1)
        assert model.n_inputs_ == 3 and model.n_outputs_ == 2
