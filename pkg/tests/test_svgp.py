"""SVGP regression tests.

Oracles: an exact GP regressor (O(N^3), closed form, implemented here with
plain numpy) sharing the kernel family, and central finite differences of the
ELBO for the gradient check.
"""

import numpy as np
import pytest

from occugrasp import svgp
from occugrasp.camera import GaussianPoint3
from occugrasp.field import build_field


def rbf_kernel(a, b, lengthscale, signal_var):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return signal_var * np.exp(-0.5 * d2 / lengthscale ** 2)


def exact_gp_mean(x_train, y_train, x_query, lengthscale, signal_var, noise_var):
    """Closed-form GP posterior mean with the same kernel family."""
    K = rbf_kernel(x_train, x_train, lengthscale, signal_var)
    K[np.diag_indices_from(K)] += noise_var
    alpha = np.linalg.solve(K, y_train)
    return rbf_kernel(x_query, x_train, lengthscale, signal_var) @ alpha


def smooth_bump(x):
    return np.exp(-((x ** 2).sum(axis=-1)) / 0.5)


@pytest.fixture(scope="module")
def bump_problem():
    rng = np.random.default_rng(42)
    X = rng.uniform(-1, 1, size=(150, 3))
    return X, smooth_bump(X)


class TestMakeTrainingSet:
    def test_single_point_target_is_one(self):
        pt = GaussianPoint3(mean=np.zeros(3), covariance=0.01 * np.eye(3))
        field = build_field([pt])
        inputs, targets = svgp.make_training_set(field, [pt])
        assert inputs.shape == (1, 3)
        assert targets[0] == pytest.approx(1.0)

    def test_duplicate_points_equal_targets(self):
        pts = [GaussianPoint3(mean=np.ones(3), covariance=0.01 * np.eye(3))] * 3
        field = build_field(pts)
        _, targets = svgp.make_training_set(field, pts)
        assert np.allclose(targets, targets[0])

    def test_interior_targets_exceed_hull_targets(self):
        rng = np.random.default_rng(1)
        means = rng.normal(scale=0.1, size=(100, 3))
        pts = [GaussianPoint3(mean=m, covariance=0.01 * np.eye(3)) for m in means]
        field = build_field(pts)
        _, targets = svgp.make_training_set(field, pts)
        r = np.linalg.norm(means - means.mean(axis=0), axis=1)
        interior = targets[r < np.quantile(r, 0.2)]
        hull = targets[r > np.quantile(r, 0.8)]
        assert interior.mean() > hull.mean()

    def test_targets_match_normalized_density_oracle(self):
        rng = np.random.default_rng(2)
        means = rng.normal(scale=0.2, size=(30, 3))
        pts = [GaussianPoint3(mean=m, covariance=0.02 * np.eye(3)) for m in means]
        field = build_field(pts)
        _, targets = svgp.make_training_set(field, pts)
        dens = np.array([field.density(m) for m in means])
        assert np.allclose(targets, dens / dens.max(), rtol=1e-9)


class TestTrain:
    def test_constant_targets_recovered(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, size=(50, 3))
        y = np.full(50, 0.7)
        model, _ = svgp.train(X, y, svgp.TrainConfig(inducing=25, lr=0.05,
                                                     epochs=200, seed=0))
        preds = svgp.predict(model, X)
        errs = [abs(p.occupancy_mean - 0.7) for p in preds]
        assert max(errs) < 0.05

    def test_matches_exact_gp_oracle(self, bump_problem):
        X, y = bump_problem
        model, _ = svgp.train(X, y, svgp.TrainConfig(inducing=len(X), lr=0.05,
                                                     epochs=600, seed=1))
        oracle = exact_gp_mean(model.normalize(X), y, model.normalize(X),
                               model.lengthscale, model.signal_variance,
                               model.noise_variance)
        preds = svgp.predict(model, X)
        rmse = np.sqrt(np.mean([(p.occupancy_mean - o) ** 2
                                for p, o in zip(preds, oracle)]))
        assert rmse < 0.1 * (y.max() - y.min())

    def test_seeded_determinism(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(-1, 1, size=(40, 3))
        y = smooth_bump(X)
        cfg = svgp.TrainConfig(inducing=20, lr=0.01, epochs=20, batch=16, seed=7)
        _, r1 = svgp.train(X, y, cfg)
        _, r2 = svgp.train(X, y, cfg)
        assert r1.elbo_trace == r2.elbo_trace

    def test_elbo_nondecreasing_full_batch(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(-1, 1, size=(60, 3))
        y = smooth_bump(X)
        _, report = svgp.train(X, y, svgp.TrainConfig(inducing=30, lr=1e-3,
                                                      epochs=100, batch=60, seed=2))
        trace = np.array(report.elbo_trace)
        drops = np.diff(trace) < 0
        magnitudes = np.abs(np.diff(trace))[drops] / np.abs(trace[:-1][drops])
        assert drops.sum() <= 5
        assert np.all(magnitudes < 0.01)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            svgp.train(np.zeros((3, 3)), np.zeros(3), svgp.TrainConfig(epochs=0))

    def test_inducing_points_inside_dilated_bbox(self):
        rng = np.random.default_rng(6)
        X = rng.uniform(-2, 3, size=(100, 3))
        y = smooth_bump(X)
        model, _ = svgp.train(X, y, svgp.TrainConfig(inducing=40, lr=0.01,
                                                     epochs=5, seed=0))
        Xn = model.normalize(X)
        lo, hi = Xn.min(axis=0), Xn.max(axis=0)
        pad = 0.1 * (hi - lo)
        assert np.all(model.inducing_points >= lo - pad)
        assert np.all(model.inducing_points <= hi + pad)


@pytest.fixture(scope="module")
def model(bump_problem):
    X, y = bump_problem
    trained, _ = svgp.train(X, y, svgp.TrainConfig(inducing=60, lr=0.05,
                                                   epochs=200, seed=3))
    return trained


class TestPredict:
    def test_variance_scaling_arithmetic(self, model, bump_problem):
        X, _ = bump_problem
        for p in svgp.predict(model, X[:20]):
            assert p.raw_variance >= 0
            assert p.scaled_variance == pytest.approx(
                p.raw_variance / (1 + abs(p.occupancy_mean)), rel=1e-12)
            assert p.scaled_variance <= p.raw_variance

    def test_far_query_reverts_to_prior_variance(self, model):
        far = svgp.predict(model, np.array([[60.0, -55.0, 70.0]]))[0]
        prior = model.signal_variance + model.noise_variance
        assert far.raw_variance == pytest.approx(prior, rel=0.05)

    def test_variance_lower_where_data_is_dense(self, model, bump_problem):
        X, _ = bump_problem
        near = np.mean([p.raw_variance for p in svgp.predict(model, X)])
        ell = model.lengthscale * model.input_scale.mean()
        far_pts = X[:20] + 10 * max(ell, 1.0)
        far = np.mean([p.raw_variance for p in svgp.predict(model, far_pts)])
        assert near < far

    def test_scaling_monotone_in_mean_magnitude(self):
        v = 0.4
        scaled = [v / (1 + abs(mu)) for mu in (0.0, 0.5, 1.0, 2.0)]
        assert scaled == sorted(scaled, reverse=True)
        assert scaled[0] == v


class TestGradients:
    def test_hyperparameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        X = rng.uniform(-1, 1, size=(20, 3))
        y = smooth_bump(X)
        model, _ = svgp.train(X, y, svgp.TrainConfig(inducing=10, lr=0.01,
                                                     epochs=10, seed=4))
        grads = svgp.elbo_hyperparameter_gradients(model, X, y)
        h = 1e-5
        for name in ("log_lengthscale", "log_signal_variance", "log_noise_variance"):
            hi = svgp.SvgpModel(**{**model.__dict__, name: getattr(model, name) + h})
            lo = svgp.SvgpModel(**{**model.__dict__, name: getattr(model, name) - h})
            fd = (svgp.full_elbo(hi, X, y) - svgp.full_elbo(lo, X, y)) / (2 * h)
            assert grads[name] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestSerialization:
    def test_round_trip(self, bump_problem, tmp_path):
        X, y = bump_problem
        model, _ = svgp.train(X, y, svgp.TrainConfig(inducing=20, lr=0.02,
                                                     epochs=10, seed=5))
        path = tmp_path / "model.bin"
        svgp.save_model(model, path)
        loaded = svgp.load_model(path)
        for p1, p2 in zip(svgp.predict(model, X[:10]), svgp.predict(loaded, X[:10])):
            assert p1.occupancy_mean == p2.occupancy_mean
            assert p1.raw_variance == p2.raw_variance

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPEnope")
        with pytest.raises(Exception):
            svgp.load_model(path)
