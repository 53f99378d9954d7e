import numpy as np
import pytest
from scipy.optimize import minimize

from fedsub.layered import LayeredMatrix, ShapeMismatchError, norm
from fedsub.objectives import (Dataset, LogisticRegression, NonConvergenceError, Quadratic, TwoLayerMLP,
                               build_objective, finite_difference_gradient, generate_clustered_data,
                               solve_reference)


@pytest.fixture(scope="module")
def data():
    return generate_clustered_data(n_clients=4, samples_total=203, feature_dim=6, seed=5)


def random_point(obj, rng, scale=1.0):
    return LayeredMatrix([scale * rng.standard_normal(s.as_tuple()) for s in obj.shapes])


def test_clustered_data_shapes(data):
    assert data.n_clients == 4
    assert data.sizes() == [51, 51, 51, 50]
    assert data.feature_dim == 6
    for y in data.labels:
        assert set(np.unique(y)) <= {-1.0, 1.0}
    again = generate_clustered_data(n_clients=4, samples_total=203, feature_dim=6, seed=5)
    for a, b in zip(data.features, again.features):
        np.testing.assert_array_equal(a, b)


def test_clustered_data_is_heterogeneous():
    d = generate_clustered_data(n_clients=3, samples_total=30_000, feature_dim=5, heterogeneity_noise=0.0)
    # with zero noise every client's labels are a halfspace of its own features
    ws = []
    for A, y in zip(d.features, d.labels):
        w, *_ = np.linalg.lstsq(A, y, rcond=None)
        ws.append(w / np.linalg.norm(w))
    assert min(abs(ws[0] @ ws[1]), abs(ws[0] @ ws[2])) < 0.99


def test_data_validation():
    with pytest.raises(ValueError):
        generate_clustered_data(n_clients=5, samples_total=3)
    with pytest.raises(ValueError):
        Dataset((np.zeros((3, 2)),), (np.zeros(2),))


def test_csv_round_trip(tmp_path, data):
    paths = data.export_csv(tmp_path)
    assert [p.name for p in paths] == [f"client_{i:03d}.csv" for i in range(4)]
    header = paths[0].read_text().splitlines()[0]
    assert header == "a0,a1,a2,a3,a4,a5,label"
    back = Dataset.load_csv(tmp_path)
    for a, b in zip(data.features, back.features):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(data.labels, back.labels):
        np.testing.assert_array_equal(a, b)


def test_logistic_loss_matches_formula(data):
    obj = LogisticRegression(data, lam=0.01)
    x = random_point(obj, np.random.default_rng(0))
    w = x[0][:, 0]
    for i in range(data.n_clients):
        A, y = data.features[i], data.labels[i]
        want = np.mean(np.log1p(np.exp(-y * (A @ w)))) + 0.005 * w @ w
        assert obj.client_loss(i, x) == pytest.approx(want, rel=1e-13)


@pytest.mark.parametrize("kind", ["logistic", "quadratic", "mlp"])
def test_gradient_matches_finite_differences(kind, data):
    if kind == "logistic":
        obj = LogisticRegression(data, lam=1e-3)
    elif kind == "mlp":
        obj = TwoLayerMLP(data, hidden=3)
    else:
        obj = Quadratic.random(3, [(4, 2), (3, 1)], seed=1)
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = random_point(obj, rng)
        for i in range(obj.n_clients):
            fd = finite_difference_gradient(lambda z: obj.client_loss(i, z), x)
            g = obj.full_gradient(i, x)
            assert norm(g - fd) <= 1e-6 * max(norm(fd), 1e-8)


def test_quadratic_gradient_closed_form():
    obj = Quadratic.random(2, [(3, 2)], seed=4)
    x = random_point(obj, np.random.default_rng(2))
    for i in range(2):
        want = obj.A[i][0] @ x[0] - obj.b[i][0]
        np.testing.assert_allclose(obj.full_gradient(i, x)[0], want, rtol=1e-14)


def test_full_batch_minibatch_is_bit_exact(data):
    for obj in (LogisticRegression(data), TwoLayerMLP(data, hidden=4)):
        x = random_point(obj, np.random.default_rng(3), 0.3)
        for i in range(data.n_clients):
            s = obj.n_samples(i)
            g = obj.minibatch_gradient(i, x, s, np.random.default_rng(9))
            assert g.array_equal(obj.full_gradient(i, x))


def test_minibatch_is_unbiased(data):
    obj = LogisticRegression(data)
    x = random_point(obj, np.random.default_rng(4), 0.5)
    rng = np.random.default_rng(5)
    draws = np.array([obj.minibatch_gradient(0, x, 8, rng)[0][:, 0] for _ in range(4000)])
    full = obj.full_gradient(0, x)[0][:, 0]
    sem = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - full) <= 3 * sem + 1e-15)


def test_batch_size_validation(data):
    obj = LogisticRegression(data)
    x = obj.initial_point()
    with pytest.raises(ValueError):
        obj.minibatch_gradient(0, x, 0, np.random.default_rng())
    with pytest.raises(ValueError):
        obj.minibatch_gradient(0, x, 10_000, np.random.default_rng())


def test_client_and_shape_checks(data):
    obj = LogisticRegression(data)
    with pytest.raises(IndexError):
        obj.full_gradient(7, obj.initial_point())
    with pytest.raises(ShapeMismatchError):
        obj.full_gradient(0, LayeredMatrix([np.zeros((5, 1))]))


def test_logistic_smoothness_bounds_hessian(data):
    obj = LogisticRegression(data, lam=1e-4)
    L = obj.smoothness()
    rng = np.random.default_rng(6)
    for _ in range(5):
        H = obj.hessian(random_point(obj, rng, 0.1))[0]
        assert np.linalg.eigvalsh(H)[-1] <= L


def test_reference_solution_matches_scipy(data):
    obj = LogisticRegression(data, lam=1e-3)
    ref = solve_reference(obj)
    assert ref.grad_norm <= 1e-12
    res = minimize(lambda w: obj.loss(LayeredMatrix([w[:, None]])), np.zeros(6),
                   jac=lambda w: obj.gradient(LayeredMatrix([w[:, None]]))[0][:, 0],
                   method="BFGS", options={"gtol": 1e-11})
    np.testing.assert_allclose(ref.x_star[0][:, 0], res.x, atol=1e-6)


def test_reference_solution_quadratic_is_exact():
    obj = Quadratic.random(3, [(4, 2)], seed=0)
    ref = solve_reference(obj)
    A = sum(a[0] for a in obj.A) / 3
    b = sum(v[0] for v in obj.b) / 3
    np.testing.assert_allclose(ref.x_star[0], np.linalg.solve(A, b), rtol=1e-10)


def test_reference_solution_refuses_nonconvex(data):
    with pytest.raises(ValueError):
        solve_reference(TwoLayerMLP(data))
    with pytest.raises(NonConvergenceError):
        solve_reference(LogisticRegression(data, lam=1e-3), max_iter=1)


def test_build_objective(tmp_path, data):
    assert build_objective("quadratic", n_clients=2, shapes=[(3, 1)]).n_clients == 2
    data.export_csv(tmp_path)
    obj = build_objective("mlp", data_dir=tmp_path, hidden=5)
    assert obj.n_clients == 4
    assert [s.as_tuple() for s in obj.shapes] == [(6, 5), (5, 1)]
    with pytest.raises(ValueError):
        build_objective("svm")
