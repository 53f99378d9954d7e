import numpy as np
import pytest

from fedsub.experiment import stepsize_conditions
from fedsub.federation import (ClientState, DivergenceError, DriftCorrection, Engine, FedConfig, Federation,
                               ServerState, dual_update, local_round_dual, local_round_vr, run, run_fedavg,
                               server_update, trajectory)
from fedsub.layered import LayeredMatrix, add, norm
from fedsub.objectives import LogisticRegression, Quadratic, generate_clustered_data, solve_reference
from fedsub.projection import SubspaceDims, generate, project_up, round_seed, transport

SHAPES = [(6, 2), (4, 3)]


def quad(n=4, seed=0, shapes=SHAPES, **kw):
    return Quadratic.random(n, shapes, seed=seed, **kw)


def rand_like(shapes, rng):
    return LayeredMatrix([rng.standard_normal(s) for s in shapes])


def zeros_sub(P, obj):
    return LayeredMatrix.zeros([(r, s.cols) for r, s in zip(P.ranks, obj.shapes)])


def proj(method, obj, rank, seed=0, k=0):
    dims = SubspaceDims.full(obj.shapes) if method == "identity" else SubspaceDims.resolve(rank, obj.shapes)
    return generate(method, obj.shapes, dims, round_seed(seed, k))


# ------------------------------------------------------------------ local rounds


def test_single_step_identity_is_gradient_step():
    obj = quad()
    x = rand_like(SHAPES, np.random.default_rng(0))
    P = proj("identity", obj, None)
    cfg = FedConfig(local_steps=1, step_size=0.3, method="identity")
    client = ClientState(1, zeros_sub(P, obj), zeros_sub(P, obj))
    B = local_round_dual(client, x, P, cfg, obj)
    want = -0.3 * obj.full_gradient(1, x)
    assert B.array_equal(want)


def test_zero_objective_keeps_b_zero():
    obj = Quadratic([[np.zeros((6, 6)), np.zeros((4, 4))]], [[np.zeros((6, 2)), np.zeros((4, 3))]])
    P = proj("cd", obj, 2)
    cfg = FedConfig(local_steps=5, step_size=0.5, rank=2)
    client = ClientState(0, zeros_sub(P, obj), zeros_sub(P, obj))
    x = rand_like(SHAPES, np.random.default_rng(1))
    assert norm(local_round_dual(client, x, P, cfg, obj)) == 0.0


def test_three_steps_match_loop_oracle():
    obj = quad()
    rng = np.random.default_rng(2)
    x = rand_like(SHAPES, rng)
    P = proj("cd", obj, [3, 2], seed=4)
    lam = LayeredMatrix([rng.standard_normal((r, s.cols)) for r, s in zip(P.ranks, obj.shapes)])
    eta, tau, i = 0.2, 3, 2
    cfg = FedConfig(local_steps=tau, step_size=eta, rank=[3, 2])
    B = local_round_dual(ClientState(i, lam, lam), x, P, cfg, obj)
    for l in range(2):
        Pl = P.dense(l)
        m, r = Pl.shape
        A, b = obj.A[i][l], obj.b[i][l]
        Bl = np.zeros((r, x[l].shape[1]))
        for _ in range(tau):
            grad = A @ (x[l] + Pl @ Bl) - b
            Bl = Bl - eta * ((r / m) * Pl.T @ grad + lam[l] / (eta * tau))
        np.testing.assert_allclose(B[l], Bl, atol=1e-12)


def test_local_round_reports_divergence():
    obj = quad(L=1.0)
    P = proj("identity", obj, None)
    cfg = FedConfig(local_steps=400, step_size=1e6, method="identity")
    client = ClientState(0, zeros_sub(P, obj), zeros_sub(P, obj))
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as err:
        local_round_dual(client, obj.initial_point(), P, cfg, obj, k=7)
    assert err.value.round == 7
    assert err.value.step is not None and err.value.client == 0


# ------------------------------------------------------------- dual and server


def test_dual_stays_zero_when_clients_agree():
    obj = quad()
    P, Pn = proj("rd", obj, 2, k=0), proj("rd", obj, 2, k=1)
    B = LayeredMatrix([np.ones((2, 2)), np.ones((2, 3))])
    c = dual_update(ClientState(0, zeros_sub(P, obj), B), B, B, Pn, P)
    assert norm(c.dual) == 0.0


def test_dual_shape_mismatch():
    obj = quad()
    P = proj("cd", obj, 2)
    bad = LayeredMatrix.zeros([(3, 2), (2, 3)])
    with pytest.raises(Exception):
        dual_update(ClientState(0, bad, bad), zeros_sub(P, obj), zeros_sub(P, obj), P, P)


def test_dual_after_one_round_is_scaled_gradient_gap():
    # identity projection, two clients: Lambda_i^1 = eta * sum_t (gbar_t - g_i,t)
    obj = quad(n=2, seed=3)
    eta, tau = 0.1, 4
    cfg = FedConfig(rounds=1, local_steps=tau, step_size=eta, method="identity")
    fed = Federation(cfg, obj)
    x0 = fed.x
    fed.step()
    z = [x0, x0]
    gaps = [LayeredMatrix.zeros(x0.shapes) for _ in range(2)]
    for _ in range(tau):
        g = [obj.full_gradient(i, z[i]) for i in range(2)]
        gbar = (g[0] + g[1]) * 0.5
        for i in range(2):
            gaps[i] = gaps[i] + (gbar - g[i])
        z = [z[i] - eta * g[i] for i in range(2)]
    for i in range(2):
        assert fed.clients[i].dual.allclose(gaps[i] * eta, rtol=0, atol=1e-12)


def test_server_update():
    obj = quad()
    rng = np.random.default_rng(5)
    x = rand_like(SHAPES, rng)
    P = proj("rd", obj, 2)
    s = server_update(ServerState(x, 3), zeros_sub(P, obj), P)
    assert s.global_model.array_equal(x) and s.round == 4
    B = LayeredMatrix([rng.standard_normal((2, 2)), rng.standard_normal((2, 3))])
    assert server_update(ServerState(x, 0), B, P).global_model.array_equal(add(x, project_up(P, B)))


def test_server_update_gradient_descent_reduction():
    obj = quad(n=1)
    cfg = FedConfig(rounds=1, local_steps=1, step_size=0.25, method="identity")
    fed = Federation(cfg, obj)
    x0 = fed.x
    fed.step()
    assert fed.x.array_equal(x0 - 0.25 * obj.gradient(x0))


# ------------------------------------------------------------- variance reduced


def test_vr_first_round_equals_dual_with_zero_dual():
    obj = quad()
    rng = np.random.default_rng(6)
    x = rand_like(SHAPES, rng)
    P = proj("cd", obj, 2)
    cfg = FedConfig(local_steps=3, step_size=0.1, rank=2)
    zero = zeros_sub(P, obj)
    for i in range(obj.n_clients):
        Bd = local_round_dual(ClientState(i, zero, zero), x, P, cfg, obj)
        Bv, grads = local_round_vr(i, x, P, P, DriftCorrection(zero), cfg, obj)
        assert Bd.array_equal(Bv)
        assert len(grads) == 3


def test_homogeneous_clients_match_fedavg_subspace():
    one = quad(n=1, seed=8)
    obj = Quadratic([one.A[0]] * 3, [one.b[0]] * 3)
    cfg = FedConfig(rounds=6, local_steps=3, step_size=0.2, rank=2, engine=Engine.VR)
    fed = Federation(cfg, obj)
    for _ in range(cfg.rounds):
        fed.step()
        assert max(norm(c.value) for c in fed.corrections) <= 1e-12
    xs = trajectory(cfg.with_(engine=Engine.FEDAVG_SUBSPACE), obj)
    assert fed.x.allclose(xs[-1], rtol=0, atol=1e-12)


@pytest.mark.parametrize("method,rank", [("identity", None), ("cd", [3, 2]), ("rd", [2, 2]), ("ss", [1, 1])])
def test_engines_equivalent(method, rank):
    obj = quad(n=4, seed=9)
    cfg = FedConfig(rounds=8, local_steps=3, step_size=0.1, method=method, rank=rank or 1)
    xd = trajectory(cfg, obj)
    xv = trajectory(cfg.with_(engine=Engine.VR), obj)
    for a, b in zip(xd, xv):
        assert norm(a - b) / max(1.0, norm(a)) <= 1e-10


def test_engines_equivalent_in_minibatch_mode():
    data = generate_clustered_data(n_clients=3, samples_total=120, feature_dim=5, seed=1)
    obj = LogisticRegression(data, lam=1e-2)
    cfg = FedConfig(rounds=6, local_steps=4, step_size=0.5, rank=2, batch_size=7)
    xd = trajectory(cfg, obj)
    xv = trajectory(cfg.with_(engine=Engine.VR), obj)
    assert max(norm(a - b) / max(1.0, norm(a)) for a, b in zip(xd, xv)) <= 1e-10
    # minibatch path really differs from the full-gradient path
    assert norm(trajectory(cfg.with_(batch_size=None), obj)[-1] - xd[-1]) > 1e-6


@pytest.mark.parametrize("method", ["identity", "cd", "rd"])
def test_dual_equals_transported_vr_gradient_gap(method):
    obj = quad(n=3, seed=10)
    eta, tau = 0.15, 3
    cfg = FedConfig(rounds=5, local_steps=tau, step_size=eta, method=method, rank=2)
    dual, vr = Federation(cfg, obj), Federation(cfg.with_(engine=Engine.VR), obj)
    for k in range(cfg.rounds):
        dual.step()
        vr.step()
        P, Pn = vr.schedule(k), vr.schedule(k + 1)
        gbar = sum(vr.last_grad_sums[1:], vr.last_grad_sums[0]) * (1.0 / 3)
        for i in range(3):
            want = transport(Pn, P, (gbar - vr.last_grad_sums[i]) * eta)
            assert dual.clients[i].dual.allclose(want, rtol=0, atol=1e-10)


# ------------------------------------------------------------------ baselines


def test_fedavg_subspace_with_identity_is_fedavg():
    obj = quad(seed=11)
    cfg = FedConfig(rounds=5, local_steps=3, step_size=0.1, method="identity", engine=Engine.FEDAVG_SUBSPACE)
    a = trajectory(cfg, obj)
    b = trajectory(cfg.with_(engine=Engine.FEDAVG, method="cd"), obj)
    assert all(x.array_equal(y) for x, y in zip(a, b))


def test_single_client_fedavg_is_gradient_descent():
    obj = quad(n=1, seed=12)
    tau, K, eta = 4, 5, 0.3
    xs = trajectory(FedConfig(rounds=K, local_steps=tau, step_size=eta, engine=Engine.FEDAVG), obj)
    x = obj.initial_point()
    for _ in range(tau * K):
        x = x - eta * obj.full_gradient(0, x)
    # B accumulates before it is added to x, so agreement is to rounding when tau > 1
    assert xs[-1].allclose(x, rtol=0, atol=1e-13)


def test_zeroed_dual_is_fedavg_subspace():
    obj = quad(seed=13)
    cfg = FedConfig(rounds=5, local_steps=3, step_size=0.1, rank=2)
    a = trajectory(cfg, obj, zero_dual=True)
    b = trajectory(cfg.with_(engine=Engine.FEDAVG_SUBSPACE), obj)
    assert all(x.array_equal(y) for x, y in zip(a, b))


def test_run_fedavg_rejects_other_engines():
    with pytest.raises(ValueError):
        run_fedavg(FedConfig(rounds=1), quad())


# ------------------------------------------------------------------ invariants


def test_dual_sum_is_zero():
    obj = quad(n=5, seed=14)
    for method in ["cd", "rd", "ss", "identity"]:
        fed = Federation(FedConfig(rounds=20, local_steps=3, step_size=0.1, method=method, rank=2), obj)
        for _ in range(20):
            fed.step()
            assert fed.dual_sum_inf() <= 1e-9


def test_homogeneous_duals_stay_zero():
    one = quad(n=1, seed=15)
    obj = Quadratic([one.A[0]] * 4, [one.b[0]] * 4)
    fed = Federation(FedConfig(rounds=10, local_steps=3, step_size=0.1, method="rd", rank=2), obj)
    for _ in range(10):
        fed.step()
        assert max(np.max(np.abs(a)) for c in fed.clients for a in c.dual.layers) <= 1e-12


def test_single_client_dual_is_zero():
    fed = Federation(FedConfig(rounds=5, local_steps=2, step_size=0.1, rank=2), quad(n=1))
    for _ in range(5):
        fed.step()
        assert norm(fed.clients[0].dual) == 0.0


def test_recentering_is_a_rounding_level_change():
    obj = quad(n=4, seed=16)
    cfg = FedConfig(rounds=40, local_steps=3, step_size=0.1, method="rd", rank=2)
    a = trajectory(cfg, obj)
    b = trajectory(cfg.with_(recenter_duals=True), obj)
    assert max(norm(x - y) / max(1.0, norm(x)) for x, y in zip(a[:10], b[:10])) <= 1e-12
    fed = Federation(cfg.with_(rounds=200, recenter_duals=True), obj)
    for _ in range(200):
        fed.step()
    assert fed.dual_sum_inf() <= 1e-12


def test_deterministic_records():
    obj = quad(seed=17)
    cfg = FedConfig(rounds=10, local_steps=3, step_size=0.1, method="rd", rank=2, seed=99)
    ref = solve_reference(obj)
    a = run(cfg, obj, ref=ref, timing=False)
    b = run(cfg, obj, ref=ref, timing=False)
    assert a == b
    assert [r.k for r in a] == list(range(1, 11))


def test_zero_rounds():
    obj = quad()
    assert run(FedConfig(rounds=0, rank=2), obj) == []
    assert len(trajectory(FedConfig(rounds=0, rank=2), obj)) == 1


def test_divergence_carries_partial_records():
    obj = quad(seed=18)
    cfg = FedConfig(rounds=200, local_steps=3, step_size=5.0, method="identity")
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as err:
        run(cfg, obj)
    assert 0 < len(err.value.records) < 200
    assert err.value.round == len(err.value.records)


def test_config_validation():
    with pytest.raises(ValueError):
        FedConfig(step_size=0)
    with pytest.raises(ValueError):
        FedConfig(local_steps=0)
    with pytest.raises(ValueError):
        FedConfig(engine="scaffold")
    with pytest.raises(ValueError):
        Federation(FedConfig(rank=9), quad())
    assert FedConfig(engine="fedavg").cost_engine() == "fedavg"


def test_gradient_descent_rate_matches_spectrum():
    # n=1, tau=1, P=I: the error contracts by max|1 - eta lambda| per round asymptotically
    lam = np.array([0.2, 0.5, 0.7, 1.0])
    obj = Quadratic([[np.diag(lam)]], [[np.ones((4, 1))]])
    eta = 1.0
    rate = max(abs(1 - eta * lam))
    ref = solve_reference(obj)
    recs = run(FedConfig(rounds=60, local_steps=1, step_size=eta, method="identity"), obj, ref=ref)
    observed = recs[-1].rel_error / recs[-2].rel_error
    assert observed == pytest.approx(rate, rel=0.05)


@pytest.mark.parametrize("engine,method", [(Engine.DUAL, "cd"), (Engine.DUAL, "identity"), (Engine.VR, "cd"),
                                           (Engine.FEDAVG, "identity"), (Engine.FEDAVG_SUBSPACE, "cd")])
def test_error_decreases_with_theory_step(engine, method):
    data = generate_clustered_data(n_clients=5, samples_total=1000, feature_dim=8, seed=2)
    obj = LogisticRegression(data, lam=1e-2)
    ref = solve_reference(obj)
    cfg = FedConfig(rounds=200, local_steps=5, rank=4, method=method, engine=engine, step_size=1.0)
    dims = cfg.dims(obj.shapes)
    conds = stepsize_conditions(obj.smoothness(), 5, 5, dims.theta_m(obj.shapes), dims.theta_r(obj.shapes))
    eta = min(v for _, v in conds.values())
    recs = run(cfg.with_(step_size=eta), obj, ref=ref, timing=False)
    assert recs[-1].rel_error < recs[len(recs) // 4 - 1].rel_error


def test_observer_sees_every_round():
    seen = []
    run(FedConfig(rounds=4, local_steps=1, step_size=0.1, rank=2), quad(), observer=lambda f: seen.append(f.round))
    assert seen == [1, 2, 3, 4]
