"""Federated engines.

``dual``
    the subspace algorithm with low-dimensional dual variables. Each round,
    client ``i`` runs ``tau`` steps of::

        B <- B - eta * ((r/m) P^T grad f_i(x + P B) + Lambda_i / (eta tau))

    from ``B = 0`` and uploads ``B``. The server averages and broadcasts
    ``B_avg``; every client moves its dual into the next round's subspace,
    ``Lambda_i <- P_next^T P (Lambda_i + B_i - B_avg)``, and the server sets
    ``x <- x + P B_avg``. With ``method="identity"`` this is the full-space
    primal-dual method.
``vr``
    the same iteration with the dual eliminated. Each client corrects its
    local steps with ``c_i = P^T P_prev (1/tau) sum_t (gbar_t - g_i,t)`` taken
    from the previous round, and the server moves ``x <- x - eta P sum_t gbar_t``.
    Clients upload ``sum_t g_i,t``. Mathematically equivalent to ``dual``, so
    each engine is an oracle for the other.
``fedavg`` / ``fedavg_subspace``
    ``dual`` with every dual variable held at zero, in the full space and in
    the projected subspace respectively.

``recenter_duals`` subtracts the client mean from the transported duals each
round. In exact arithmetic the mean is already zero, so this changes nothing;
in floating point it stops rounding error in ``sum_i Lambda_i`` from being
amplified by the transport, which for ``rd``/``ss`` grows it geometrically.

Projections are regenerated every round from ``round_seed(seed, k)`` and
shared by all clients; minibatch draws come from per ``(round, client, step)``
streams, so engines with equal seeds see identical randomness.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .costs import CostCounter, CostModel, tally_round
from .layered import LayeredMatrix, average, norm, norm_sq, scale_layerwise, sum_layered
from .objectives import Objective, ReferenceSolution
from .projection import (ProjectionMethod, ProjectionSet, SubspaceDims, generate,
                         project_down, project_up, round_seed, transport)


class Engine(str, Enum):
    DUAL = "dual"
    VR = "vr"
    FEDAVG = "fedavg"
    FEDAVG_SUBSPACE = "fedavg_subspace"

    @classmethod
    def parse(cls, value) -> "Engine":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"fedsub": cls.DUAL, "dualvariable": cls.DUAL, "variancereduction": cls.VR,
                   "fedavg_cd": cls.FEDAVG_SUBSPACE, "fedavgsubspace": cls.FEDAVG_SUBSPACE}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown engine {value!r}") from None


class DivergenceError(FloatingPointError):
    """A non-finite iterate appeared. ``records`` holds the rounds completed before it."""

    def __init__(self, message, round=None, step=None, client=None):
        super().__init__(message)
        self.round = round
        self.step = step
        self.client = client
        self.records: list = []


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 500
    local_steps: int = 5
    step_size: float = 0.2
    method: ProjectionMethod = ProjectionMethod.CD
    rank: object = 10
    batch_size: int | None = None
    seed: int = 0
    engine: Engine = Engine.DUAL
    recenter_duals: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", ProjectionMethod.parse(self.method))
        object.__setattr__(self, "engine", Engine.parse(self.engine))
        object.__setattr__(self, "step_size", float(self.step_size))
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if int(self.local_steps) < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps}")
        if int(self.rounds) < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def projection_method(self) -> ProjectionMethod:
        return ProjectionMethod.IDENTITY if self.engine is Engine.FEDAVG else self.method

    def dims(self, shapes) -> SubspaceDims:
        if self.projection_method is ProjectionMethod.IDENTITY:
            return SubspaceDims.full(shapes)
        return SubspaceDims.resolve(self.rank, shapes)

    def cost_engine(self) -> str:
        identity = self.projection_method is ProjectionMethod.IDENTITY
        return {
            Engine.DUAL: "fedsub_identity" if identity else "fedsub",
            Engine.VR: "vr_identity" if identity else "vr",
            Engine.FEDAVG: "fedavg",
            Engine.FEDAVG_SUBSPACE: "fedavg" if identity else "fedavg_subspace",
        }[self.engine]

    def with_(self, **kw) -> "FedConfig":
        return replace(self, **kw)


@dataclass
class ClientState:
    client_id: int
    dual: LayeredMatrix
    subspace_iterate: LayeredMatrix


@dataclass
class ServerState:
    global_model: LayeredMatrix
    round: int = 0


@dataclass(frozen=True)
class DriftCorrection:
    """``(1/tau) sum_t (gbar_t - g_i,t)`` from the last round, in that round's subspace."""

    value: LayeredMatrix


@dataclass
class RoundRecord:
    k: int
    rel_error: float
    grad_norm_sq: float
    uplink: int
    matmul: int
    gradcost: int
    wall_ms: float
    loss: float = float("nan")
    downlink: int = 0
    memory: int = 0

    CSV_COLUMNS = ("k", "rel_error", "grad_norm_sq", "uplink", "matmul", "gradcost", "wall_ms")

    def csv_row(self) -> list:
        return [self.k, repr(self.rel_error), repr(self.grad_norm_sq), self.uplink,
                self.matmul, self.gradcost, f"{self.wall_ms:.3f}"]


class ProjectionSchedule:
    """Lazily generated ``P^k``; deterministic in ``(cfg.seed, k)``."""

    def __init__(self, cfg: FedConfig, shapes, corrupt_scaling: bool = False):
        self.method = cfg.projection_method
        self.shapes = shapes
        self.dims = cfg.dims(shapes)
        self.seed = cfg.seed
        self.corrupt_scaling = corrupt_scaling
        self._cache: dict[int, ProjectionSet] = {}

    def __call__(self, k: int) -> ProjectionSet:
        P = self._cache.get(k)
        if P is None:
            P = generate(self.method, self.shapes, self.dims, round_seed(self.seed, k),
                         corrupt_scaling=self.corrupt_scaling)
            self._cache = {j: v for j, v in self._cache.items() if j >= k - 1}
            self._cache[k] = P
        return P


def batch_rng(seed: int, k: int, client: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(1, k, client, t)))


def _local_gradient(obj: Objective, cfg: FedConfig, client: int, z: LayeredMatrix,
                    k: int, t: int) -> LayeredMatrix:
    if cfg.batch_size is None:
        return obj.full_gradient(client, z)
    return obj.minibatch_gradient(client, z, cfg.batch_size, batch_rng(cfg.seed, k, client, t))


def _subspace_gradient(obj, cfg, client, x, P, B, k, t, counter):
    """``(r/m) P^T grad f_i(x + P B)`` with cost attribution."""
    z = x + project_up(P, B)
    g = scale_layerwise(P.r_over_m(), project_down(P, _local_gradient(obj, cfg, client, z, k, t)))
    if counter is not None:
        counter.add_matmul(client, P.product_flops([s[1] for s in B.shapes]))
        counter.add_gradient(client, B.size)
    return g


def _check_finite(B: LayeredMatrix, k: int, t: int, client: int) -> None:
    if not B.is_finite():
        raise DivergenceError(f"non-finite iterate at round {k}, local step {t}, client {client}",
                              round=k, step=t, client=client)


def _zero_subspace(P: ProjectionSet, shapes) -> LayeredMatrix:
    return LayeredMatrix.zeros([(r, s.cols) for r, s in zip(P.ranks, shapes)])


def local_round_dual(client: ClientState, x: LayeredMatrix, P: ProjectionSet, cfg: FedConfig,
                     obj: Objective, k: int = 0, counter: CostCounter | None = None) -> LayeredMatrix:
    """Run the ``tau`` local subspace steps of one client; returns ``B_i^{k,tau}``."""
    eta, tau = cfg.step_size, int(cfg.local_steps)
    B = _zero_subspace(P, obj.shapes)
    corr = client.dual * (1.0 / (eta * tau))
    for t in range(tau):
        g = _subspace_gradient(obj, cfg, client.client_id, x, P, B, k, t, counter)
        B = B - eta * (g + corr)
        _check_finite(B, k, t, client.client_id)
    client.subspace_iterate = B
    return B


def dual_update(client: ClientState, B_i: LayeredMatrix, B_avg: LayeredMatrix,
                P_next: ProjectionSet, P_cur: ProjectionSet,
                counter: CostCounter | None = None) -> ClientState:
    """``Lambda <- P_next^T P_cur (Lambda + B_i - B_avg)``; returns a new state."""
    dual = transport(P_next, P_cur, client.dual + B_i - B_avg)
    if counter is not None:
        cols = [s[1] for s in B_i.shapes]
        counter.add_matmul(client.client_id, P_cur.product_flops(cols) + P_next.product_flops(cols))
    return ClientState(client.client_id, dual, client.subspace_iterate)


def server_update(server: ServerState, B_avg: LayeredMatrix, P: ProjectionSet) -> ServerState:
    return ServerState(server.global_model + project_up(P, B_avg), server.round + 1)


def local_round_vr(client_id: int, x: LayeredMatrix, P_cur: ProjectionSet, P_prev: ProjectionSet,
                   stored_corr: DriftCorrection, cfg: FedConfig, obj: Objective, k: int = 0,
                   counter: CostCounter | None = None):
    """Local steps of the variance-reduced form.

    Returns ``(B_i^{k,tau}, [g_i(B_i^{k,t}) for t < tau])``.
    """
    eta, tau = cfg.step_size, int(cfg.local_steps)
    c = transport(P_cur, P_prev, stored_corr.value)
    if counter is not None:
        cols = [s[1] for s in c.shapes]
        counter.add_matmul(client_id, P_prev.product_flops(cols) + P_cur.product_flops(cols))
    B = _zero_subspace(P_cur, obj.shapes)
    grads = []
    for t in range(tau):
        g = _subspace_gradient(obj, cfg, client_id, x, P_cur, B, k, t, counter)
        grads.append(g)
        B = B - eta * (g + c)
        _check_finite(B, k, t, client_id)
    return B, grads


class Federation:
    """Round-by-round state of one federated run.

    ``step()`` executes one communication round of the configured engine.
    Engine state is exposed for inspection: ``server``, ``clients`` (dual
    engines), ``corrections`` and ``last_grad_sums`` (``vr``).
    """

    def __init__(self, cfg: FedConfig, obj: Objective, x0: LayeredMatrix | None = None,
                 corrupt_scaling: bool = False, zero_dual: bool = False):
        self.cfg = cfg
        self.obj = obj
        self.n = obj.n_clients
        self.schedule = ProjectionSchedule(cfg, obj.shapes, corrupt_scaling)
        x0 = obj.initial_point(cfg.seed) if x0 is None else x0
        if x0.shapes != tuple(s.as_tuple() for s in obj.shapes):
            raise ValueError(f"x0 shapes {x0.shapes} do not match the objective")
        self.server = ServerState(x0, 0)
        self.zero_dual = zero_dual or cfg.engine in (Engine.FEDAVG, Engine.FEDAVG_SUBSPACE)
        P0 = self.schedule(0)
        zero = _zero_subspace(P0, obj.shapes)
        self.clients = [ClientState(i, zero, zero) for i in range(self.n)]
        self.corrections = [DriftCorrection(zero) for _ in range(self.n)]
        self.last_grad_sums: list[LayeredMatrix] | None = None
        self.counter = CostCounter(self.n)

    @property
    def x(self) -> LayeredMatrix:
        return self.server.global_model

    @property
    def round(self) -> int:
        return self.server.round

    def step(self) -> None:
        if self.cfg.engine is Engine.VR:
            self._step_vr()
        else:
            self._step_dual()

    def _step_dual(self):
        k, x, cfg, counter = self.round, self.x, self.cfg, self.counter
        P = self.schedule(k)
        Bs = [local_round_dual(c, x, P, cfg, self.obj, k, counter) for c in self.clients]
        for i, B in enumerate(Bs):
            counter.send(i, B)
        B_avg = average(Bs)
        if not self.zero_dual:
            P_next = self.schedule(k + 1)
            for i in range(self.n):
                counter.receive(i, B_avg)
                self.clients[i] = dual_update(self.clients[i], Bs[i], B_avg, P_next, P, counter)
            if cfg.recenter_duals:
                mean = average([c.dual for c in self.clients])
                for c in self.clients:
                    c.dual = c.dual - mean
        self.server = server_update(self.server, B_avg, P)
        for i in range(self.n):
            counter.receive(i, self.x)

    def _step_vr(self):
        k, x, cfg, counter = self.round, self.x, self.cfg, self.counter
        P = self.schedule(k)
        P_prev = self.schedule(k - 1) if k > 0 else P
        sums = []
        for i in range(self.n):
            _, grads = local_round_vr(i, x, P, P_prev, self.corrections[i], cfg, self.obj, k, counter)
            s = sum_layered(grads)
            counter.send(i, s)
            sums.append(s)
        gbar_sum = average(sums)
        inv_tau = 1.0 / cfg.local_steps
        self.corrections = [DriftCorrection((gbar_sum - s) * inv_tau) for s in sums]
        self.last_grad_sums = sums
        for i in range(self.n):
            counter.receive(i, gbar_sum)
        x_next = x - cfg.step_size * project_up(P, gbar_sum)
        self.server = ServerState(x_next, k + 1)
        for i in range(self.n):
            counter.receive(i, self.x)

    def dual_sum_inf(self) -> float:
        """``||sum_i Lambda_i||_inf`` (zero by construction for the dual engine)."""
        total = sum_layered([c.dual for c in self.clients])
        return max(float(np.max(np.abs(a))) for a in total.layers)


def run(cfg: FedConfig, obj: Objective, x0: LayeredMatrix | None = None,
        ref: ReferenceSolution | None = None, timing: bool = True,
        observer: Callable[[Federation], None] | None = None, **engine_kw) -> list[RoundRecord]:
    """Run ``cfg.rounds`` rounds; one :class:`RoundRecord` per round, for ``x^1 .. x^K``.

    On divergence the raised :class:`DivergenceError` carries the records of
    the completed rounds.
    """
    fed = Federation(cfg, obj, x0, **engine_kw)
    x_star_norm = norm(ref.x_star) if ref is not None else None
    memory = tally_round(cfg.cost_engine(), obj.shapes, fed.schedule.dims, int(cfg.local_steps)).memory_scalars
    records: list[RoundRecord] = []
    for _ in range(int(cfg.rounds)):
        fed.counter.reset()
        t0 = time.perf_counter()
        try:
            fed.step()
        except DivergenceError as exc:
            exc.records = records
            raise
        wall = (time.perf_counter() - t0) * 1e3 if timing else 0.0
        x = fed.x
        if not x.is_finite():
            exc = DivergenceError(f"non-finite global model after round {fed.round - 1}", round=fed.round - 1)
            exc.records = records
            raise exc
        rel = norm(x - ref.x_star) / x_star_norm if ref is not None else float("nan")
        with np.errstate(over="ignore", invalid="ignore"):
            gsq, loss = norm_sq(obj.gradient(x)), obj.loss(x)
        if not (np.isfinite(gsq) and np.isfinite(loss)):
            exc = DivergenceError(f"metrics overflowed after round {fed.round - 1}", round=fed.round - 1)
            exc.records = records
            raise exc
        cost = fed.counter.per_client()
        records.append(RoundRecord(
            k=fed.round, rel_error=rel, grad_norm_sq=gsq,
            uplink=cost.uplink_scalars, matmul=cost.matmul_flops, gradcost=cost.gradient_cost_units,
            wall_ms=wall, loss=loss, downlink=cost.downlink_scalars, memory=memory))
        if observer is not None:
            observer(fed)
    return records


def run_fedavg(cfg: FedConfig, obj: Objective, x0: LayeredMatrix | None = None,
               ref: ReferenceSolution | None = None, **kw) -> list[RoundRecord]:
    """Baselines: FedAvg (``engine=fedavg``) or FedAvg in the subspace (``fedavg_subspace``)."""
    if cfg.engine not in (Engine.FEDAVG, Engine.FEDAVG_SUBSPACE):
        raise ValueError(f"run_fedavg needs a FedAvg engine, got {cfg.engine.value}")
    return run(cfg, obj, x0, ref, **kw)


def trajectory(cfg: FedConfig, obj: Objective, x0: LayeredMatrix | None = None,
               **engine_kw) -> list[LayeredMatrix]:
    """Global models ``x^0 .. x^K`` without metric evaluation (for cross-checks)."""
    fed = Federation(cfg, obj, x0, **engine_kw)
    xs = [fed.x]
    for _ in range(int(cfg.rounds)):
        fed.step()
        xs.append(fed.x)
    return xs
