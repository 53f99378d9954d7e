"""Per-round communication, computation and memory accounting.

All figures are per client per round. Gradient cost and memory use the affine
models ``C_g(s) = alpha_c * s`` and ``M_g(s) = alpha_m * s``; these are model
parameters, not measurements. Matrix products are counted at ``m r d`` each;
products with an identity projection are skipped and cost nothing.

Analytic model per engine (sums over layers):

================  ========  ===========================  ==================  ===========================
engine            uplink    matmul                       gradient            memory
================  ========  ===========================  ==================  ===========================
fedsub            r d       tau m r d + 2 m r d          tau C_g(r d)        3 r d + M_g(r d) + 2 r m + m d
fedsub_identity   m d       0                            tau C_g(m d)        3 m d + M_g(m d)
fedavg            m d       0                            tau C_g(m d)        m d + M_g(m d)
fedavg_subspace   r d       tau m r d                    tau C_g(r d)        r d + M_g(r d) + r m + m d
vr                r d       tau m r d + 2 m r d          tau C_g(r d)        4 r d + M_g(r d) + 2 r m + m d
vr_identity       m d       0                            tau C_g(m d)        4 m d + M_g(m d)
================  ========  ===========================  ==================  ===========================

``vr`` uploads ``sum_t g_i,t`` instead of ``B_i``; it additionally holds the
correction and the running gradient sum.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

from .layered import LayeredMatrix

ALPHA_C = 2
ALPHA_M = 3

COST_ENGINES = ("fedsub", "fedsub_identity", "fedavg", "fedavg_subspace", "vr", "vr_identity")


@dataclass
class CostModel:
    uplink_scalars: int = 0
    matmul_flops: int = 0
    gradient_cost_units: int = 0
    memory_scalars: int = 0
    downlink_scalars: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


def measure_uplink(payload: LayeredMatrix) -> int:
    """Exact scalar count of a client-to-server message."""
    return sum(a.size for a in payload.layers)


def _sizes(shapes, dims):
    ms = [s[0] if isinstance(s, tuple) else s.rows for s in shapes]
    ds = [s[1] if isinstance(s, tuple) else s.cols for s in shapes]
    rs = list(dims.ranks if hasattr(dims, "ranks") else dims)
    return ms, rs, ds


def tally_round(engine: str, shapes: Sequence, dims, tau: int,
                alpha_c: int = ALPHA_C, alpha_m: int = ALPHA_M) -> CostModel:
    """Analytic per-client cost of one round for ``engine`` (see module table)."""
    ms, rs, ds = _sizes(shapes, dims)
    md = sum(m * d for m, d in zip(ms, ds))
    rd = sum(r * d for r, d in zip(rs, ds))
    mrd = sum(m * r * d for m, r, d in zip(ms, rs, ds))
    rm = sum(r * m for r, m in zip(rs, ms))
    if engine == "fedsub":
        return CostModel(rd, tau * mrd + 2 * mrd, tau * alpha_c * rd,
                         3 * rd + alpha_m * rd + 2 * rm + md, rd + md)
    if engine == "fedsub_identity":
        return CostModel(md, 0, tau * alpha_c * md, 3 * md + alpha_m * md, md + md)
    if engine == "fedavg":
        return CostModel(md, 0, tau * alpha_c * md, md + alpha_m * md, md)
    if engine == "fedavg_subspace":
        return CostModel(rd, tau * mrd, tau * alpha_c * rd, rd + alpha_m * rd + rm + md, md)
    if engine == "vr":
        return CostModel(rd, tau * mrd + 2 * mrd, tau * alpha_c * rd,
                         4 * rd + alpha_m * rd + 2 * rm + md, rd + md)
    if engine == "vr_identity":
        return CostModel(md, 0, tau * alpha_c * md, 4 * md + alpha_m * md, md + md)
    raise ValueError(f"unknown engine {engine!r}; expected one of {COST_ENGINES}")


class CostCounter:
    """Live counters, one slot per client, merged by integer addition at the barrier."""

    def __init__(self, n_clients: int, alpha_c: int = ALPHA_C):
        self.n_clients = n_clients
        self.alpha_c = alpha_c
        self.reset()

    def reset(self):
        self.uplink = [0] * self.n_clients
        self.downlink = [0] * self.n_clients
        self.matmul = [0] * self.n_clients
        self.gradcost = [0] * self.n_clients

    def send(self, client: int, payload: LayeredMatrix) -> None:
        self.uplink[client] += measure_uplink(payload)

    def receive(self, client: int, payload: LayeredMatrix) -> None:
        self.downlink[client] += measure_uplink(payload)

    def add_matmul(self, client: int, flops: int) -> None:
        self.matmul[client] += flops

    def add_gradient(self, client: int, grad_size: int) -> None:
        self.gradcost[client] += self.alpha_c * grad_size

    def per_client(self) -> CostModel:
        """Per-client figures; every client does identical work, so this is total / n."""
        n = self.n_clients
        return CostModel(sum(self.uplink) // n, sum(self.matmul) // n,
                         sum(self.gradcost) // n, 0, sum(self.downlink) // n)
