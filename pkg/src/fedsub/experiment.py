"""Experiment specs, sweeps, validators and the theory step size.

A spec is a JSON object::

    {
      "name": "fig2b",
      "objective": {"kind": "logistic", "n_clients": 30, ...},
      "federation": {"rounds": 500, "step_size": 0.2, ...},
      "sweep": {"engine": ["dual", "fedavg"], "rank": [2, 5]},
      "repetitions": 1,
      "output": "runs/fig2b"
    }

Sweep axes are FedConfig fields, plus ``variant``: a list of override objects
(each may carry a ``label``) for combinations a Cartesian product cannot
express. Cells are the product of the axes in the order written, times
``repetitions``.

Each cell runs under its own sub-seed derived from the master seed, the cell's
``seed`` value and its repetition index only. Cells that differ in engine,
method or rank therefore share projections and minibatches (common random
numbers), while seeds and repetitions are independent.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
from scipy.optimize import brentq

from .costs import tally_round
from .federation import DivergenceError, Engine, FedConfig, Federation, RoundRecord, run, trajectory
from .layered import norm
from .objectives import (Objective, ReferenceSolution, build_objective, finite_difference_gradient,
                         generate_clustered_data, solve_reference)
from .projection import ProjectionMethod, validate_assumption1

OUT_ENV = "FEDSUB_OUT"
DEFAULT_OUT = "fedsub-out"

OBJECTIVE_DEFAULTS = {
    "kind": "logistic",
    "n_clients": 30,
    "samples_total": 60_000,
    "feature_dim": 20,
    "heterogeneity_noise": 0.1,
    "data_seed": 0,
    "l2": 1e-4,
    "hidden": 16,
    "shapes": None,
    "data_dir": None,
}

FED_FIELDS = {f.name for f in fields(FedConfig)}
TOP_LEVEL = {"name", "objective", "federation", "sweep", "repetitions", "output",
             "record_wall_time", "reference"}

SUMMARY_COLUMNS = (
    "cell", "label", "engine", "method", "rank", "seed", "repetition", "sub_seed", "status",
    "rounds_completed", "final_rel_error", "best_rel_error", "final_grad_norm_sq",
    "best_grad_norm_sq", "avg_grad_norm_sq", "final_loss", "uplink_per_round",
    "downlink_per_round", "matmul_per_round", "gradcost_per_round", "memory_scalars",
    "wall_ms_total", "csv", "message",
)


class SpecError(ValueError):
    """Invalid experiment spec; ``where`` names the offending field or line."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass(frozen=True)
class Cell:
    index: int
    label: str
    config: FedConfig
    repetition: int
    base_seed: int


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    objective: dict = field(default_factory=lambda: dict(OBJECTIVE_DEFAULTS))
    federation: FedConfig = field(default_factory=FedConfig)
    sweep: dict = field(default_factory=dict)
    repetitions: int = 1
    output: str | None = None
    record_wall_time: bool = True
    reference: bool = True

    @classmethod
    def from_dict(cls, raw: Any) -> "ExperimentSpec":
        if not isinstance(raw, dict):
            raise SpecError("<root>", "spec must be a JSON object")
        unknown = set(raw) - TOP_LEVEL
        if unknown:
            raise SpecError(sorted(unknown)[0], f"unknown field; expected one of {sorted(TOP_LEVEL)}")
        obj = dict(OBJECTIVE_DEFAULTS)
        raw_obj = raw.get("objective", {})
        if not isinstance(raw_obj, dict):
            raise SpecError("objective", "must be an object")
        for key, value in raw_obj.items():
            if key not in OBJECTIVE_DEFAULTS:
                raise SpecError(f"objective.{key}", f"unknown field; expected one of {sorted(OBJECTIVE_DEFAULTS)}")
            obj[key] = value
        if obj["kind"] not in ("logistic", "mlp", "quadratic"):
            raise SpecError("objective.kind", f"must be logistic, mlp or quadratic, got {obj['kind']!r}")
        for key in ("n_clients", "samples_total", "feature_dim", "hidden"):
            if not isinstance(obj[key], int) or obj[key] < 1:
                raise SpecError(f"objective.{key}", f"must be a positive integer, got {obj[key]!r}")

        fed_raw = raw.get("federation", {})
        if not isinstance(fed_raw, dict):
            raise SpecError("federation", "must be an object")
        fed = _fed_config(fed_raw, "federation")

        sweep = raw.get("sweep", {})
        if not isinstance(sweep, dict):
            raise SpecError("sweep", "must be an object mapping axis name to a list")
        for axis, values in sweep.items():
            if axis != "variant" and axis not in FED_FIELDS:
                raise SpecError(f"sweep.{axis}", f"not a sweepable field; expected one of {sorted(FED_FIELDS | {'variant'})}")
            if not isinstance(values, list) or not values:
                raise SpecError(f"sweep.{axis}", "sweep axis must be a non-empty list")
            if axis == "variant" and not all(isinstance(v, dict) for v in values):
                raise SpecError("sweep.variant", "every variant must be an object of overrides")

        reps = raw.get("repetitions", 1)
        if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
            raise SpecError("repetitions", f"must be a positive integer, got {reps!r}")
        spec = cls(name=str(raw.get("name", "experiment")), objective=obj, federation=fed,
                   sweep=sweep, repetitions=reps, output=raw.get("output"),
                   record_wall_time=bool(raw.get("record_wall_time", True)),
                   reference=bool(raw.get("reference", True)))
        spec.cells()  # validates every cell's config, including r <= m
        return spec

    def layer_shapes(self) -> list[tuple]:
        o = self.objective
        if o["kind"] == "logistic":
            return [(o["feature_dim"], 1)]
        if o["kind"] == "mlp":
            return [(o["feature_dim"], o["hidden"]), (o["hidden"], 1)]
        return [tuple(s) for s in (o["shapes"] or [(o["feature_dim"], 1)])]

    def with_overrides(self, seed: int | None = None, engine: str | None = None) -> "ExperimentSpec":
        """Copy with the master seed and/or every cell's engine replaced."""
        fed, sweep = self.federation, dict(self.sweep)
        if seed is not None:
            fed = fed.with_(seed=int(seed))
        if engine is not None:
            fed = fed.with_(engine=Engine.parse(engine))
            sweep.pop("engine", None)
            if "variant" in sweep:
                sweep["variant"] = [{k: v for k, v in var.items() if k != "engine"} for var in sweep["variant"]]
        out = ExperimentSpec(self.name, dict(self.objective), fed, sweep, self.repetitions,
                             self.output, self.record_wall_time, self.reference)
        out.cells()
        return out

    def cells(self) -> list[Cell]:
        axes = list(self.sweep.items())
        names = [a for a, _ in axes]
        shapes = self.layer_shapes()
        out = []
        index = 0
        for combo in itertools.product(*[v for _, v in axes]):
            overrides: dict = {}
            label_parts = []
            for name, value in zip(names, combo):
                if name == "variant":
                    value = dict(value)
                    label = value.pop("label", None)
                    overrides.update(value)
                    label_parts.append(label or "-".join(f"{k}={v}" for k, v in value.items()))
                else:
                    overrides[name] = value
                    label_parts.append(f"{name}={_fmt(value)}")
            where = "sweep" if overrides else "federation"
            cfg = _fed_config({**_as_dict(self.federation), **overrides}, where)
            try:
                cfg.dims([_shape(s) for s in shapes])
            except ValueError as exc:
                raise SpecError(f"{where}.rank", str(exc)) from None
            for rep in range(self.repetitions):
                label = "_".join(label_parts) or "base"
                if self.repetitions > 1:
                    label += f"_rep{rep}"
                out.append(Cell(index, label, cfg, rep, cfg.seed))
                index += 1
        return out


def _shape(s):
    from .layered import LayerShape

    return LayerShape(*s)


def _fmt(value) -> str:
    return value.value if hasattr(value, "value") else str(value)


def _as_dict(cfg: FedConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(FedConfig)}


def _fed_config(raw: dict, where: str) -> FedConfig:
    for key in raw:
        if key not in FED_FIELDS:
            raise SpecError(f"{where}.{key}", f"unknown field; expected one of {sorted(FED_FIELDS)}")
    for key in ("rounds", "local_steps", "seed"):
        if key in raw and (not isinstance(raw[key], (int, np.integer)) or isinstance(raw[key], bool)):
            raise SpecError(f"{where}.{key}", f"must be an integer, got {raw[key]!r}")
    if "seed" in raw and not 0 <= int(raw["seed"]) < 2 ** 64:
        raise SpecError(f"{where}.seed", "must be an unsigned 64-bit integer")
    if "batch_size" in raw and raw["batch_size"] is not None and not isinstance(raw["batch_size"], int):
        raise SpecError(f"{where}.batch_size", f"must be an integer or null, got {raw['batch_size']!r}")
    try:
        return FedConfig(**raw)
    except (TypeError, ValueError) as exc:
        key = next((k for k in ("method", "engine", "step_size", "local_steps", "rounds", "batch_size")
                    if k in raw and k in str(exc)), None)
        raise SpecError(f"{where}.{key}" if key else where, str(exc)) from None


def load_spec(path) -> ExperimentSpec:
    """Parse and validate a JSON spec file; errors name a line or a field."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return ExperimentSpec.from_dict(raw)


def cell_seed(master: int, seed_value: int, repetition: int) -> int:
    """Isolated sub-seed; depends on the cell's seed value and repetition only."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(2, int(seed_value), int(repetition)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def resolve_output(spec: ExperimentSpec, out: str | None) -> Path:
    return Path(out or spec.output or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def build_spec_objective(spec: ExperimentSpec) -> Objective:
    o = spec.objective
    return build_objective(o["kind"], n_clients=o["n_clients"], samples_total=o["samples_total"],
                           feature_dim=o["feature_dim"], heterogeneity_noise=o["heterogeneity_noise"],
                           data_seed=o["data_seed"], l2=o["l2"], hidden=o["hidden"],
                           shapes=o["shapes"], data_dir=o["data_dir"])


# --------------------------------------------------------------------------- run


@dataclass
class CellResult:
    cell: Cell
    sub_seed: int
    records: list
    status: str
    message: str = ""


def _run_cell(cell: Cell, master: int, obj: Objective, ref: ReferenceSolution | None,
              timing: bool) -> CellResult:
    sub = cell_seed(master, cell.base_seed, cell.repetition)
    cfg = cell.config.with_(seed=sub)
    x0 = obj.initial_point(sub)
    try:
        records = run(cfg, obj, x0, ref, timing=timing)
        return CellResult(cell, sub, records, "ok")
    except DivergenceError as exc:
        return CellResult(cell, sub, exc.records, "diverged", str(exc))


def _summary_row(res: CellResult, csv_name: str, memory: int) -> list:
    recs = res.records
    cfg = res.cell.config

    def final(attr):
        return repr(getattr(recs[-1], attr)) if recs else "nan"

    def best(attr):
        vals = [getattr(r, attr) for r in recs if math.isfinite(getattr(r, attr))]
        return repr(min(vals)) if vals else "nan"

    avg = repr(float(np.mean([r.grad_norm_sq for r in recs]))) if recs else "nan"
    per_round = lambda attr: getattr(recs[-1], attr) if recs else 0  # noqa: E731
    return [res.cell.index, res.cell.label, cfg.engine.value, cfg.projection_method.value, _fmt_rank(cfg.rank),
            cfg.seed, res.cell.repetition, res.sub_seed, res.status, len(recs),
            final("rel_error"), best("rel_error"), final("grad_norm_sq"), best("grad_norm_sq"), avg,
            final("loss"), per_round("uplink"), per_round("downlink"), per_round("matmul"),
            per_round("gradcost"), memory, f"{sum(r.wall_ms for r in recs):.3f}", csv_name,
            res.message]


def _fmt_rank(rank) -> str:
    return str(rank) if np.ndim(rank) == 0 else "/".join(str(r) for r in rank)


def run_experiment(spec: ExperimentSpec, out_dir, threads: int = 1, timing: bool | None = None,
                   log=print) -> list[CellResult]:
    """Run every sweep cell and write per-cell CSVs plus ``summary.csv``.

    Cells run on ``threads`` workers; all files are written by the calling
    thread in cell order once the cells finish.
    """
    timing = spec.record_wall_time if timing is None else timing
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    obj = build_spec_objective(spec)
    ref = None
    if spec.reference and getattr(obj, "strongly_convex", False):
        ref = solve_reference(obj)
        log(f"reference solution: ||grad f(x*)|| = {ref.grad_norm:.2e} after {ref.iterations} Newton steps")
    cells = spec.cells()
    master = spec.federation.seed
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = list(pool.map(lambda c: _run_cell(c, master, obj, ref, timing), cells))

    rows = []
    for res in results:
        name = f"cell_{res.cell.index:03d}_{_safe(res.cell.label)}.csv"
        with open(out_dir / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RoundRecord.CSV_COLUMNS)
            for r in res.records:
                w.writerow(r.csv_row())
        cfg = res.cell.config
        memory = tally_round(cfg.cost_engine(), obj.shapes, cfg.dims(obj.shapes),
                             int(cfg.local_steps)).memory_scalars
        rows.append(_summary_row(res, name, memory))
        tail = res.records[-1] if res.records else None
        err = f"{tail.rel_error:.3e}" if tail is not None else "n/a"
        log(f"[{res.cell.index:3d}] {res.cell.label:<40s} {res.status:<8s} rounds={len(res.records)} "
            f"rel_error={err}")
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)
    return results


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "=-._" else "_" for ch in label)


# --------------------------------------------------------------------- step size


@dataclass
class StepsizeReport:
    available: bool
    configured: float
    eta_max: float | None = None
    conditions: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    @property
    def configured_ok(self) -> bool | None:
        return None if self.eta_max is None else self.configured <= self.eta_max

    def lines(self) -> list[str]:
        if not self.available:
            return [f"bound unavailable: no smoothness constant for this objective; "
                    f"using configured eta = {self.configured}"]
        c = self.constants
        out = [f"L_f = {c['L_f']:.6g}  n = {c['n']}  tau = {c['tau']}  "
               f"theta_m = {c['theta_m']:.6g}  theta_r = {c['theta_r']:.6g}"]
        for name, (text, eta) in self.conditions.items():
            out.append(f"  [{name}] {text:<66s} eta <= {eta:.6e}")
        verdict = "satisfies" if self.configured_ok else "EXCEEDS"
        out.append(f"largest eta satisfying all conditions: {self.eta_max:.6e}")
        out.append(f"configured eta = {self.configured} {verdict} the bound")
        return out


def stepsize_conditions(L: float, n: int, tau: int, theta_m: float, theta_r: float) -> dict:
    """Largest ``eta`` allowed by each explicit convergence condition.

    Returns ``{name: (formula, eta_max)}``; the admissible step sizes are the
    intersection, i.e. the minimum.
    """
    L2 = L * L
    c1 = math.sqrt(1.0 / (32.0 * tau ** 2 * theta_r ** 2 * theta_m ** 3 * L2))
    c3 = math.sqrt(1.0 / (10.0 * theta_r ** 3 * theta_m ** 3 * L2 * tau ** 2))
    a = tau * L * theta_r ** 2 * theta_m ** 2
    b = 4.0 * tau * theta_r ** 4 * theta_m ** 2 * L2 / n
    g = lambda eta: 1.0 - a * eta - b * eta ** 3  # noqa: E731  decreasing on eta > 0
    hi = 1.0
    while g(hi) > 0:
        hi *= 2.0
    c2a = brentq(g, 0.0, hi, xtol=1e-15, rtol=1e-14)
    c2b = (n / (160.0 * theta_r ** 4 * theta_m ** 4 * L2 * tau ** 3)) ** (1.0 / 3.0)
    c2c = 1.0 / (5.0 * n * tau * theta_r * theta_m ** 2 * L2)
    return {
        "1": ("4 eta^2 th_r^2 th_m^3 tau L^2 <= 1/(8 tau)", c1),
        "3": ("eta^2 <= 1/(10 th_r^3 th_m^3 L^2 tau^2)", c3),
        "2a": ("1 - eta tau L th_r^2 th_m^2 - 4 eta^3 tau th_r^4 th_m^2 L^2/n >= 0", c2a),
        "2b": ("eta^3 <= n/(160 th_r^4 th_m^4 L^2 tau^3)", c2b),
        "2c": ("eta <= 1/(5 n tau th_r th_m^2 L^2)", c2c),
    }


def theory_stepsize(spec: ExperimentSpec, obj: Objective | None = None) -> StepsizeReport:
    cfg = spec.federation
    obj = obj or build_spec_objective(spec)
    L = obj.smoothness()
    if L is None or not math.isfinite(L) or L <= 0:
        return StepsizeReport(False, cfg.step_size)
    dims = cfg.dims(obj.shapes)
    tm, tr = dims.theta_m(obj.shapes), dims.theta_r(obj.shapes)
    n, tau = obj.n_clients, int(cfg.local_steps)
    conds = stepsize_conditions(L, n, tau, tm, tr)
    eta_max = min(v for _, v in conds.values())
    return StepsizeReport(True, cfg.step_size, eta_max, conds,
                          {"L_f": L, "n": n, "tau": tau, "theta_m": tm, "theta_r": tr})


# --------------------------------------------------------------------- validate


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def _probe_objective(spec: ExperimentSpec) -> Objective:
    """A tiny instance of the spec's objective kind."""
    o = spec.objective
    kind = o["kind"]
    if kind == "quadratic":
        return build_objective("quadratic", n_clients=3, shapes=spec.layer_shapes(), data_seed=o["data_seed"])
    return build_objective(kind, n_clients=3, samples_total=90, feature_dim=o["feature_dim"],
                           heterogeneity_noise=o["heterogeneity_noise"], data_seed=o["data_seed"],
                           l2=max(o["l2"], 1e-2), hidden=min(o["hidden"], 4))


def _methods(spec: ExperimentSpec) -> list[ProjectionMethod]:
    seen = [spec.federation.method]
    for value in spec.sweep.get("method", []):
        seen.append(ProjectionMethod.parse(value))
    for var in spec.sweep.get("variant", []):
        if "method" in var:
            seen.append(ProjectionMethod.parse(var["method"]))
    return list(dict.fromkeys(seen))


def validate(spec: ExperimentSpec, corrupt_cd_scaling: bool = False, n_samples: int = 20_000) -> list[Check]:
    """Run the validator suite on the spec's shapes and a tiny problem."""
    checks: list[Check] = []
    shapes = [_shape(s) for s in spec.layer_shapes()]
    methods = _methods(spec)
    # Assumption 1 on every (method, layer) the spec uses
    for cell in spec.cells():
        dims = cell.config.dims(shapes)
        for l, (s, r) in enumerate(zip(shapes, dims.ranks)):
            method = cell.config.projection_method
            name = f"assumption1[{method.value},layer{l},m={s.rows},r={r}]"
            if any(c.name == name for c in checks):
                continue
            rep = validate_assumption1(method, s, r, n_samples, seed=l,
                                       corrupt_scaling=corrupt_cd_scaling and method is ProjectionMethod.CD)
            checks.append(Check(name, rep.passed, max(rep.max_gram_deviation, rep.mean_outer_deviation),
                                rep.tol_mc, f"gram_dev={rep.max_gram_deviation:.2e} "
                                f"mean_dev={rep.mean_outer_deviation:.2e} tol_exact={rep.tol_exact:.0e}"))

    obj = _probe_objective(spec)
    rng = np.random.default_rng(spec.objective["data_seed"])
    worst = 0.0
    for _ in range(3):
        x = obj.initial_point(int(rng.integers(2 ** 31)))
        x = x + 0.5 * type(x)([rng.standard_normal(a.shape) for a in x.layers])
        for i in range(obj.n_clients):
            g = obj.full_gradient(i, x)
            fd = finite_difference_gradient(lambda z: obj.client_loss(i, z), x)
            worst = max(worst, norm(g - fd) / max(norm(fd), 1e-12))
    checks.append(Check(f"gradient_fd[{obj.kind}]", worst <= 1e-6, worst, 1e-6))

    small = dict(rounds=5, local_steps=3, step_size=0.05, rank=1, seed=spec.federation.seed,
                 batch_size=None, recenter_duals=False)
    for method in methods:
        cfg = FedConfig(method=method, engine=Engine.DUAL, **small)
        rank_ok = True
        try:
            cfg.dims(obj.shapes)
        except ValueError:
            rank_ok = False
        if not rank_ok:
            continue
        worst_sum = 0.0
        fed = Federation(cfg, obj)
        for _ in range(cfg.rounds):
            fed.step()
            worst_sum = max(worst_sum, fed.dual_sum_inf())
        checks.append(Check(f"dual_sum[{method.value}]", worst_sum <= 1e-9, worst_sum, 1e-9))
        xd = trajectory(cfg, obj)
        xv = trajectory(cfg.with_(engine=Engine.VR), obj)
        gap = max(norm(a - b) / max(1.0, norm(a)) for a, b in zip(xd, xv))
        checks.append(Check(f"engine_equivalence[{method.value}]", gap <= 1e-10, gap, 1e-10))

    cfg = FedConfig(method=spec.federation.method, engine=Engine.DUAL, **small)
    fed = Federation(cfg, obj)
    fed.step()
    want = tally_round(cfg.cost_engine(), obj.shapes, fed.schedule.dims, cfg.local_steps)
    got = fed.counter.per_client()
    ok = (got.uplink_scalars, got.matmul_flops, got.gradient_cost_units) == \
        (want.uplink_scalars, want.matmul_flops, want.gradient_cost_units)
    checks.append(Check("cost_counters", ok, float(got.uplink_scalars), float(want.uplink_scalars),
                        f"matmul {got.matmul_flops} vs {want.matmul_flops}"))
    return checks


def write_checks(checks: list[Check], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "status", "value", "tolerance", "detail"])
        for c in checks:
            w.writerow([c.name, "pass" if c.passed else "FAIL", repr(c.value), repr(c.tolerance), c.detail])


def export_data(spec: ExperimentSpec, out_dir) -> list[Path]:
    o = spec.objective
    if o["kind"] == "quadratic":
        raise SpecError("objective.kind", "quadratic objectives have no dataset to export")
    data = generate_clustered_data(o["n_clients"], o["samples_total"], o["feature_dim"],
                                   o["heterogeneity_noise"], o["data_seed"])
    return data.export_csv(out_dir)
