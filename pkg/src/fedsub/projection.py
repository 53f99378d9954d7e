"""Random subspace projections ``P = {P_l}`` with ``P_l`` of shape ``m_l x r_l``.

Every construction satisfies ``P_l^T P_l = (m_l / r_l) I`` exactly (to
rounding) and ``E[P_l P_l^T] = I``:

* ``cd``: ``r_l`` distinct coordinates drawn without replacement, columns
  ``sqrt(m_l/r_l) e_j``.
* ``rd``: ``sqrt(m_l/r_l) Q`` with ``Q`` the sign-fixed QR factor of an
  ``m_l x r_l`` standard Gaussian draw (Haar-distributed orthonormal columns).
* ``ss``: ``r_l`` points uniform on the unit sphere, orthonormalized, scaled by
  ``sqrt(m_l/r_l)``. For ``r_l = 1`` this is ``sqrt(m_l) u``; for ``r_l > 1``
  it has the same distribution as ``rd``.
* ``identity``: ``P_l = I``. Never materialized; products with it are no-ops
  and cost no flops.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .layered import LayeredMatrix, LayerScalars, LayerShape, ShapeMismatchError

MAX_RESAMPLES = 8
_MC_CHUNK = 4096
_DEGENERACY_TOL = 1e-8


class ProjectionMethod(str, Enum):
    CD = "cd"
    RD = "rd"
    SS = "ss"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value) -> "ProjectionMethod":
        if isinstance(value, cls):
            return value
        aliases = {
            "coordinate": cls.CD, "coordinatedescent": cls.CD,
            "random": cls.RD, "randomorthonormal": cls.RD,
            "sphere": cls.SS, "sphericalsmoothing": cls.SS,
            "i": cls.IDENTITY, "eye": cls.IDENTITY,
        }
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        try:
            return cls(key)
        except ValueError:
            if key in aliases:
                return aliases[key]
            raise ValueError(f"unknown projection method {value!r}") from None


class DegenerateProjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SubspaceDims:
    ranks: tuple

    def __post_init__(self):
        ranks = tuple(int(r) for r in self.ranks)
        if any(r < 1 for r in ranks):
            raise ValueError(f"subspace ranks must be >= 1, got {ranks}")
        object.__setattr__(self, "ranks", ranks)

    @classmethod
    def resolve(cls, rank, shapes: Sequence[LayerShape]) -> "SubspaceDims":
        """Accept a single int (applied to every layer, capped at nothing) or a list."""
        if isinstance(rank, SubspaceDims):
            dims = rank
        elif np.ndim(rank) == 0:
            dims = cls(tuple(int(rank) for _ in shapes))
        else:
            dims = cls(tuple(rank))
        dims.check(shapes)
        return dims

    @classmethod
    def full(cls, shapes: Sequence[LayerShape]) -> "SubspaceDims":
        return cls(tuple(s.rows for s in shapes))

    def check(self, shapes: Sequence[LayerShape]) -> None:
        if len(self.ranks) != len(shapes):
            raise ValueError(f"need {len(shapes)} subspace ranks, got {len(self.ranks)}")
        for l, (r, s) in enumerate(zip(self.ranks, shapes)):
            if r > s.rows:
                raise ValueError(f"layer {l}: subspace rank r={r} exceeds m={s.rows}")

    def theta_m(self, shapes) -> float:
        return max(s.rows / r for r, s in zip(self.ranks, shapes))

    def theta_r(self, shapes) -> float:
        return max(r / s.rows for r, s in zip(self.ranks, shapes))


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """One round's projections, shared by every client.

    ``matrices[l]`` is ``None`` for an identity layer.
    """

    matrices: tuple
    method: ProjectionMethod
    round_seed: int
    rows: tuple = field(default=())
    ranks: tuple = field(default=())

    @property
    def is_identity(self) -> bool:
        return all(P is None for P in self.matrices)

    def m_over_r(self) -> LayerScalars:
        return LayerScalars(tuple(m / r for m, r in zip(self.rows, self.ranks)))

    def r_over_m(self) -> LayerScalars:
        return LayerScalars(tuple(r / m for m, r in zip(self.rows, self.ranks)))

    def dense(self, l: int) -> np.ndarray:
        P = self.matrices[l]
        return np.eye(self.rows[l]) if P is None else P

    def product_flops(self, cols: Sequence[int]) -> int:
        """Modelled cost ``sum_l m_l r_l d_l`` of one ``P B`` or ``P^T g`` product."""
        return sum(
            m * r * d
            for P, m, r, d in zip(self.matrices, self.rows, self.ranks, cols)
            if P is not None
        )

    def stored_scalars(self) -> int:
        return sum(m * r for P, m, r in zip(self.matrices, self.rows, self.ranks) if P is not None)


def round_seed(master_seed: int, k: int) -> int:
    """64-bit seed for round ``k``, split from ``master_seed`` by counter."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(0, int(k)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _layer_rng(seed: int, layer: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(layer, attempt)))


def _orthonormal_columns(G: np.ndarray) -> np.ndarray:
    """Sign-fixed Q factor of each ``m x r`` matrix in a ``(count, m, r)`` stack."""
    Q, R = np.linalg.qr(G)
    d = np.diagonal(R, axis1=-2, axis2=-1)
    ad = np.abs(d)
    if np.any(ad.min(axis=-1) < _DEGENERACY_TOL * np.maximum(1.0, ad.max(axis=-1))):
        raise DegenerateProjectionError("near rank-deficient draw")
    # sign fix makes Q Haar-distributed
    return Q * np.sign(d)[..., None, :]


def _draw_batch(method: ProjectionMethod, m: int, r: int, rng: np.random.Generator, count: int,
                corrupt_scaling: bool) -> np.ndarray:
    """``count`` independent draws of one layer's projection, shape ``(count, m, r)``."""
    scale = 1.0 if corrupt_scaling else np.sqrt(m / r)
    if method is ProjectionMethod.CD:
        # the r smallest of m uniform keys form a uniform r-subset
        idx = np.sort(np.argsort(rng.random((count, m)), axis=1)[:, :r], axis=1)
        P = np.zeros((count, m, r))
        P[np.arange(count)[:, None], idx, np.arange(r)[None, :]] = scale
        return P
    if method is ProjectionMethod.RD:
        return scale * _orthonormal_columns(rng.standard_normal((count, m, r)))
    if method is ProjectionMethod.SS:
        U = rng.standard_normal((count, m, r))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        if r == 1:
            return scale * U
        return scale * _orthonormal_columns(U)
    raise ValueError(method)


def _draw_layer(method: ProjectionMethod, m: int, r: int, rng: np.random.Generator,
                corrupt_scaling: bool) -> np.ndarray:
    return np.ascontiguousarray(_draw_batch(method, m, r, rng, 1, corrupt_scaling)[0])


def generate(method, shapes: Sequence[LayerShape], dims: SubspaceDims, round_seed: int,
             *, corrupt_scaling: bool = False) -> ProjectionSet:
    """Draw the projection set for one round.

    Deterministic in ``(method, shapes, dims, round_seed)``. A near-singular
    Gaussian draw is redrawn with the next sub-seed, at most ``MAX_RESAMPLES``
    times. ``corrupt_scaling`` drops the ``sqrt(m/r)`` factor; it exists only
    as a negative control for the validators.
    """
    method = ProjectionMethod.parse(method)
    shapes = [s if isinstance(s, LayerShape) else LayerShape(*s) for s in shapes]
    dims.check(shapes)
    rows = tuple(s.rows for s in shapes)
    if method is ProjectionMethod.IDENTITY:
        if dims.ranks != rows:
            raise ValueError(f"identity projection needs r == m, got r={dims.ranks}, m={rows}")
        return ProjectionSet((None,) * len(rows), method, int(round_seed), rows, dims.ranks)

    mats = []
    for l, (m, r) in enumerate(zip(rows, dims.ranks)):
        for attempt in range(MAX_RESAMPLES + 1):
            try:
                P = _draw_layer(method, m, r, _layer_rng(round_seed, l, attempt), corrupt_scaling)
                break
            except DegenerateProjectionError:
                continue
        else:
            raise DegenerateProjectionError(
                f"layer {l}: {MAX_RESAMPLES} resamples all rank-deficient")
        P.flags.writeable = False
        mats.append(P)
    return ProjectionSet(tuple(mats), method, int(round_seed), rows, dims.ranks)


def _check_rows(P: ProjectionSet, x: LayeredMatrix, want) -> None:
    if len(x.layers) != len(P.matrices):
        raise ShapeMismatchError(len(P.matrices), len(P.matrices), len(x.layers))
    for l, a in enumerate(x.layers):
        if a.shape[0] != want[l]:
            raise ShapeMismatchError(l, (want[l], a.shape[1]), a.shape)


def project_down(P: ProjectionSet, g: LayeredMatrix) -> LayeredMatrix:
    """``{P_l^T g_l}``: ``m_l x d_l`` -> ``r_l x d_l``."""
    _check_rows(P, g, P.rows)
    return LayeredMatrix._wrap(
        [a.copy() if M is None else M.T @ a for M, a in zip(P.matrices, g.layers)])


def project_up(P: ProjectionSet, B: LayeredMatrix) -> LayeredMatrix:
    """``{P_l B_l}``: ``r_l x d_l`` -> ``m_l x d_l``."""
    _check_rows(P, B, P.ranks)
    return LayeredMatrix._wrap(
        [a.copy() if M is None else M @ a for M, a in zip(P.matrices, B.layers)])


def transport(P_next: ProjectionSet, P_prev: ProjectionSet, V: LayeredMatrix) -> LayeredMatrix:
    """``{P_next,l^T (P_prev,l V_l)}`` as two successive products."""
    if P_next.rows != P_prev.rows:
        raise ValueError(f"row dims differ: {P_next.rows} vs {P_prev.rows}")
    _check_rows(P_prev, V, P_prev.ranks)
    out = []
    for Pn, Pp, a in zip(P_next.matrices, P_prev.matrices, V.layers):
        up = a if Pp is None else Pp @ a
        out.append(up.copy() if Pn is None else Pn.T @ up)
    return LayeredMatrix._wrap(out)


@dataclass
class Assumption1Report:
    method: str
    m: int
    r: int
    n_samples: int
    max_gram_deviation: float
    mean_outer_deviation: float
    tol_exact: float
    tol_mc: float

    @property
    def exact_ok(self) -> bool:
        return self.max_gram_deviation <= self.tol_exact

    @property
    def mc_ok(self) -> bool:
        return self.mean_outer_deviation <= self.tol_mc

    @property
    def passed(self) -> bool:
        return self.exact_ok and self.mc_ok


def mc_tolerance(m: int, r: int, n_samples: int, n_sigma: float = 3.0) -> float:
    """Tolerance for the relative Frobenius error of the sample mean of ``P P^T``.

    Any ``P`` with ``P^T P = (m/r) I`` has ``||P P^T||_F^2 = m^2/r``, so with
    ``E[P P^T] = I`` the estimator's mean squared error is
    ``(m^2/r - m) / N`` whatever the construction. Relative to ``||I||_F``
    that is an RMS of ``sqrt((m/r - 1) / N)``; the tolerance is ``n_sigma``
    times it.
    """
    return n_sigma * float(np.sqrt((m / r - 1.0) / n_samples))


def validate_assumption1(method, shape: LayerShape, r: int, n_samples: int,
                         tol_exact: float = 1e-10, tol_mc: float | None = None,
                         seed: int = 0, corrupt_scaling: bool = False) -> Assumption1Report:
    """Check both projection conditions empirically for one layer shape.

    Reports the worst entrywise deviation of ``P^T P`` from ``(m/r) I`` over
    all draws and the relative Frobenius distance of the sample mean of
    ``P P^T`` from ``I``. ``tol_mc`` defaults to :func:`mc_tolerance`.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    method = ProjectionMethod.parse(method)
    shape = shape if isinstance(shape, LayerShape) else LayerShape(*shape)
    m = shape.rows
    if tol_mc is None:
        tol_mc = mc_tolerance(m, r, n_samples) if r < m else 1e-12
    target = (m / r) * np.eye(r)
    acc = np.zeros((m, m))
    worst = 0.0
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_samples:
        count = min(_MC_CHUNK, n_samples - done)
        if method is ProjectionMethod.IDENTITY:
            P = np.broadcast_to(np.eye(m), (count, m, m))
        else:
            try:
                P = _draw_batch(method, m, r, rng, count, corrupt_scaling)
            except DegenerateProjectionError:
                continue
        worst = max(worst, float(np.max(np.abs(np.matmul(P.transpose(0, 2, 1), P) - target))))
        X = P.transpose(1, 0, 2).reshape(m, count * P.shape[2])
        acc += X @ X.T
        done += count
    mean_dev = float(np.linalg.norm(acc / n_samples - np.eye(m)) / np.sqrt(m))
    return Assumption1Report(method.value, m, r, n_samples, worst, mean_dev, tol_exact, tol_mc)
