"""Local losses ``f_i``, their gradient oracles, synthetic data and reference solutions.

The global objective is ``f(x) = (1/n) sum_i f_i(x)``. Three kinds are
provided:

``LogisticRegression``
    one layer ``x`` of shape ``m x 1``; ``f_i`` is the mean logistic loss over
    client ``i``'s samples plus ``(lam/2) ||x||^2``.
``Quadratic``
    ``f_i(x) = sum_l 0.5 <x_l, A_il x_l> - <b_il, x_l>`` for any layer shapes.
``TwoLayerMLP``
    ``tanh`` hidden layer, linear output, squared loss on the +-1 labels;
    layer shapes ``(p, h)`` and ``(h, 1)``.

Gradients are hand-coded. Minibatch estimators sample without replacement and
sort the drawn indices, so a batch holding every sample reproduces the full
gradient bit for bit.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .layered import LayeredMatrix, LayerShape, average, check_same_shapes, norm


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Per-client features (``samples x m``) and labels in ``{-1, +1}``."""

    features: tuple
    labels: tuple

    def __post_init__(self):
        if len(self.features) != len(self.labels) or not self.features:
            raise ValueError("need one label vector per client and at least one client")
        dims = {A.shape[1] for A in self.features}
        if len(dims) != 1:
            raise ValueError(f"feature dimension differs across clients: {sorted(dims)}")
        for i, (A, y) in enumerate(zip(self.features, self.labels)):
            if A.shape[0] < 1 or A.shape[0] != y.shape[0]:
                raise ValueError(f"client {i}: {A.shape[0]} samples vs {y.shape[0]} labels")

    @property
    def n_clients(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features[0].shape[1]

    def sizes(self) -> list[int]:
        return [A.shape[0] for A in self.features]

    def export_csv(self, directory) -> list[Path]:
        """Write ``client_XXX.csv`` per client: feature columns, then the label."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        m = self.feature_dim
        paths = []
        for i, (A, y) in enumerate(zip(self.features, self.labels)):
            path = directory / f"client_{i:03d}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"a{c}" for c in range(m)] + ["label"])
                for row, lab in zip(A, y):
                    w.writerow([repr(float(v)) for v in row] + [int(lab)])
            paths.append(path)
        return paths

    @classmethod
    def load_csv(cls, directory) -> "Dataset":
        paths = sorted(Path(directory).glob("client_*.csv"))
        if not paths:
            raise FileNotFoundError(f"no client_*.csv files in {directory}")
        feats, labs = [], []
        for path in paths:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
            feats.append(np.ascontiguousarray(data[:, :-1]))
            labs.append(np.ascontiguousarray(data[:, -1]))
        return cls(tuple(feats), tuple(labs))


def generate_clustered_data(n_clients: int = 30, samples_total: int = 60_000,
                            feature_dim: int = 20, heterogeneity_noise: float = 0.1,
                            seed: int = 0) -> Dataset:
    """Heterogeneous binary classification data, one hyperplane per client.

    Client ``i`` draws a unit normal ``w_i``, standard Gaussian features ``a``
    and labels ``sign(w_i^T a + eps)`` with ``eps ~ N(0, noise^2)``. A
    remainder of ``samples_total`` not divisible by ``n_clients`` goes to the
    first clients, one sample each.
    """
    if n_clients < 1 or samples_total < n_clients or feature_dim < 1:
        raise ValueError("need n_clients >= 1, samples_total >= n_clients and feature_dim >= 1")
    if heterogeneity_noise < 0:
        raise ValueError("heterogeneity_noise must be >= 0")
    base, rem = divmod(samples_total, n_clients)
    feats, labs = [], []
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(n_clients)):
        rng = np.random.default_rng(ss)
        s = base + (1 if i < rem else 0)
        w = rng.standard_normal(feature_dim)
        w /= np.linalg.norm(w)
        A = rng.standard_normal((s, feature_dim))
        eps = heterogeneity_noise * rng.standard_normal(s)
        y = np.where(A @ w + eps >= 0.0, 1.0, -1.0)
        A.flags.writeable = False
        y.flags.writeable = False
        feats.append(A)
        labs.append(y)
    return Dataset(tuple(feats), tuple(labs))


def _sample_batch(n_samples: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= batch_size <= n_samples:
        raise ValueError(f"batch_size must be in [1, {n_samples}], got {batch_size}")
    return np.sort(rng.choice(n_samples, size=batch_size, replace=False)).astype(np.intp)


class Objective:
    """Base class: ``f(x) = (1/n) sum_i f_i(x)`` over layered parameters."""

    kind = "objective"
    strongly_convex = False

    n_clients: int
    shapes: tuple

    def _check(self, client: int, x: LayeredMatrix) -> None:
        if not 0 <= client < self.n_clients:
            raise IndexError(f"client index {client} out of range [0, {self.n_clients})")
        if x.shapes != tuple(s.as_tuple() for s in self.shapes):
            check_same_shapes(x, LayeredMatrix.zeros(self.shapes))

    def n_samples(self, client: int) -> int:
        raise NotImplementedError

    def client_loss(self, client: int, x: LayeredMatrix) -> float:
        raise NotImplementedError

    def full_gradient(self, client: int, x: LayeredMatrix) -> LayeredMatrix:
        raise NotImplementedError

    def minibatch_gradient(self, client: int, x: LayeredMatrix, batch_size: int,
                           rng: np.random.Generator) -> LayeredMatrix:
        raise NotImplementedError

    def loss(self, x: LayeredMatrix) -> float:
        return float(np.mean([self.client_loss(i, x) for i in range(self.n_clients)]))

    def gradient(self, x: LayeredMatrix) -> LayeredMatrix:
        return average([self.full_gradient(i, x) for i in range(self.n_clients)])

    def smoothness(self) -> float | None:
        """Upper bound on the smoothness constant of every ``f_i``, if known."""
        return None

    def initial_point(self, seed: int = 0) -> LayeredMatrix:
        return LayeredMatrix.zeros(self.shapes)


class LogisticRegression(Objective):
    kind = "logistic"

    def __init__(self, data: Dataset, lam: float = 1e-4):
        if lam < 0:
            raise ValueError("lam must be >= 0")
        self.data = data
        self.lam = float(lam)
        self.n_clients = data.n_clients
        self.shapes = (LayerShape(data.feature_dim, 1),)
        self.strongly_convex = self.lam > 0

    def n_samples(self, client):
        return self.data.features[client].shape[0]

    @staticmethod
    def _w(x: LayeredMatrix) -> np.ndarray:
        return np.ascontiguousarray(x.layers[0][:, 0])

    def _wrap(self, g: np.ndarray) -> LayeredMatrix:
        return LayeredMatrix._wrap([g.reshape(-1, 1)])

    def client_loss(self, client, x):
        self._check(client, x)
        return float(kernels.logistic_loss(self.data.features[client], self.data.labels[client],
                                           self._w(x), self.lam))

    def full_gradient(self, client, x):
        self._check(client, x)
        return self._wrap(kernels.logistic_grad(self.data.features[client], self.data.labels[client],
                                                self._w(x), self.lam))

    def minibatch_gradient(self, client, x, batch_size, rng):
        self._check(client, x)
        idx = _sample_batch(self.n_samples(client), batch_size, rng)
        return self._wrap(kernels.logistic_grad(self.data.features[client], self.data.labels[client],
                                                self._w(x), self.lam, idx))

    def hessian(self, x: LayeredMatrix) -> list[np.ndarray]:
        w = self._w(x)
        m = w.shape[0]
        H = np.zeros((m, m))
        for A, y in zip(self.data.features, self.data.labels):
            p = 1.0 / (1.0 + np.exp(-(y * (A @ w))))
            H += (A.T * (p * (1.0 - p))) @ A / A.shape[0]
        H /= self.n_clients
        H += self.lam * np.eye(m)
        return [H]

    def smoothness(self):
        return self.lam + max(
            np.linalg.norm(A, 2) ** 2 / (4.0 * A.shape[0]) for A in self.data.features)


class Quadratic(Objective):
    """``f_i(x) = sum_l 0.5 <x_l, A_il x_l> - <b_il, x_l>``; ``A_il`` symmetric."""

    kind = "quadratic"

    def __init__(self, A: Sequence[Sequence[np.ndarray]], b: Sequence[Sequence[np.ndarray]]):
        self.A = tuple(tuple(np.asarray(a, dtype=np.float64) for a in Ai) for Ai in A)
        self.b = tuple(tuple(np.asarray(v, dtype=np.float64).reshape(Ai[l].shape[0], -1)
                             for l, v in enumerate(bi)) for Ai, bi in zip(self.A, b))
        if not self.A or len(self.A) != len(self.b):
            raise ValueError("need matching, non-empty per-client A and b")
        self.n_clients = len(self.A)
        self.shapes = tuple(LayerShape(v.shape[0], v.shape[1]) for v in self.b[0])
        for i, (Ai, bi) in enumerate(zip(self.A, self.b)):
            if len(Ai) != len(self.shapes) or len(bi) != len(self.shapes):
                raise ValueError(f"client {i}: wrong number of layers")
            for l, (a, v) in enumerate(zip(Ai, bi)):
                if a.shape != (v.shape[0], v.shape[0]) or v.shape != self.shapes[l].as_tuple():
                    raise ValueError(f"client {i}, layer {l}: inconsistent shapes {a.shape}, {v.shape}")
        mean_min_eig = min(np.linalg.eigvalsh(sum(Ai[l] for Ai in self.A) / self.n_clients)[0]
                           for l in range(len(self.shapes)))
        self.strongly_convex = mean_min_eig > 0

    @classmethod
    def random(cls, n_clients: int, shapes, seed: int = 0, mu: float = 0.1, L: float = 1.0,
               heterogeneity: float = 1.0) -> "Quadratic":
        """Random SPD clients with eigenvalues in ``[mu, L]`` and Gaussian ``b``."""
        shapes = [s if isinstance(s, LayerShape) else LayerShape(*s) for s in shapes]
        rng = np.random.default_rng(seed)
        A, b = [], []
        for _ in range(n_clients):
            Ai, bi = [], []
            for s in shapes:
                Q, _ = np.linalg.qr(rng.standard_normal((s.rows, s.rows)))
                eig = rng.uniform(mu, L, size=s.rows)
                Ai.append((Q * eig) @ Q.T)
                bi.append(heterogeneity * rng.standard_normal((s.rows, s.cols)))
            A.append(Ai)
            b.append(bi)
        return cls(A, b)

    def n_samples(self, client):
        return 1

    def client_loss(self, client, x):
        self._check(client, x)
        return float(sum(0.5 * np.vdot(xl, a @ xl) - np.vdot(v, xl)
                         for xl, a, v in zip(x.layers, self.A[client], self.b[client])))

    def full_gradient(self, client, x):
        self._check(client, x)
        return LayeredMatrix._wrap([a @ xl - v for xl, a, v in zip(x.layers, self.A[client], self.b[client])])

    def minibatch_gradient(self, client, x, batch_size, rng):
        # deterministic objective: the only admissible batch is the whole client
        _sample_batch(1, batch_size, rng)
        return self.full_gradient(client, x)

    def hessian(self, x=None) -> list[np.ndarray]:
        return [sum(Ai[l] for Ai in self.A) / self.n_clients for l in range(len(self.shapes))]

    def smoothness(self):
        return max(np.linalg.norm(a, 2) for Ai in self.A for a in Ai)


class TwoLayerMLP(Objective):
    """``out = tanh(A W1) W2``, ``f_i = (1/2s) ||out - y||^2`` on client ``i``'s data."""

    kind = "mlp"

    def __init__(self, data: Dataset, hidden: int = 16):
        if hidden < 1:
            raise ValueError("hidden width must be >= 1")
        self.data = data
        self.hidden = int(hidden)
        self.n_clients = data.n_clients
        self.shapes = (LayerShape(data.feature_dim, self.hidden), LayerShape(self.hidden, 1))

    def n_samples(self, client):
        return self.data.features[client].shape[0]

    def _batch(self, client, idx):
        A, y = self.data.features[client], self.data.labels[client]
        if idx is not None:
            A, y = A[idx], y[idx]
        return A, y

    def _forward(self, A, x):
        H = np.tanh(A @ x.layers[0])
        return H, H @ x.layers[1]

    def _grad(self, client, x, idx):
        A, y = self._batch(client, idx)
        H, out = self._forward(A, x)
        dout = (out[:, 0] - y)[:, None] / A.shape[0]
        g2 = H.T @ dout
        dH = (dout @ x.layers[1].T) * (1.0 - H * H)
        g1 = A.T @ dH
        return LayeredMatrix._wrap([g1, g2])

    def client_loss(self, client, x):
        self._check(client, x)
        A, y = self._batch(client, None)
        _, out = self._forward(A, x)
        return float(0.5 * np.mean((out[:, 0] - y) ** 2))

    def full_gradient(self, client, x):
        self._check(client, x)
        return self._grad(client, x, None)

    def minibatch_gradient(self, client, x, batch_size, rng):
        self._check(client, x)
        return self._grad(client, x, _sample_batch(self.n_samples(client), batch_size, rng))

    def initial_point(self, seed=0):
        rng = np.random.default_rng(seed)
        return LayeredMatrix([rng.standard_normal(s.as_tuple()) / np.sqrt(s.rows) for s in self.shapes])


@dataclass(frozen=True)
class ReferenceSolution:
    x_star: LayeredMatrix
    grad_norm: float
    iterations: int


def solve_reference(obj: Objective, tol: float = 1e-12, max_iter: int = 200) -> ReferenceSolution:
    """Minimize a strongly convex objective by damped Newton until ``||grad f|| <= tol``."""
    if not getattr(obj, "strongly_convex", False) or not hasattr(obj, "hessian"):
        raise ValueError(f"reference solution needs a strongly convex objective, got {obj.kind}")
    x = LayeredMatrix.zeros(obj.shapes)
    g = obj.gradient(x)
    fx = obj.loss(x)
    for it in range(max_iter + 1):
        gn = norm(g)
        if gn <= tol:
            return ReferenceSolution(x, gn, it)
        if it == max_iter:
            break
        H = obj.hessian(x)
        d = LayeredMatrix._wrap([-np.linalg.solve(h, gl) for h, gl in zip(H, g.layers)])
        slope = sum(float(np.vdot(a, b)) for a, b in zip(g.layers, d.layers))
        step = 1.0
        while True:
            x_new = x + step * d
            f_new = obj.loss(x_new)
            # near the optimum the loss change drowns in rounding; take the full step
            if f_new <= fx + 1e-4 * step * slope or step < 1e-10 or gn < 1e-6:
                break
            step *= 0.5
        x, fx = x_new, f_new
        g = obj.gradient(x)
    raise NonConvergenceError(
        f"Newton stopped after {max_iter} iterations with ||grad f|| = {gn:.3e} > {tol:.1e}")


def finite_difference_gradient(fun, x: LayeredMatrix, h: float = 1e-5) -> LayeredMatrix:
    """Central-difference gradient of a scalar function of a layered argument."""
    out = []
    for l, a in enumerate(x.layers):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            layers = [b.copy() for b in x.layers]
            layers[l][idx] = a[idx] + h
            fp = fun(LayeredMatrix(layers))
            layers[l][idx] = a[idx] - h
            fm = fun(LayeredMatrix(layers))
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return LayeredMatrix(out)


def build_objective(kind: str, *, n_clients: int = 30, samples_total: int = 60_000,
                    feature_dim: int = 20, heterogeneity_noise: float = 0.1, data_seed: int = 0,
                    l2: float = 1e-4, hidden: int = 16, shapes=None, data_dir=None) -> Objective:
    """Construct an objective from flat config values (used by the CLI)."""
    kind = kind.lower()
    if kind == "quadratic":
        shapes = shapes or [(feature_dim, 1)]
        return Quadratic.random(n_clients, shapes, seed=data_seed)
    if data_dir is not None:
        data = Dataset.load_csv(os.fspath(data_dir))
    else:
        data = generate_clustered_data(n_clients, samples_total, feature_dim, heterogeneity_noise, data_seed)
    if kind == "logistic":
        return LogisticRegression(data, l2)
    if kind == "mlp":
        return TwoLayerMLP(data, hidden)
    raise ValueError(f"unknown objective kind {kind!r}")
