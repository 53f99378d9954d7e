"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np
from scipy.special import expit


def logistic_grad(A, y, w, lam, idx=None):
    # an index set covering every row in order is the full gradient, bit for bit
    if idx is not None and not (len(idx) == len(y) and np.array_equal(idx, np.arange(len(y)))):
        A = A[idx]
        y = y[idx]
    z = A @ w
    coef = -y * expit(-y * z)
    return (A.T @ coef) / A.shape[0] + lam * w


def logistic_loss(A, y, w, lam):
    z = A @ w
    return float(np.mean(np.logaddexp(0.0, -y * z)) + 0.5 * lam * (w @ w))
