"""Classical ISTA with an l1 prior in an orthonormal per-patch transform,
plus the minimum-norm least-squares reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft

from .sampling import SamplingMatrix

IDENTITY = "IDENTITY"
DCT2 = "DCT2"


class ConfigurationError(ValueError):
    pass


def soft_threshold(v, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError(f"threshold must be non-negative, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


@dataclass
class IstaConfig:
    lam: float = 0.01
    rho: float = 1.0
    max_iters: int = 400
    tol: float = 1e-6
    transform: object = DCT2  # IDENTITY, DCT2 or an orthonormal N x N matrix

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if not self.rho > 0:
            raise ConfigurationError(f"step size must be positive, got {self.rho}")
        if not self.tol > 0:
            raise ConfigurationError(f"tolerance must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")


class _Transform:
    """Orthonormal analysis operator ``T`` acting on rows of a B x N batch."""

    def __init__(self, spec, n: int):
        self.side = math.isqrt(n)
        self.matrix = None
        if isinstance(spec, str):
            if spec not in (IDENTITY, DCT2):
                raise ConfigurationError(f"unknown transform {spec!r}")
            self.kind = spec
            return
        mat = np.asarray(spec, dtype=np.float64)
        if mat.shape != (n, n):
            raise ConfigurationError(f"transform must be {n} x {n}, got {mat.shape}")
        if np.abs(mat @ mat.T - np.eye(n)).max() > 1e-10:
            raise ConfigurationError("transform is not orthonormal")
        self.kind = "MATRIX"
        self.matrix = mat

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == IDENTITY:
            return x
        if self.kind == DCT2:
            b = x.shape[0]
            return fft.dctn(x.reshape(b, self.side, self.side), type=2, norm="ortho", axes=(1, 2)).reshape(b, -1)
        return x @ self.matrix.T

    def inverse(self, c: np.ndarray) -> np.ndarray:
        if self.kind == IDENTITY:
            return c
        if self.kind == DCT2:
            b = c.shape[0]
            return fft.idctn(c.reshape(b, self.side, self.side), type=2, norm="ortho", axes=(1, 2)).reshape(b, -1)
        return c @ self.matrix


def objective(x: np.ndarray, phi: SamplingMatrix, y: np.ndarray, lam: float, transform="IDENTITY") -> float:
    t = transform if isinstance(transform, _Transform) else _Transform(transform, phi.cols)
    x = np.atleast_2d(x)
    r = x @ phi.data.T - np.atleast_2d(y)
    return 0.5 * float(np.vdot(r, r)) + lam * float(np.abs(t.forward(x)).sum())


def ista_solve(y, phi: SamplingMatrix, config: IstaConfig | None = None, x0=None):
    """Run ISTA on every row of ``y``; returns ``(xhat, objective_trace)``.

    The trace holds the total objective (summed over rows) after each
    iteration.  Iteration stops after ``max_iters`` or once the relative
    change of the iterate drops below ``tol``.
    """
    config = config or IstaConfig()
    single = np.ndim(y) == 1
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != phi.rows:
        raise ValueError(f"measurement length {y.shape[1]} does not match M={phi.rows}")
    t = _Transform(config.transform, phi.cols)
    x = np.zeros((y.shape[0], phi.cols)) if x0 is None else np.atleast_2d(np.array(x0, dtype=np.float64))
    a = phi.data
    thresh = config.rho * config.lam
    trace = []
    for _ in range(config.max_iters):
        r = x - config.rho * ((x @ a.T - y) @ a)
        new = t.inverse(soft_threshold(t.forward(r), thresh))
        trace.append(objective(new, phi, y, config.lam, t))
        change = np.linalg.norm(new - x) / max(np.linalg.norm(x), 1e-300)
        x = new
        if change < config.tol:
            break
    return (x[0] if single else x), np.array(trace)


def kkt_residual(x, phi: SamplingMatrix, y, lam: float) -> float:
    """Largest violation of the lasso optimality conditions (identity transform)."""
    x = np.atleast_2d(x)
    g = (x @ phi.data.T - np.atleast_2d(y)) @ phi.data
    nz = x != 0
    on = np.abs(g + lam * np.sign(x))[nz]
    off = np.maximum(np.abs(g) - lam, 0.0)[~nz]
    return float(max(on.max(initial=0.0), off.max(initial=0.0)))


def pinv_reconstruct(y, phi: SamplingMatrix) -> np.ndarray:
    """Minimum-norm solution ``phi^T (phi phi^T)^-1 y``; equals ``phi^T y`` for orthonormal rows."""
    y = np.asarray(y, dtype=np.float64)
    a = phi.data
    gram = a @ a.T
    if np.linalg.cond(gram) > 1e12:
        raise np.linalg.LinAlgError("phi phi^T is singular or numerically rank deficient")
    coef = np.linalg.solve(gram, np.atleast_2d(y).T)
    out = (a.T @ coef).T
    return out[0] if y.ndim == 1 else out
