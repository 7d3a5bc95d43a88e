"""Neumann network, unrolled gradient descent and preconditioned estimators.

All estimators accept a single measurement of length ``m`` or a batch of
shape ``(n, m)`` and evaluate the regularizer row-wise.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from typing import Callable

import numpy as np

from neumann_networks import linops
from neumann_networks.errors import DimensionError, DivergenceError
from neumann_networks.linops import ForwardModel


class Variant(str, enum.Enum):
    NN = "NN"
    PNN = "PNN"
    GDN = "GDN"


@dataclasses.dataclass(frozen=True)
class EstimatorConfig:
    variant: Variant = Variant.NN
    eta: float = 0.1
    lam: float = 0.0
    blocks: int = 6
    cg_iters: int = 10
    cg_tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.variant in (Variant.NN, Variant.GDN) and not self.eta > 0:
            raise ValueError(f"{self.variant.value} requires eta > 0")
        if self.variant is Variant.PNN:
            if not self.lam > 0:
                raise ValueError("PNN requires lam > 0")
            if self.cg_iters < 1:
                raise ValueError("cg_iters must be >= 1")

    def replace(self, **changes) -> "EstimatorConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorConfig":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EstimatorConfig":
        return cls.from_dict(json.loads(text))


class Regularizer:
    """A map ``R: R^p -> R^p`` applied row-wise to batches.

    Subclasses implement ``__call__``. ``tag`` is one of ``Zero``,
    ``Linear``, ``PiecewiseOracle`` or ``LearnedMLP``.
    """

    tag = "Custom"

    def __call__(self, beta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ZeroRegularizer(Regularizer):
    tag = "Zero"

    def __call__(self, beta):
        return np.zeros_like(np.asarray(beta, dtype=np.float64))


class LinearRegularizer(Regularizer):
    tag = "Linear"

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionError("linear regularizer must be a square matrix")

    def __call__(self, beta):
        return np.asarray(beta, dtype=np.float64) @ self.matrix.T


class FunctionRegularizer(Regularizer):
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], tag: str = "Custom"):
        self.fn = fn
        self.tag = tag

    def __call__(self, beta):
        return self.fn(beta)


def _check_finite(x: np.ndarray, step: int, what: str = "estimator block"):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite values in {what} {step}; step size too large?", step=step)


def _regularize(R: Regularizer, beta: np.ndarray) -> np.ndarray:
    out = R(beta)
    if out.shape != beta.shape:
        raise DimensionError(f"regularizer returned shape {out.shape} for input {beta.shape}")
    return out


def _require(cfg: EstimatorConfig, variant: Variant):
    if cfg.variant is not variant:
        raise ValueError(f"config variant is {cfg.variant.value}, expected {variant.value}")


def neumann_estimate(model: ForwardModel, R: Regularizer, cfg: EstimatorConfig,
                     y: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Neumann network estimate and its series terms.

    Returns ``(beta_hat, terms)`` where ``terms[j]`` is the j-th summand and
    ``beta_hat = sum(terms)``.
    """
    _require(cfg, Variant.NN)
    eta = cfg.eta
    term = eta * linops.adjoint(model, y)
    terms = [term]
    total = term.copy()
    for j in range(1, cfg.blocks + 1):
        term = term - eta * linops.gram(model, term) - eta * _regularize(R, term)
        _check_finite(term, j)
        terms.append(term)
        total += term
    return total, terms


def gdn_estimate(model: ForwardModel, R: Regularizer, cfg: EstimatorConfig, y: np.ndarray,
                 return_iterates: bool = False):
    """Unrolled gradient descent: ``B`` steps started from ``eta X^T y``."""
    _require(cfg, Variant.GDN)
    eta = cfg.eta
    start = eta * linops.adjoint(model, y)
    beta = start
    iterates = [beta]
    for j in range(1, cfg.blocks + 1):
        beta = beta - eta * linops.gram(model, beta) - eta * _regularize(R, beta) + start
        _check_finite(beta, j)
        iterates.append(beta)
    if return_iterates:
        return beta, iterates
    return beta


@dataclasses.dataclass
class CGResult:
    solution: np.ndarray
    residual: float
    converged: bool
    iterations: int


def conjugate_gradient(operator: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       iters: int, tol: float = 1e-10) -> CGResult:
    """Conjugate gradients from a zero initial guess.

    ``b`` may be a batch of right-hand sides (one per row); each row is
    iterated independently and frozen once its relative residual drops to
    ``tol``. ``residual`` is the largest final relative residual.
    """
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    B = np.atleast_2d(b)
    p = B.shape[1]
    x = np.zeros_like(B)
    r = B.copy()
    d = r.copy()
    bnorm = np.linalg.norm(B, axis=1)
    safe_bnorm = np.where(bnorm > 0, bnorm, 1.0)
    rr = np.einsum("ij,ij->i", r, r)
    active = np.sqrt(rr) / safe_bnorm > tol
    steps = 0
    for _ in range(min(iters, p)):
        if not active.any():
            break
        steps += 1
        Ad = operator(d)
        dAd = np.einsum("ij,ij->i", d, Ad)
        alpha = np.where(active, rr / np.where(active, dAd, 1.0), 0.0)
        x += alpha[:, None] * d
        r -= alpha[:, None] * Ad
        rr_new = np.einsum("ij,ij->i", r, r)
        gamma = np.where(active, rr_new / np.where(active, rr, 1.0), 0.0)
        d = np.where(active[:, None], r + gamma[:, None] * d, d)
        rr = rr_new
        active &= np.sqrt(rr) / safe_bnorm > tol
    rel = np.where(bnorm > 0, np.sqrt(rr) / safe_bnorm, 0.0)
    residual = float(rel.max(initial=0.0))
    return CGResult(x[0] if single else x, residual, bool(residual <= tol), steps)


def tikhonov_operator(model: ForwardModel, lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """``beta -> (X^T X + lam I) beta``."""
    return lambda beta: linops.gram(model, beta) + lam * beta


@dataclasses.dataclass
class PNNResult:
    estimate: np.ndarray
    terms: list[np.ndarray]
    cg_converged: bool
    cg_residual: float


def precond_neumann_estimate(model: ForwardModel, Rt: Regularizer, cfg: EstimatorConfig,
                             y: np.ndarray) -> PNNResult:
    """Preconditioned Neumann network with ``(X^T X + lam I)^{-1}`` applied by CG.

    CG runs a fixed budget of ``cfg.cg_iters`` iterations per application;
    failing to reach ``cfg.cg_tol`` is reported through ``cg_converged``.
    """
    _require(cfg, Variant.PNN)
    lam = cfg.lam
    op = tikhonov_operator(model, lam)
    converged = True
    worst = 0.0

    def solve(b):
        nonlocal converged, worst
        res = conjugate_gradient(op, b, cfg.cg_iters, cfg.cg_tol)
        converged &= res.converged
        worst = max(worst, res.residual)
        return res.solution

    term = solve(linops.adjoint(model, y))
    terms = [term]
    total = term.copy()
    for j in range(1, cfg.blocks + 1):
        term = lam * solve(term) - _regularize(Rt, term)
        _check_finite(term, j)
        terms.append(term)
        total += term
    return PNNResult(total, terms, converged, worst)


def estimate(model: ForwardModel, R: Regularizer, cfg: EstimatorConfig,
             y: np.ndarray) -> np.ndarray:
    """Dispatch on ``cfg.variant`` and return only the reconstruction."""
    if cfg.variant is Variant.NN:
        return neumann_estimate(model, R, cfg, y)[0]
    if cfg.variant is Variant.GDN:
        return gdn_estimate(model, R, cfg, y)
    return precond_neumann_estimate(model, R, cfg, y).estimate


def neumann_series_partial(A_apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                           eta: float, K: int) -> np.ndarray:
    """``eta * sum_{k=0}^{K} (I - eta A)^k b``, an approximation of ``A^{-1} b``."""
    if K < 0:
        raise ValueError("K must be >= 0")
    s = eta * np.asarray(b, dtype=np.float64)
    total = s.copy()
    for k in range(1, K + 1):
        s = s - eta * A_apply(s)
        _check_finite(s, k, "series term")
        total += s
    return total
