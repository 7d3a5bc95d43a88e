"""Analytic regularizers for signals drawn from a union of subspaces.

For a forward model with orthonormal rows and subspaces whose measured
images ``span(X U_k)`` meet only at zero, a Neumann network (or unrolled
gradient descent) with the piecewise-linear regularizer built here
reconstructs every noise-free point of the union with error at most
``(1 - eta)^(B+1) ||X beta||``.

Subspace labels are zero-based throughout.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from neumann_networks import linops
from neumann_networks.errors import SingularSubspaceError
from neumann_networks.estimators import (
    EstimatorConfig,
    Regularizer,
    Variant,
    gdn_estimate,
    neumann_estimate,
)
from neumann_networks.linops import ForwardModel

_SINGULAR_COND = 1e12
_PINV_RCOND = 1e-12


@dataclasses.dataclass(frozen=True, eq=False)
class UnionOfSubspaces:
    bases: tuple[np.ndarray, ...]

    def __post_init__(self):
        bases = tuple(np.array(U, dtype=np.float64) for U in self.bases)
        if not bases:
            raise ValueError("need at least one subspace")
        shape = bases[0].shape
        for U in bases:
            if U.shape != shape:
                raise ValueError("all bases must share the same shape")
            if not np.allclose(U.T @ U, np.eye(shape[1]), atol=1e-10, rtol=0):
                raise ValueError("bases must have orthonormal columns")
            U.setflags(write=False)
        object.__setattr__(self, "bases", bases)

    @property
    def p(self) -> int:
        return self.bases[0].shape[0]

    @property
    def r(self) -> int:
        return self.bases[0].shape[1]

    @property
    def K(self) -> int:
        return len(self.bases)


def sample_subspaces(p: int, r: int, K: int, seed) -> UnionOfSubspaces:
    """``K`` random ``r``-dimensional subspaces of ``R^p`` (QR of Gaussian matrices)."""
    if r > p:
        raise ValueError(f"subspace dimension r={r} exceeds ambient dimension p={p}")
    if K < 1 or r < 1:
        raise ValueError("need K >= 1 and r >= 1")
    rng = np.random.default_rng(seed)
    bases = []
    for _ in range(K):
        Q, _ = np.linalg.qr(rng.standard_normal((p, r)))
        bases.append(Q)
    return UnionOfSubspaces(tuple(bases))


def sample_points(uos: UnionOfSubspaces, n: int, rng: np.random.Generator):
    """Draw ``n`` points ``U_k w`` with uniform ``k`` and standard normal ``w``.

    Returns ``(betas, labels)`` with ``betas`` of shape ``(n, p)``.
    """
    labels = rng.integers(0, uos.K, size=n)
    w = rng.standard_normal((n, uos.r))
    stacked = np.stack(uos.bases)  # (K, p, r)
    betas = np.einsum("npr,nr->np", stacked[labels], w)
    return betas, labels


def sample_point(uos: UnionOfSubspaces, seed) -> tuple[np.ndarray, int]:
    betas, labels = sample_points(uos, 1, np.random.default_rng(seed))
    return betas[0], int(labels[0])


def c_const(eta: float, blocks: int) -> float:
    """Scale of the analytic regularizer, ``1 / (eta^2 sum_j (B-j)(1-eta)^j)``."""
    if blocks < 1:
        raise ValueError("the constant is undefined for fewer than one block")
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    total = sum((blocks - j) * (1.0 - eta) ** j for j in range(blocks))
    return 1.0 / (eta * eta * total)


def _require_orthonormal(model: ForwardModel):
    if not linops.check_orthonormal_rows(model, 1e-10):
        raise ValueError("analytic constructions require a forward model with orthonormal rows")


def _measured_normal_matrix(model: ForwardModel, U: np.ndarray) -> np.ndarray:
    XU = model.matrix @ U
    s = np.linalg.svd(XU, compute_uv=False)
    if s.size == 0 or s.min(initial=np.inf) == 0 or s.max() / s.min() > _SINGULAR_COND \
            or XU.shape[0] < XU.shape[1]:
        raise SingularSubspaceError("X U is rank deficient")
    return XU.T @ XU


def build_single_R(model: ForwardModel, U: np.ndarray, eta: float, blocks: int) -> np.ndarray:
    """Linear regularizer that makes the Neumann network exact up to ``(1-eta)^(B+1)`` on span(U)."""
    _require_orthonormal(model)
    c = c_const(eta, blocks)
    G = model.gram_matrix()
    normal = _measured_normal_matrix(model, U)
    null_proj = np.eye(model.p) - G
    return -c * null_proj @ U @ np.linalg.solve(normal, U.T @ G)


def oracle_estimate(model: ForwardModel, U: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares fit of ``y`` within span(U), mapped back to signal space."""
    normal = _measured_normal_matrix(model, U)
    coeffs = np.linalg.solve(normal, (linops.adjoint(model, y) @ U).T)
    return (U @ coeffs).T


def measured_projectors(model: ForwardModel, uos: UnionOfSubspaces) -> np.ndarray:
    """Orthogonal projectors onto ``span(X U_k)``, shape ``(K, m, m)``."""
    out = []
    for U in uos.bases:
        XU = model.matrix @ U
        out.append(XU @ np.linalg.pinv(XU, rcond=_PINV_RCOND))
    return np.stack(out)


def region_distances(model: ForwardModel, projectors: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Distances ``||(I - P_k) X beta||``; shape ``(..., K)``."""
    Xb = linops.apply(model, beta)
    residuals = Xb[..., None, :] - np.einsum("kij,...j->...ki", projectors, Xb)
    return np.linalg.norm(residuals, axis=-1)


def classify_region(model: ForwardModel, uos: UnionOfSubspaces, beta: np.ndarray,
                    projectors: np.ndarray | None = None):
    """Index of the measured subspace closest to ``X beta``; ties go to the smaller index."""
    if projectors is None:
        projectors = measured_projectors(model, uos)
    labels = np.argmin(region_distances(model, projectors, beta), axis=-1)
    return int(labels) if np.ndim(labels) == 0 else labels


class OracleRegularizer(Regularizer):
    """Piecewise-linear regularizer ``beta -> R_k beta`` for ``beta`` in region ``k``."""

    tag = "PiecewiseOracle"

    def __init__(self, model: ForwardModel, uos: UnionOfSubspaces, matrices: np.ndarray,
                 projectors: np.ndarray, c: float, eta: float, blocks: int):
        self.model = model
        self.uos = uos
        self.matrices = matrices
        self.projectors = projectors
        self.c = c
        self.eta = eta
        self.blocks = blocks

    def classify(self, beta: np.ndarray):
        return classify_region(self.model, self.uos, beta, self.projectors)

    def __call__(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        labels = np.asarray(self.classify(beta))
        if beta.ndim == 1:
            return self.matrices[int(labels)] @ beta
        return np.einsum("nij,nj->ni", self.matrices[labels], beta)


def build_rstar(model: ForwardModel, uos: UnionOfSubspaces, eta: float,
                blocks: int) -> OracleRegularizer:
    matrices = np.stack([build_single_R(model, U, eta, blocks) for U in uos.bases])
    return OracleRegularizer(model, uos, matrices, measured_projectors(model, uos),
                             c_const(eta, blocks), eta, blocks)


def check_transversality(model: ForwardModel, uos: UnionOfSubspaces) -> bool:
    """True iff every pair of measured subspaces spans ``2r`` dimensions."""
    if model.m < uos.r or (uos.K > 1 and model.m < 2 * uos.r):
        return False
    measured = [model.matrix @ U for U in uos.bases]
    for k in range(uos.K):
        for ell in range(k + 1, uos.K):
            s = np.linalg.svd(np.hstack([measured[k], measured[ell]]), compute_uv=False)
            if s.size < 2 * uos.r or s.min() <= 1e-8 * s.max():
                return False
    return True


@dataclasses.dataclass
class BoundReport:
    variant: str
    eta: float
    blocks: int
    trials: int
    seed: int
    max_relative_excess: float
    passed: bool
    errors: np.ndarray
    bounds: np.ndarray
    measurement_norms: np.ndarray
    labels: np.ndarray
    transversal: bool = True
    min_separation: float = float("inf")

    def to_dict(self, include_trials: bool = False) -> dict:
        out = {
            "variant": self.variant,
            "eta": self.eta,
            "blocks": self.blocks,
            "trials": self.trials,
            "seed": self.seed,
            "max_relative_excess": self.max_relative_excess,
            "max_error": float(self.errors.max(initial=0.0)),
            "pass": self.passed,
            "transversal": self.transversal,
            "min_separation": self.min_separation,
        }
        if include_trials:
            out["errors"] = self.errors.tolist()
            out["bounds"] = self.bounds.tolist()
        return out

    def to_json(self, include_trials: bool = False) -> str:
        return json.dumps(self.to_dict(include_trials), indent=2, sort_keys=True)

    def trials_csv(self) -> str:
        lines = ["trial,label,error,bound,measurement_norm"]
        for i, (lab, e, b, n) in enumerate(zip(self.labels, self.errors, self.bounds,
                                               self.measurement_norms)):
            lines.append(f"{i},{int(lab)},{e!r},{b!r},{n!r}")
        return "\n".join(lines) + "\n"


def trial_points(uos: UnionOfSubspaces, trials: int, seed: int):
    """One point per trial, each drawn from its own ``(seed, trial)`` stream."""
    pts = [sample_point(uos, [seed, i]) for i in range(trials)]
    betas = np.array([b for b, _ in pts]).reshape(trials, uos.p)
    labels = np.array([k for _, k in pts], dtype=int)
    return betas, labels


def pointwise_separation(model: ForwardModel, uos: UnionOfSubspaces, betas: np.ndarray,
                         labels: np.ndarray, projectors: np.ndarray | None = None) -> np.ndarray:
    """Smallest relative distance from ``X beta`` to any *other* measured subspace.

    The bound only needs ``X beta`` to avoid ``span(X U_l)`` for ``l != k``.
    Global transversality guarantees this for every point; when ``m < 2r``
    it still holds for almost every sampled point, which this checks.
    """
    if projectors is None:
        projectors = measured_projectors(model, uos)
    d = region_distances(model, projectors, betas)
    norms = np.linalg.norm(linops.apply(model, betas), axis=1)
    d[np.arange(len(labels)), labels] = np.inf
    return d.min(axis=1) / np.where(norms > 0, norms, 1.0)


def verify_bound(model: ForwardModel, uos: UnionOfSubspaces, eta: float, blocks: int,
                 trials: int, seed: int, variant: Variant | str = Variant.NN,
                 tol: float = 1e-8, min_separation: float = 1e-6) -> BoundReport:
    """Check ``||beta_hat - beta|| <= (1-eta)^(B+1) ||X beta||`` on sampled union points.

    If the measured subspaces are not globally transversal (e.g. ``m < 2r``),
    every sampled point must instead keep a relative distance of at least
    ``min_separation`` from the other measured subspaces.
    """
    variant = Variant(variant)
    if variant is Variant.PNN:
        raise ValueError("the bound is stated for NN and GDN only")
    if uos.K == 1:
        if not 0 < eta <= 1:
            raise ValueError("eta must lie in (0, 1] for a single subspace")
    elif not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")

    rstar = build_rstar(model, uos, eta, blocks)
    betas, labels = trial_points(uos, trials, seed)
    transversal = check_transversality(model, uos)
    separation = float("inf")
    if uos.K > 1:
        separation = float(pointwise_separation(model, uos, betas, labels,
                                                rstar.projectors).min(initial=np.inf))
        if not transversal and separation < min_separation:
            raise ValueError("measured subspaces are not transversal and a sampled point "
                             "lies within min_separation of another measured subspace")
    y = linops.apply(model, betas)
    cfg = EstimatorConfig(variant=variant, eta=eta, blocks=blocks)
    if variant is Variant.NN:
        beta_hat, _ = neumann_estimate(model, rstar, cfg, y)
    else:
        beta_hat = gdn_estimate(model, rstar, cfg, y)
    errors = np.linalg.norm(beta_hat - betas, axis=1)
    norms = np.linalg.norm(y, axis=1)
    bounds = (1.0 - eta) ** (blocks + 1) * norms
    excess = (errors - bounds) / np.where(norms > 0, norms, 1.0)
    worst = float(excess.max(initial=-np.inf))
    return BoundReport(variant.value, eta, blocks, trials, seed, worst, bool(worst <= tol),
                       errors, bounds, norms, labels, transversal, separation)


def sweep_bounds(model: ForwardModel, uos: UnionOfSubspaces, etas: Sequence[float],
                 blocks: Sequence[int], trials: int, seed: int,
                 variant: Variant | str = Variant.NN) -> list[BoundReport]:
    return [verify_bound(model, uos, eta, B, trials, seed, variant)
            for eta in etas for B in blocks]
