"""Dense forward models for desk-scale linear inverse problems.

Every model is stored as an explicit ``m x p`` float64 matrix. Signals may
be passed either as a single vector of length ``p`` or as a batch of shape
``(n, p)`` (one signal per row); measurements likewise with ``m``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from typing import Any

import numpy as np

from neumann_networks.errors import DimensionError


class ModelKind(str, enum.Enum):
    INPAINTING = "inpainting"
    GAUSSIAN_BLUR = "gaussian_blur"
    DOWNSAMPLE = "downsample"
    GAUSSIAN_SENSING = "gaussian_sensing"
    CUSTOM = "custom"


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Recipe for a forward model; round-trips through JSON.

    Only the fields relevant to ``kind`` are used:

    * inpainting: ``p``, ``observed``
    * gaussian_blur: ``side``, ``kernel_size``, ``sigma``, ``boundary``
    * downsample: ``side``, ``factor``, ``filter``
    * gaussian_sensing: ``m``, ``p``, ``seed``, ``row_orthonormalize``
    """

    kind: ModelKind
    p: int | None = None
    m: int | None = None
    observed: tuple[int, ...] | None = None
    side: int | None = None
    kernel_size: int | None = None
    sigma: float | None = None
    boundary: str = "circular"
    factor: int | None = None
    filter: str = "box_average"
    seed: int | None = None
    row_orthonormalize: bool = False

    @classmethod
    def inpainting(cls, p: int, observed) -> "ModelSpec":
        return cls(ModelKind.INPAINTING, p=p, observed=tuple(int(i) for i in observed))

    @classmethod
    def gaussian_blur(cls, side: int, kernel_size: int, sigma: float,
                      boundary: str = "circular") -> "ModelSpec":
        return cls(ModelKind.GAUSSIAN_BLUR, side=side, kernel_size=kernel_size,
                   sigma=float(sigma), boundary=boundary)

    @classmethod
    def downsample(cls, side: int, factor: int, filter: str = "box_average") -> "ModelSpec":
        return cls(ModelKind.DOWNSAMPLE, side=side, factor=factor, filter=filter)

    @classmethod
    def gaussian_sensing(cls, m: int, p: int, seed: int,
                         row_orthonormalize: bool = False) -> "ModelSpec":
        return cls(ModelKind.GAUSSIAN_SENSING, m=m, p=p, seed=seed,
                   row_orthonormalize=row_orthonormalize)

    def to_dict(self) -> dict[str, Any]:
        keys = {
            ModelKind.INPAINTING: ("p", "observed"),
            ModelKind.GAUSSIAN_BLUR: ("side", "kernel_size", "sigma", "boundary"),
            ModelKind.DOWNSAMPLE: ("side", "factor", "filter"),
            ModelKind.GAUSSIAN_SENSING: ("m", "p", "seed", "row_orthonormalize"),
            ModelKind.CUSTOM: ("m", "p"),
        }[self.kind]
        out: dict[str, Any] = {"kind": self.kind.value}
        for key in keys:
            value = getattr(self, key)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelSpec":
        data = dict(data)
        kind = ModelKind(data.pop("kind"))
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        if data.get("observed") is not None:
            data["observed"] = tuple(int(i) for i in data["observed"])
        return cls(kind, **data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


@dataclasses.dataclass(frozen=True, eq=False)
class ForwardModel:
    """A dense linear measurement operator ``X``."""

    matrix: np.ndarray
    kind: ModelKind = ModelKind.CUSTOM
    orthonormal_rows: bool = False
    spec: ModelSpec | None = None

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DimensionError(f"forward model matrix must be 2-D, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("forward model matrix has non-finite entries")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    def gram_matrix(self) -> np.ndarray:
        return self.matrix.T @ self.matrix


def _check_last_dim(x: np.ndarray, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise DimensionError(f"{what} must have trailing dimension {n}, got shape {x.shape}")
    return x


def apply(model: ForwardModel, beta: np.ndarray) -> np.ndarray:
    """Return ``X beta`` (row-wise for a batch)."""
    beta = _check_last_dim(beta, model.p, "signal")
    return beta @ model.matrix.T


def adjoint(model: ForwardModel, y: np.ndarray) -> np.ndarray:
    """Return ``X^T y`` (row-wise for a batch)."""
    y = _check_last_dim(y, model.m, "measurement")
    return y @ model.matrix


def gram(model: ForwardModel, beta: np.ndarray) -> np.ndarray:
    """Return ``X^T X beta`` as the composition adjoint(apply(beta))."""
    return adjoint(model, apply(model, beta))


def check_orthonormal_rows(model: ForwardModel, tol: float = 1e-10) -> bool:
    if tol <= 0:
        raise ValueError("tol must be positive")
    X = model.matrix
    return bool(np.max(np.abs(X @ X.T - np.eye(model.m)), initial=0.0) <= tol)


def _gram_schmidt_rows(A: np.ndarray) -> np.ndarray:
    # Modified Gram-Schmidt with one re-orthogonalization pass.
    Q = np.array(A, dtype=np.float64)
    for i in range(Q.shape[0]):
        for _ in range(2):
            for j in range(i):
                Q[i] -= (Q[j] @ Q[i]) * Q[j]
        norm = np.linalg.norm(Q[i])
        if norm < 1e-12:
            raise ValueError("rows are linearly dependent; cannot orthonormalize")
        Q[i] /= norm
    return Q


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Square Gaussian kernel normalized to sum to one."""
    half = (kernel_size - 1) / 2.0
    t = np.arange(kernel_size) - half
    g = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _blur_matrix(side: int, kernel: np.ndarray) -> np.ndarray:
    ks = kernel.shape[0]
    offset = ks // 2
    p = side * side
    A = np.zeros((p, p))
    for r in range(side):
        for c in range(side):
            row = r * side + c
            for a in range(ks):
                for b in range(ks):
                    rr = (r + a - offset) % side
                    cc = (c + b - offset) % side
                    A[row, rr * side + cc] += kernel[a, b]
    return A


def _downsample_matrix(side: int, factor: int) -> np.ndarray:
    out_side = side // factor
    A = np.zeros((out_side * out_side, side * side))
    weight = 1.0 / (factor * factor)
    for r in range(out_side):
        for c in range(out_side):
            row = r * out_side + c
            for a in range(factor):
                for b in range(factor):
                    A[row, (r * factor + a) * side + c * factor + b] = weight
    return A


def build_forward_model(spec: ModelSpec) -> ForwardModel:
    """Construct the dense forward model described by ``spec``."""
    kind = ModelKind(spec.kind)
    if kind is ModelKind.INPAINTING:
        if spec.p is None or spec.observed is None:
            raise ValueError("inpainting needs p and observed")
        observed = list(spec.observed)
        if len(set(observed)) != len(observed):
            raise ValueError("duplicate observed indices")
        if any(i < 0 or i >= spec.p for i in observed):
            raise ValueError("observed index out of range")
        X = np.zeros((len(observed), spec.p))
        X[np.arange(len(observed)), observed] = 1.0
        return ForwardModel(X, kind, orthonormal_rows=True, spec=spec)

    if kind is ModelKind.GAUSSIAN_BLUR:
        if spec.boundary != "circular":
            raise ValueError(f"unsupported blur boundary {spec.boundary!r}")
        if spec.side is None or spec.kernel_size is None or spec.sigma is None:
            raise ValueError("gaussian_blur needs side, kernel_size and sigma")
        if spec.kernel_size < 1 or spec.kernel_size > spec.side:
            raise ValueError("kernel larger than image")
        if spec.sigma <= 0:
            raise ValueError("sigma must be positive")
        X = _blur_matrix(spec.side, gaussian_kernel(spec.kernel_size, spec.sigma))
        return ForwardModel(X, kind, orthonormal_rows=False, spec=spec)

    if kind is ModelKind.DOWNSAMPLE:
        if spec.filter != "box_average":
            raise ValueError(f"unsupported downsample filter {spec.filter!r}")
        if spec.side is None or spec.factor is None or spec.factor < 1:
            raise ValueError("downsample needs side and a positive factor")
        if spec.side % spec.factor:
            raise ValueError("factor must divide side")
        X = _downsample_matrix(spec.side, spec.factor)
        return ForwardModel(X, kind, orthonormal_rows=spec.factor == 1, spec=spec)

    if kind is ModelKind.GAUSSIAN_SENSING:
        if spec.m is None or spec.p is None or spec.seed is None:
            raise ValueError("gaussian_sensing needs m, p and seed")
        if spec.m < 1 or spec.p < 1:
            raise ValueError("dimensions must be positive")
        rng = np.random.default_rng(spec.seed)
        X = rng.normal(0.0, 1.0 / np.sqrt(spec.m), size=(spec.m, spec.p))
        if spec.row_orthonormalize:
            if spec.m > spec.p:
                raise ValueError("cannot orthonormalize more rows than columns")
            X = _gram_schmidt_rows(X)
        return ForwardModel(X, kind, orthonormal_rows=spec.row_orthonormalize, spec=spec)

    raise ValueError("custom models are built directly from a matrix")


def coordinate_restriction(p: int, m: int) -> ForwardModel:
    """The first ``m`` rows of the ``p x p`` identity."""
    return build_forward_model(ModelSpec.inpainting(p, range(m)))
