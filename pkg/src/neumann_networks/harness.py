"""Datasets, metrics, regularizer diagnostics and small experiment drivers."""

from __future__ import annotations

import dataclasses
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from neumann_networks import learned, linops, oracle
from neumann_networks.errors import DimensionError, DivergenceError
from neumann_networks.estimators import EstimatorConfig, Regularizer, estimate
from neumann_networks.linops import ForwardModel
from neumann_networks.oracle import UnionOfSubspaces

PSNR_CAP = 300.0


def max_workers() -> int:
    """Thread cap from ``NEUMANN_THREADS`` (default: all cores)."""
    value = os.environ.get("NEUMANN_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


@dataclasses.dataclass
class Dataset:
    betas: np.ndarray
    ys: np.ndarray
    provenance: dict
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.betas)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.betas, self.ys))

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        def part(sl, name):
            labels = None if self.labels is None else self.labels[sl]
            return Dataset(self.betas[sl], self.ys[sl], {**self.provenance, "split": name}, labels)
        return part(slice(0, n_train), "train"), part(slice(n_train, None), "test")


def _add_noise(model: ForwardModel, betas: np.ndarray, sigma: float,
               rng: np.random.Generator) -> np.ndarray:
    ys = linops.apply(model, betas).reshape(len(betas), model.m)
    if sigma > 0:
        ys = ys + sigma * rng.standard_normal(ys.shape)
    return ys


def gen_uos_dataset(uos: UnionOfSubspaces, model: ForwardModel, N: int, noise_sigma: float,
                    seed: int, uos_seed: int | None = None) -> Dataset:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if uos.p != model.p:
        raise DimensionError("subspaces and forward model disagree on p")
    rng = np.random.default_rng(seed)
    betas, labels = oracle.sample_points(uos, N, rng)
    ys = _add_noise(model, betas, noise_sigma, rng)
    prov = {"source": "uos", "p": uos.p, "r": uos.r, "K": uos.K, "uos_seed": uos_seed,
            "N": N, "noise_sigma": noise_sigma, "seed": seed,
            "model": None if model.spec is None else model.spec.to_dict()}
    return Dataset(betas, ys, prov, labels)


@dataclasses.dataclass(frozen=True)
class ImageSpec:
    """Synthetic grayscale images in ``[0, 1]``.

    ``kind="blocks"`` paints ``blocks - 1`` random axis-aligned rectangles
    over a constant background, so an image has at most ``blocks`` distinct
    values. ``kind="smooth"`` low-pass filters white noise (circularly)
    and rescales it to ``[0, 1]``.
    """

    side: int = 8
    kind: str = "blocks"
    blocks: int = 4
    smoothness: float = 1.5

    def __post_init__(self):
        if self.side not in (8, 16, 32):
            raise ValueError("side must be 8, 16 or 32")
        if self.kind not in ("blocks", "smooth"):
            raise ValueError(f"unknown image kind {self.kind!r}")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _block_image(spec: ImageSpec, rng: np.random.Generator) -> np.ndarray:
    img = np.full((spec.side, spec.side), rng.uniform())
    for _ in range(spec.blocks - 1):
        r0, r1 = np.sort(rng.integers(0, spec.side + 1, size=2))
        c0, c1 = np.sort(rng.integers(0, spec.side + 1, size=2))
        img[r0:max(r1, r0 + 1), c0:max(c1, c0 + 1)] = rng.uniform()
    return img


def _smooth_image(spec: ImageSpec, rng: np.random.Generator) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((spec.side, spec.side)), spec.smoothness,
                            mode="wrap")
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)


def synthetic_images(spec: ImageSpec, N: int, rng: np.random.Generator) -> np.ndarray:
    make = _block_image if spec.kind == "blocks" else _smooth_image
    return np.array([make(spec, rng).ravel() for _ in range(N)]).reshape(N, spec.side ** 2)


def gen_image_dataset(spec: ImageSpec, model: ForwardModel, N: int, noise_sigma: float,
                      seed: int) -> Dataset:
    if model.p != spec.side ** 2:
        raise DimensionError("image size does not match the forward model")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    betas = synthetic_images(spec, N, rng)
    ys = _add_noise(model, betas, noise_sigma, rng)
    prov = {"source": "images", "image": spec.to_dict(), "N": N, "noise_sigma": noise_sigma,
            "seed": seed, "model": None if model.spec is None else model.spec.to_dict()}
    return Dataset(betas, ys, prov)


def psnr(estimate_: np.ndarray, truth: np.ndarray, peak: float = 1.0):
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP``; row-wise for batches."""
    estimate_ = np.asarray(estimate_, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate_.shape != truth.shape:
        raise DimensionError("estimate and truth differ in shape")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((estimate_ - truth) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        value = np.where(mse > 0, 10.0 * np.log10(peak ** 2 / np.where(mse > 0, mse, 1.0)),
                         PSNR_CAP)
    value = np.minimum(value, PSNR_CAP)
    return float(value) if np.ndim(value) == 0 else value


def _normalize_rows(x: np.ndarray, scale: float) -> np.ndarray:
    return scale * x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclasses.dataclass
class LinearityReport:
    same: np.ndarray
    different: np.ndarray
    gaussian: np.ndarray

    @property
    def medians(self) -> dict[str, float]:
        return {"same": float(np.median(self.same)),
                "different": float(np.median(self.different)),
                "gaussian": float(np.median(self.gaussian))}


def piecewise_linearity_test(R: Regularizer, uos: UnionOfSubspaces, model: ForwardModel,
                             gamma: float = 0.25, trials: int = 1024,
                             seed: int = 0) -> LinearityReport:
    """Additivity error ``||R(a + b) - R(a) - R(b)|| / gamma`` for three pairings.

    ``a`` and ``b`` are rescaled to norm ``gamma`` and drawn from the same
    subspace, from two different subspaces, or as Gaussian vectors.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    rng = np.random.default_rng(seed)
    stacked = np.stack(uos.bases)

    def from_labels(labels):
        w = rng.standard_normal((len(labels), uos.r))
        return np.einsum("npr,nr->np", stacked[labels], w)

    def err(a, b):
        a, b = _normalize_rows(a, gamma), _normalize_rows(b, gamma)
        return np.linalg.norm(R(a + b) - R(a) - R(b), axis=1) / gamma

    k_same = rng.integers(0, uos.K, size=trials)
    same = err(from_labels(k_same), from_labels(k_same))
    if uos.K > 1:
        k1 = rng.integers(0, uos.K, size=trials)
        k2 = (k1 + rng.integers(1, uos.K, size=trials)) % uos.K
        different = err(from_labels(k1), from_labels(k2))
    else:
        different = np.full(trials, np.nan)
    gaussian = err(rng.standard_normal((trials, uos.p)), rng.standard_normal((trials, uos.p)))
    return LinearityReport(same, different, gaussian)


@dataclasses.dataclass
class SubspaceResponseReport:
    scales: np.ndarray
    row_median: np.ndarray
    null_median: np.ndarray
    row_iqr: np.ndarray
    null_iqr: np.ndarray
    c: float

    def to_csv(self) -> str:
        lines = ["scale,row_median,null_median,row_q25,row_q75,null_q25,null_q75"]
        for s, rm, nm, ri, ni in zip(self.scales, self.row_median, self.null_median,
                                     self.row_iqr, self.null_iqr):
            lines.append(f"{s!r},{rm!r},{nm!r},{ri[0]!r},{ri[1]!r},{ni[0]!r},{ni[1]!r}")
        return "\n".join(lines) + "\n"


def rowspace_nullspace_test(R: Regularizer, model: ForwardModel, uos: UnionOfSubspaces,
                            scales: Sequence[float], trials: int, seed: int, eta: float,
                            blocks: int) -> SubspaceResponseReport:
    """Compare ``R`` with the analytic responses on row-space and null-space inputs.

    For ``beta`` in the union with ``||beta|| = s`` the ideal regularizer
    satisfies ``R(P_X beta) = -c P_null beta`` and ``R(P_null beta) = 0``; the
    reported errors are the deviations from these, divided by ``s``.
    """
    c = oracle.c_const(eta, blocks)
    G = model.gram_matrix()
    P_null = np.eye(model.p) - G
    rng = np.random.default_rng(seed)
    rows, nulls, row_q, null_q = [], [], [], []
    for s in scales:
        betas, _ = oracle.sample_points(uos, trials, rng)
        betas = _normalize_rows(betas, s)
        row_in = betas @ G.T
        null_in = betas @ P_null.T
        row_err = np.linalg.norm(R(row_in) + c * null_in, axis=1) / s
        null_err = np.linalg.norm(R(null_in), axis=1) / s
        rows.append(np.median(row_err))
        nulls.append(np.median(null_err))
        row_q.append(np.percentile(row_err, [25, 75]))
        null_q.append(np.percentile(null_err, [25, 75]))
    return SubspaceResponseReport(np.asarray(scales, float), np.array(rows), np.array(nulls),
                                  np.array(row_q), np.array(null_q), c)


def zero_rowspace_baseline(model: ForwardModel, uos: UnionOfSubspaces, scales, trials, seed,
                           eta, blocks) -> np.ndarray:
    """Median row-space error of ``R = 0``, i.e. ``c ||P_null beta|| / s``."""
    from neumann_networks.estimators import ZeroRegularizer
    return rowspace_nullspace_test(ZeroRegularizer(), model, uos, scales, trials, seed,
                                   eta, blocks).row_median


def filter_normalize(direction: np.ndarray, theta_hat: np.ndarray,
                     arch: learned.MLPArch) -> np.ndarray:
    """Rescale each weight row (one per neuron) and each bias vector of ``direction``
    to the norm of the matching block of ``theta_hat``."""
    d = np.array(direction, dtype=np.float64)
    for (w_sl, b_sl), (o, i) in zip(arch.slices(), arch.shapes):
        D = d[w_sl].reshape(o, i)
        W = theta_hat[w_sl].reshape(o, i)
        dn = np.linalg.norm(D, axis=1, keepdims=True)
        D *= np.linalg.norm(W, axis=1, keepdims=True) / np.where(dn > 0, dn, 1.0)
        d[w_sl] = D.ravel()
        bn = np.linalg.norm(d[b_sl])
        d[b_sl] *= np.linalg.norm(theta_hat[b_sl]) / (bn if bn > 0 else 1.0)
    return d


@dataclasses.dataclass
class LandscapeSlice:
    grids: dict[str, np.ndarray]
    tau: float
    half_extent: int
    seed: int
    directions: tuple[np.ndarray, np.ndarray]

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.half_extent, self.half_extent + 1)

    def value(self, name: str, i: int, j: int) -> float:
        h = self.half_extent
        return float(self.grids[name][i + h, j + h])

    def to_csv(self) -> str:
        names = list(self.grids)
        buf = io.StringIO()
        buf.write(",".join(["i", "j", *[f"loss_{n}" for n in names]]) + "\n")
        for a, i in enumerate(self.offsets):
            for b, j in enumerate(self.offsets):
                vals = ",".join(repr(float(self.grids[n][a, b])) for n in names)
                buf.write(f"{i},{j},{vals}\n")
        return buf.getvalue()

    def metadata(self) -> dict:
        return {"tau": self.tau, "half_extent": self.half_extent, "seed": self.seed,
                "grid_size": 2 * self.half_extent + 1, "columns": list(self.grids)}


def landscape_slice(loss_fn: Callable[[np.ndarray], float] | Mapping[str, Callable],
                    theta_hat: np.ndarray | learned.ParamVector, arch: learned.MLPArch,
                    tau: float = 0.01, half_extent: int = 25, seed: int = 0,
                    workers: int | None = None) -> LandscapeSlice:
    """Evaluate losses on the plane ``theta_hat + tau (i v1 + j v2)``.

    ``v1`` and ``v2`` are standard normal directions over the network
    weights, filter-normalized against ``theta_hat``. The step size (if a
    ParamVector is given) is held at its trained value. Evaluations that
    diverge are stored as NaN.
    """
    if half_extent < 1:
        raise ValueError("half_extent must be >= 1")
    if isinstance(theta_hat, learned.ParamVector):
        theta_hat = theta_hat.theta
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    fns = dict(loss_fn) if isinstance(loss_fn, Mapping) else {"loss": loss_fn}
    rng = np.random.default_rng(seed)
    v1 = filter_normalize(rng.standard_normal(theta_hat.size), theta_hat, arch)
    v2 = filter_normalize(rng.standard_normal(theta_hat.size), theta_hat, arch)
    offsets = np.arange(-half_extent, half_extent + 1)
    points = [(a, b) for a in range(offsets.size) for b in range(offsets.size)]

    def evaluate(point):
        a, b = point
        if offsets[a] == 0 and offsets[b] == 0:
            theta = theta_hat
        else:
            theta = theta_hat + tau * (offsets[a] * v1 + offsets[b] * v2)
        out = []
        for fn in fns.values():
            try:
                val = float(fn(theta))
            except (DivergenceError, FloatingPointError):
                val = np.nan
            out.append(val if np.isfinite(val) else np.nan)
        return out

    n_workers = workers or max_workers()
    with np.errstate(all="ignore"):
        if n_workers > 1:
            with ThreadPoolExecutor(n_workers) as pool:
                values = list(pool.map(evaluate, points))
        else:
            values = [evaluate(pt) for pt in points]
    grids = {name: np.empty((offsets.size, offsets.size)) for name in fns}
    for (a, b), vals in zip(points, values):
        for name, val in zip(fns, vals):
            grids[name][a, b] = val
    return LandscapeSlice(grids, tau, half_extent, seed, (v1, v2))


@dataclasses.dataclass
class LearnedSource:
    """Regularizer to be trained: architecture plus training settings."""

    arch: learned.MLPArch
    train: learned.TrainConfig


@dataclasses.dataclass
class ComparisonEntry:
    name: str
    config: EstimatorConfig
    source: Regularizer | LearnedSource


@dataclasses.dataclass
class ExperimentRecord:
    rows: list[dict]
    metadata: dict
    trials: dict[str, np.ndarray]

    def to_csv(self) -> str:
        cols = ["name", "variant", "blocks", "eta", "lam", "source", "median_psnr",
                "mean_psnr", "mse"]
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(str(row[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "rows": self.rows}, indent=2,
                          sort_keys=True)

    def psnr_of(self, name: str) -> float:
        return next(r["median_psnr"] for r in self.rows if r["name"] == name)


def evaluate_regularizer(model: ForwardModel, R: Regularizer, cfg: EstimatorConfig,
                         test: Dataset, peak: float = 1.0) -> tuple[np.ndarray, float]:
    est = estimate(model, R, cfg, test.ys)
    est = est.reshape(test.betas.shape)
    values = psnr(est, test.betas, peak)
    mse = float(np.mean(np.sum((est - test.betas) ** 2, axis=1)))
    return np.atleast_1d(values), mse


def run_comparison(model: ForwardModel, entries: Sequence[ComparisonEntry], dataset: Dataset,
                   n_train: int, peak: float = 1.0) -> ExperimentRecord:
    """Train or construct each entry on the first ``n_train`` pairs and score the rest."""
    train_set, test_set = dataset.split(n_train)
    if len(test_set) == 0:
        raise ValueError("no held-out data left for evaluation")
    rows, trials = [], {}
    for entry in entries:
        cfg = entry.config
        if isinstance(entry.source, LearnedSource):
            tcfg = dataclasses.replace(entry.source.train, estimator=cfg)
            params, _ = learned.train(model, entry.source.arch, train_set, tcfg)
            R: Regularizer = learned.MLPRegularizer(entry.source.arch, params.theta)
            cfg = cfg.replace(eta=params.eta) if cfg.variant.value != "PNN" else cfg
            source = "LearnedMLP"
        else:
            R = entry.source
            source = R.tag
        values, mse = evaluate_regularizer(model, R, cfg, test_set, peak)
        trials[entry.name] = values
        rows.append({"name": entry.name, "variant": cfg.variant.value, "blocks": cfg.blocks,
                     "eta": cfg.eta, "lam": cfg.lam, "source": source,
                     "median_psnr": float(np.median(values)),
                     "mean_psnr": float(np.mean(values)), "mse": mse})
    meta = {"n_train": n_train, "n_test": len(test_set), "peak": peak,
            "dataset": dataset.provenance}
    return ExperimentRecord(rows, meta, trials)
