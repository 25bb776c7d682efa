"""Score functions: the exact score of a Gaussian prior and a linear score
model fitted by denoising score matching (DSM).

Both return Wirtinger gradients (see :mod:`spiritdiff.sde`). Variances are
complex, ``E|x - mean|^2`` per pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .grid import crandn
from .operators import SensitivityMaps, q_project
from .sde import ScoreFn, SdeSchedule, perturb

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"prior variance must be > 0, got {self.var}")

    def score_fn(self, sch: SdeSchedule, s: SensitivityMaps | None = None) -> ScoreFn:
        return lambda x, t: gaussian_score(self, sch, x, t, s)


def gaussian_score(
    p: GaussianPrior, sch: SdeSchedule, x: np.ndarray, t: float, s: SensitivityMaps | None = None
) -> np.ndarray:
    """Marginal score of ``N(mean, var)`` diffused to time ``t``, restricted to range(Q)."""
    return -q_project(s, x - p.mean) / (p.var + sch.kernel_var(t))


def fit_gaussian_prior(samples: np.ndarray) -> GaussianPrior:
    """Moment-match a Gaussian prior to a stack of coil images ``(n, nc, ny, nx)``."""
    samples = np.asarray(samples)
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples to estimate a variance")
    mean = samples.mean(axis=0)
    var = float(np.mean(np.abs(samples - mean) ** 2) * samples.shape[0] / (samples.shape[0] - 1))
    return GaussianPrior(mean, var)


@dataclass
class LinearScoreModel:
    """``score(x, t) = a[bin(t)] * x + b[bin(t)] * mean_est`` with uniform time bins."""

    a: np.ndarray
    b: np.ndarray
    mean_est: np.ndarray
    t_min: float = 1e-3
    T: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError("coefficient tables must be 1D and of equal length")

    @property
    def n_bins(self) -> int:
        return self.a.size

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.t_min, self.T, self.n_bins + 1)

    def bin_of(self, t) -> np.ndarray:
        idx = np.floor((np.asarray(t) - self.t_min) / (self.T - self.t_min) * self.n_bins)
        return np.clip(idx.astype(int), 0, self.n_bins - 1)

    def __call__(self, x: np.ndarray, t) -> np.ndarray:
        k = self.bin_of(t)
        a, b = self.a[k], self.b[k]
        if np.ndim(t):
            a = a.reshape(-1, *([1] * (x.ndim - 1)))
            b = b.reshape(-1, *([1] * (x.ndim - 1)))
        return a * x + b * self.mean_est

    @classmethod
    def zeros(cls, mean_est: np.ndarray, n_bins: int = 10, t_min: float = 1e-3, T: float = 1.0):
        return cls(np.zeros(n_bins), np.zeros(n_bins), np.asarray(mean_est), t_min, T)


def _dsm_residual(model, x0, t, sch, s, rng, noise=True):
    x0 = np.asarray(x0)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x0.shape[0],))
    if np.any(t < sch.t_min):
        raise ValueError(f"t below t_min={sch.t_min}; kernel score is singular there")
    kv = np.array([sch.kernel_var(ti) for ti in t])
    shp = (-1,) + (1,) * (x0.ndim - 1)
    if noise:
        xt = x0 + np.sqrt(kv).reshape(shp) * q_project(s, crandn(rng, x0.shape))
    else:
        xt = x0.copy()
    target = -q_project(s, xt - x0) / kv.reshape(shp)
    return model(xt, t) - target, xt, kv


def dsm_loss(
    model: LinearScoreModel, x0: np.ndarray, t, sch: SdeSchedule, s: SensitivityMaps | None,
    rng: np.random.Generator, noise: bool = True,
) -> float:
    """Variance-weighted DSM loss, averaged over batch and entries.

    ``x0`` is a batch ``(n, nc, ny, nx)``; ``t`` a scalar or one time per item.
    ``noise=False`` forces ``x(t) = x0`` (test hook).
    """
    x0 = np.asarray(x0)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    r, _, kv = _dsm_residual(model, x0, t, sch, s, rng, noise)
    per = np.mean(np.abs(r) ** 2, axis=tuple(range(1, r.ndim)))
    return float(np.mean(kv * per))


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_bins: int = 10
    epochs: int = 400
    lr: float = 0.5
    seed: int = 0
    average_last: float = 0.25  # fraction of epochs whose iterates are averaged
    patience: int = 50


@dataclass
class TrainResult:
    model: LinearScoreModel
    losses: list = field(default_factory=list)


def train_dsm(
    data: np.ndarray, sch: SdeSchedule, s: SensitivityMaps | None, cfg: TrainConfig = TrainConfig()
) -> TrainResult:
    """Fit a :class:`LinearScoreModel` by gradient descent on the DSM loss.

    Every epoch redraws one time per sample inside each bin and fresh
    perturbation noise, then takes a step of size ``lr / L`` per bin, ``L``
    being the largest curvature of that bin's quadratic loss. Iterates from
    the final ``average_last`` fraction of epochs are averaged.
    """
    data = np.asarray(data, dtype=np.complex128)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("data must be a non-empty stack (n, ncoils, ny, nx)")
    rng = np.random.default_rng(cfg.seed)
    mean_est = data.mean(axis=0)
    model = LinearScoreModel.zeros(mean_est, cfg.n_bins, sch.t_min, sch.T)
    edges = model.edges
    n = data.shape[0]
    n_avg = max(1, int(round(cfg.epochs * cfg.average_last)))
    a_sum = np.zeros(cfg.n_bins)
    b_sum = np.zeros(cfg.n_bins)
    losses = []
    rising = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for k in range(cfg.n_bins):
            t = rng.uniform(edges[k], edges[k + 1], size=n)
            r, xt, kv = _dsm_residual(model, data, t, sch, s, rng)
            w = kv.reshape(-1, 1, 1, 1) / r[0].size / n
            total += float(np.sum(w * np.abs(r) ** 2))
            ga = 2 * np.sum(w * np.real(np.conj(r) * xt))
            gb = 2 * np.sum(w * np.real(np.conj(r) * mean_est))
            h_aa = 2 * np.sum(w * np.abs(xt) ** 2)
            h_bb = 2 * np.sum(w * np.abs(mean_est) ** 2)
            h_ab = 2 * np.sum(w * np.real(np.conj(xt) * mean_est))
            L = np.linalg.eigvalsh(np.array([[h_aa, h_ab], [h_ab, h_bb]]))[-1]
            model.a[k] -= cfg.lr / L * ga
            model.b[k] -= cfg.lr / L * gb
        total /= cfg.n_bins
        if not np.isfinite(total):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        rising = rising + 1 if losses and total > losses[-1] else 0
        if rising >= cfg.patience:
            raise TrainingDivergedError(
                f"loss rose for {rising} consecutive epochs (epoch {epoch}, loss {total:.4g}, "
                f"a={model.a.tolist()})"
            )
        losses.append(total)
        if epoch >= cfg.epochs - n_avg:
            a_sum += model.a
            b_sum += model.b
    model.a = a_sum / n_avg
    model.b = b_sum / n_avg
    log.info("DSM training done: final loss %.5g", losses[-1])
    return TrainResult(model, losses)


def dsm_bin_optimum(sch: SdeSchedule, var: float, lo: float, hi: float, n: int = 2001) -> float:
    """Exact minimizer of the bin-averaged DSM loss for the ``x`` coefficient.

    Data ``N(mean, var)`` in range(Q), uniform ``t`` on ``[lo, hi]``, weight
    ``kernel_var``: ``a* = -E[kv] / E[kv (var + kv)]``.
    """
    ts = np.linspace(lo, hi, n)
    kv = np.array([sch.kernel_var(t) for t in ts])
    return float(-simpson(kv, x=ts) / simpson(kv * (var + kv), x=ts))
