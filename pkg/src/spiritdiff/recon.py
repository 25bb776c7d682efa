"""Reconstruction pipelines, baselines and image-quality metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .calibration import SpiritKernel
from .grid import SamplingMask, crandn, fft2c, ifft2c
from .operators import ImageKernel, SensitivityMaps, acquire_adjoint, dc_replace
from .sde import (
    CorrectorConfig,
    SamplerConfig,
    ScoreFn,
    SdeSchedule,
    apply_dc,
    sample_reverse,
)

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


class Recon(NamedTuple):
    coils: np.ndarray
    combined: np.ndarray
    info: dict


def _combine(s: SensitivityMaps | None, x: np.ndarray) -> np.ndarray:
    if s is None:
        return np.sqrt(np.sum(np.abs(x) ** 2, axis=-3))
    return s.combine(x)


def recon_zero_filled(y: np.ndarray, m: SamplingMask, s: SensitivityMaps | None) -> Recon:
    x = acquire_adjoint(y, m)
    return Recon(x, _combine(s, x), {})


# -------------------------------------------------------------- CG-SPIRiT

class CGNotConverged(UserWarning):
    pass


def recon_cg_spirit(
    y: np.ndarray, m: SamplingMask, ker: SpiritKernel | ImageKernel,
    n_iter: int = 50, lambda_reg: float = 0.0, tol: float = 1e-8,
    s: SensitivityMaps | None = None,
) -> Recon:
    """Minimize ``||(Phi - I) x_hat||^2 (+ lambda_reg ||u||^2)`` over unsampled k-space ``u``.

    Sampled entries stay equal to ``y``. Conjugate gradients on the normal
    equations; ``info["objective"]`` records ``||(Phi - I) x_hat||`` per iterate
    (non-increasing for ``lambda_reg = 0``), ``info["converged"]`` the
    stopping reason.
    """
    y = np.asarray(y, dtype=np.complex128)
    ik = ker if isinstance(ker, ImageKernel) else ImageKernel(ker, m.shape)
    free = ~m.keep
    D = ik.G - np.eye(ik.ncoils)[:, :, None, None]

    def resid(k):  # (Phi - I) k, evaluated in image space
        return np.einsum("ijyx,jyx->iyx", D, ifft2c(k))

    def normal(u):  # P^H F Psi F^-1 P u + lambda u
        k = np.where(free, u, 0)
        out = fft2c(np.einsum("ijyx,jyx->iyx", ik.P, ifft2c(k)))
        return np.where(free, out, 0) + lambda_reg * u

    y0 = np.where(m.keep, y, 0)
    b = -np.where(free, fft2c(np.einsum("ijyx,jyx->iyx", ik.P, ifft2c(y0))), 0)
    u = np.zeros_like(y0)
    r = b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    b_norm = np.sqrt(np.vdot(b, b).real)
    history = [float(np.linalg.norm(resid(y0)))]
    converged = b_norm == 0
    it = 0
    while not converged and it < n_iter:
        Ap = normal(p)
        alpha = rr / np.vdot(p, Ap).real
        u = u + alpha * p
        r = r - alpha * Ap
        rr_new = np.vdot(r, r).real
        it += 1
        history.append(float(np.linalg.norm(resid(y0 + u))))
        if np.sqrt(rr_new) <= tol * b_norm:
            converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not converged:
        warnings.warn(f"CG-SPIRiT stopped after {n_iter} iterations above tolerance", CGNotConverged)
    k = y0 + u
    x = ifft2c(k)
    xnorm = np.linalg.norm(k)
    info = {
        "objective": history,
        "relative_residual": [h / xnorm if xnorm else 0.0 for h in history],
        "iterations": it,
        "converged": converged,
    }
    return Recon(x, _combine(s, x), info)


# ----------------------------------------------------------------- VE-SDE

def ve_reverse_step(
    x: np.ndarray, t: float, dt: float, score: ScoreFn, sch: SdeSchedule,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse Euler-Maruyama step of ``dx = sqrt(beta) dw`` (no drift), per coil."""
    b = sch.beta(t)
    x_mean = x + b * score(x, t) * dt
    return x_mean + np.sqrt(b * dt) * crandn(rng, x.shape), x_mean


def ve_langevin(x, t, score, cfg: CorrectorConfig, rng):
    for _ in range(cfg.n_steps):
        g = score(x, t)
        z = crandn(rng, x.shape)
        g_norm = np.linalg.norm(g)
        if g_norm == 0:
            continue
        eps = 2 * (cfg.snr * np.linalg.norm(z) / g_norm) ** 2
        x = x + eps * g + np.sqrt(2 * eps) * z
    return x


def recon_vesde(
    y: np.ndarray, m: SamplingMask, score: ScoreFn, sch: SdeSchedule,
    rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig(),
    s: SensitivityMaps | None = None,
    callback: Callable[[float, np.ndarray], None] | None = None,
) -> Recon:
    """Coil-by-coil VE-SDE sampling with k-space data consistency.

    ``s`` is used only for the final coil combination.
    """
    if cfg.dc != "none" and not m.keep.any():
        raise ValueError("sampling mask is empty; nothing to be consistent with")
    ts = sch.time_grid(cfg.n_steps)
    x = acquire_adjoint(y, m)
    x = x + np.sqrt(sch.kernel_var(ts[0])) * crandn(rng, x.shape)
    if callback:
        callback(ts[0], x)
    nsteps = len(ts) - 1
    for k in range(nsteps):
        x_new, x_mean = ve_reverse_step(x, ts[k], ts[k] - ts[k + 1], score, sch, rng)
        last = k == nsteps - 1
        x = x_mean if (last and cfg.denoise) else x_new
        if cfg.corrector is not None and not last:
            x = ve_langevin(x, ts[k + 1], score, cfg.corrector, rng)
        x = apply_dc(x, y, m, cfg)
        if callback:
            callback(ts[k + 1], x)
    return Recon(x, _combine(s, x), {"steps": nsteps})


def recon_spirit_diffusion(
    y: np.ndarray, m: SamplingMask, ker: SpiritKernel | ImageKernel, s: SensitivityMaps,
    score: ScoreFn, sch: SdeSchedule, cfg: SamplerConfig, rng: np.random.Generator,
    callback: Callable[[float, np.ndarray], None] | None = None,
) -> Recon:
    x = sample_reverse(y, m, score, sch, ker, s, rng, cfg, callback=callback)
    return Recon(x, s.combine(x), {"steps": cfg.n_steps or sch.n_steps})


# ---------------------------------------------------------------- metrics

def psnr(a: np.ndarray, b: np.ndarray, peak: float | None = None) -> float:
    """PSNR of ``a`` against reference ``b``; identical inputs give ``PSNR_CAP``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak is None:
        peak = float(np.max(np.abs(b)))
    mse = float(np.mean(np.abs(a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak**2 / mse)))


def nrmse(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / ||b||``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ValueError("nrmse reference has zero norm")
    return float(np.linalg.norm(a - b) / nb)


def error_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``|a - b|`` scaled to ``[0, 1]`` by its maximum (all zeros if identical)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    e = np.abs(a - b)
    mx = e.max(initial=0.0)
    return e / mx if mx > 0 else np.zeros_like(e, dtype=float)
