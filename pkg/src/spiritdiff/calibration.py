"""SPIRiT kernel calibration from the autocalibration (ACS) block.

A kernel ``weights[i, j, dy, dx]`` predicts the sample of coil ``i`` at
k-space location ``p`` from coil ``j`` at ``p + (dy - kh//2, dx - kw//2)``.
The self tap ``weights[i, i, kh//2, kw//2]`` is always zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import SamplingMask


class CalibrationError(ValueError):
    """ACS too small for the requested kernel, or a malformed kernel."""


class IllConditionedError(CalibrationError):
    """Rank-deficient calibration system solved without regularization."""


@dataclass(frozen=True)
class SpiritKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.complex128)
        object.__setattr__(self, "weights", w)
        if w.ndim != 4 or w.shape[0] != w.shape[1]:
            raise CalibrationError(f"kernel must be (nc, nc, kh, kw), got {w.shape}")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise CalibrationError(f"kernel size must be odd, got {w.shape[2:]}")

    @property
    def ncoils(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def center(self) -> tuple[int, int]:
        kh, kw = self.size
        return kh // 2, kw // 2

    @classmethod
    def zeros(cls, ncoils: int, kh: int = 5, kw: int = 5) -> "SpiritKernel":
        return cls(np.zeros((ncoils, ncoils, kh, kw), dtype=np.complex128))


def extract_acs(k: np.ndarray, m: SamplingMask, kernel_size=(5, 5)) -> np.ndarray:
    """Copy out the fully sampled ACS block of ``k``.

    Each ACS extent must be at least one larger than the kernel in that axis.
    """
    kh, kw = kernel_size
    ah, aw = m.acs_shape
    if ah < kh + 1 or aw < kw + 1:
        raise CalibrationError(
            f"ACS block {ah}x{aw} too small for a {kh}x{kw} kernel (need >= {kh + 1}x{kw + 1})"
        )
    r0, r1, c0, c1 = m.acs
    return np.array(k[..., r0:r1, c0:c1], dtype=np.complex128)


def calibration_system(acs: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """All kernel-sized ACS patches, stride 1.

    Returns an array of shape ``(npatch, ncoils * kh * kw)``; column
    ``(j * kh + dy) * kw + dx`` holds coil ``j`` at patch offset ``(dy, dx)``.
    """
    acs = np.asarray(acs, dtype=np.complex128)
    nc = acs.shape[0]
    win = sliding_window_view(acs, (kh, kw), axis=(1, 2))  # (nc, py, px, kh, kw)
    return win.transpose(1, 2, 0, 3, 4).reshape(-1, nc * kh * kw)


def calibrate(
    acs: np.ndarray,
    kh: int = 5,
    kw: int = 5,
    tik: float | None = None,
    lambda_rel: float = 0.01,
) -> SpiritKernel:
    """Fit SPIRiT weights by Tikhonov-regularized least squares.

    For every target coil ``i`` this solves
    ``min ||A w - b||^2 + tik^2 ||w||^2`` where the rows of ``A`` are ACS
    patches with the coil-``i`` center removed and ``b`` holds those centers.

    Parameters
    ----------
    acs
        Fully sampled calibration block, ``(ncoils, ah, aw)``.
    kh, kw
        Odd kernel extents.
    tik
        Absolute regularization. ``None`` means ``lambda_rel * ||A||_F``.
    lambda_rel
        Relative regularization used when ``tik`` is ``None``.

    Raises
    ------
    IllConditionedError
        If ``tik == 0`` and a target system is rank deficient.
    """
    if kh % 2 == 0 or kw % 2 == 0:
        raise CalibrationError(f"kernel size must be odd, got {kh}x{kw}")
    acs = np.asarray(acs, dtype=np.complex128)
    nc, ah, aw = acs.shape
    if ah < kh or aw < kw:
        raise CalibrationError(f"ACS block {ah}x{aw} smaller than kernel {kh}x{kw}")
    A_full = calibration_system(acs, kh, kw)
    nunk = nc * kh * kw - 1
    if A_full.shape[0] < nunk:
        raise CalibrationError(
            f"{A_full.shape[0]} calibration equations for {nunk} unknowns; enlarge the ACS"
        )
    if tik is None:
        tik = lambda_rel * np.linalg.norm(A_full)
    if tik < 0:
        raise CalibrationError("tik must be non-negative")

    ch, cw = kh // 2, kw // 2
    weights = np.zeros((nc, nc * kh * kw), dtype=np.complex128)
    for i in range(nc):
        col = (i * kh + ch) * kw + cw
        b = A_full[:, col]
        A = np.delete(A_full, col, axis=1)
        weights[i] = np.insert(_tikhonov_lstsq(A, b, tik), col, 0.0)
    return SpiritKernel(weights.reshape(nc, nc, kh, kw))


def _tikhonov_lstsq(A: np.ndarray, b: np.ndarray, tik: float) -> np.ndarray:
    n = A.shape[1]
    if tik == 0:
        w, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        if rank < n:
            raise IllConditionedError(
                f"calibration matrix has rank {rank} < {n} unknowns; supply tik > 0"
            )
        return w
    A_aug = np.vstack([A, tik * np.eye(n)])
    b_aug = np.concatenate([b, np.zeros(n, dtype=b.dtype)])
    return np.linalg.lstsq(A_aug, b_aug, rcond=None)[0]


def calibration_residual(ker: SpiritKernel, acs: np.ndarray) -> float:
    """Relative residual ||A w - b|| / ||b|| stacked over all target coils."""
    kh, kw = ker.size
    A = calibration_system(acs, kh, kw)
    nc = ker.ncoils
    ch, cw = ker.center
    W = ker.weights.reshape(nc, -1)
    pred = A @ W.T
    cols = [(i * kh + ch) * kw + cw for i in range(nc)]
    b = A[:, cols]
    return float(np.linalg.norm(pred - b) / np.linalg.norm(b))


def kernel_adjoint(ker: SpiritKernel) -> SpiritKernel:
    """Weights of the adjoint convolution (coil indices swapped, taps reversed, conjugated)."""
    w = ker.weights
    return SpiritKernel(np.conj(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).copy())
