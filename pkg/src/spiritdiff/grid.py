"""Centered 2D Fourier transforms and k-space sampling masks.

Arrays are complex128 with shape ``(ncoils, ny, nx)``. DC sits at
``(ny // 2, nx // 2)`` and both directions use orthonormal scaling, so the
transform pair is unitary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    """Raised for non-finite inputs or shape disagreements."""


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise GridError(f"{what} contains non-finite entries")


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D FFT over the last two axes."""
    img = np.asarray(img)
    _check_finite(img, "image")
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(img, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    k = np.asarray(k)
    _check_finite(k, "k-space")
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(k, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


@dataclass(frozen=True)
class SamplingMask:
    """Binary Cartesian sampling pattern plus its fully sampled ACS block.

    ``acs`` is ``(row_start, row_stop, col_start, col_stop)`` with half-open
    extents.
    """

    keep: np.ndarray
    acs: tuple[int, int, int, int]

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        object.__setattr__(self, "keep", keep)
        if keep.ndim != 2:
            raise GridError(f"mask must be 2D, got shape {keep.shape}")
        r0, r1, c0, c1 = (int(v) for v in self.acs)
        object.__setattr__(self, "acs", (r0, r1, c0, c1))
        ny, nx = keep.shape
        if not (0 <= r0 <= r1 <= ny and 0 <= c0 <= c1 <= nx):
            raise GridError(f"ACS extents {self.acs} outside grid {keep.shape}")
        if not keep[r0:r1, c0:c1].all():
            raise GridError("ACS region is not fully sampled")

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape

    @property
    def acs_shape(self) -> tuple[int, int]:
        r0, r1, c0, c1 = self.acs
        return r1 - r0, c1 - c0

    def acceleration(self) -> float:
        """Ratio of grid points to sampled points."""
        n = int(self.keep.sum())
        return np.inf if n == 0 else self.keep.size / n

    @classmethod
    def full(cls, ny: int, nx: int) -> "SamplingMask":
        return cls(np.ones((ny, nx), dtype=bool), (0, ny, 0, nx))


def apply_mask(k: np.ndarray, m: SamplingMask) -> np.ndarray:
    """Zero every unsampled location; sampled entries pass through untouched."""
    k = np.asarray(k)
    if k.shape[-2:] != m.shape:
        raise GridError(f"k-space shape {k.shape} does not match mask {m.shape}")
    return np.where(m.keep, k, 0).astype(np.result_type(k, np.complex128))


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Complex inner product <a, b> = sum(conj(a) * b)."""
    return complex(np.vdot(a, b))


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric complex Gaussian with E|z|^2 = 1."""
    z = rng.standard_normal((*shape, 2)).view(np.complex128)[..., 0]
    z *= np.sqrt(0.5)
    return z
