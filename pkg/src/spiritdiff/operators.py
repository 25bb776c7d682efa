"""Linear operators: SPIRiT interpolation (Phi), its image-domain normal
operator (Psi), the coil-redundancy projection (Q), and acquisition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import SpiritKernel
from .grid import GridError, SamplingMask, apply_mask, fft2c, ifft2c


# ---------------------------------------------------------------- Phi / Psi

def phi_kspace(ker: SpiritKernel, k: np.ndarray) -> np.ndarray:
    """Circular k-space convolution: ``out_i[p] = sum_j sum_o w[i,j,o] k_j[p+o]``."""
    k = np.asarray(k)
    nc = ker.ncoils
    if k.shape[-3] != nc:
        raise GridError(f"k-space has {k.shape[-3]} coils, kernel expects {nc}")
    kh, kw = ker.size
    ch, cw = ker.center
    out = np.zeros(k.shape, dtype=np.complex128)
    for dy in range(kh):
        for dx in range(kw):
            w = ker.weights[:, :, dy, dx]
            if not w.any():
                continue
            shifted = np.roll(k, (ch - dy, cw - dx), axis=(-2, -1))
            out += np.einsum("ij,...jyx->...iyx", w, shifted)
    return out


class ImageKernel:
    """Per-pixel coil-mixing matrices equivalent to a SPIRiT kernel.

    ``G[:, :, y, x]`` is the image-domain form of Phi at one pixel and
    ``P = (G - I)^H (G - I)`` the one of Psi. Immutable after construction.
    """

    def __init__(self, ker: SpiritKernel, shape: tuple[int, int]):
        ny, nx = shape
        kh, kw = ker.size
        if kh > ny or kw > nx:
            raise GridError(f"kernel {kh}x{kw} larger than grid {ny}x{nx}")
        nc = ker.ncoils
        pad = np.zeros((nc, nc, ny, nx), dtype=np.complex128)
        y0 = ny // 2 - kh // 2
        x0 = nx // 2 - kw // 2
        # correlation in k-space is convolution with the flipped taps
        pad[:, :, y0:y0 + kh, x0:x0 + kw] = ker.weights[:, :, ::-1, ::-1]
        G = ifft2c(pad) * np.sqrt(ny * nx)
        D = G - np.eye(nc)[:, :, None, None]
        P = np.einsum("kiyx,kjyx->ijyx", D.conj(), D)
        G.setflags(write=False)
        P.setflags(write=False)
        self.shape = (ny, nx)
        self.ncoils = nc
        self.G = G
        self.P = P

    @property
    def lambda_max(self) -> float:
        """Largest eigenvalue of Psi, the spectral radius of the Psi drift."""
        if not hasattr(self, "_lmax"):
            Pm = np.moveaxis(self.P, (0, 1), (-2, -1))
            self._lmax = float(np.linalg.eigvalsh(Pm).max())
        return self._lmax

    def check(self, x: np.ndarray) -> None:
        if x.shape[-2:] != self.shape or x.shape[-3] != self.ncoils:
            raise GridError(
                f"image shape {x.shape[-3:]} does not match kernel cache "
                f"{(self.ncoils, *self.shape)}"
            )


def _image_kernel(ker, x: np.ndarray) -> ImageKernel:
    if isinstance(ker, ImageKernel):
        ik = ker
    else:
        ik = ImageKernel(ker, x.shape[-2:])
    ik.check(x)
    return ik


def phi_image(ker: SpiritKernel | ImageKernel, x: np.ndarray) -> np.ndarray:
    """Image-domain Phi, ``F^-1 Phi F x``, as a per-pixel matrix multiply."""
    x = np.asarray(x)
    ik = _image_kernel(ker, x)
    return np.einsum("ijyx,...jyx->...iyx", ik.G, x)


def psi(ker: SpiritKernel | ImageKernel, x: np.ndarray) -> np.ndarray:
    """``F^-1 (Phi - I)^H (Phi - I) F x``; Hermitian positive semidefinite."""
    x = np.asarray(x)
    ik = _image_kernel(ker, x)
    return np.einsum("ijyx,...jyx->...iyx", ik.P, x)


# ---------------------------------------------------------------------- Q

@dataclass(frozen=True)
class SensitivityMaps:
    """Coil sensitivities normalized to unit l2 norm per pixel on the support.

    ``norm`` keeps the per-pixel coil-vector norm before normalization.
    Off-support pixels (zero norm) have all coils zero.
    """

    maps: np.ndarray
    norm: np.ndarray

    @classmethod
    def from_raw(cls, raw: np.ndarray, support: np.ndarray | None = None) -> "SensitivityMaps":
        raw = np.asarray(raw, dtype=np.complex128)
        if not np.all(np.isfinite(raw)):
            raise GridError("raw sensitivities contain non-finite entries")
        norm = np.sqrt(np.sum(np.abs(raw) ** 2, axis=0))
        on = norm > 0
        if support is not None:
            on &= np.asarray(support, dtype=bool)
        maps = np.zeros_like(raw)
        np.divide(raw, norm, out=maps, where=on[None])
        return cls(maps, np.where(on, norm, 0.0))

    @classmethod
    def unit(cls, ny: int, nx: int) -> "SensitivityMaps":
        """Single coil, map identically one."""
        return cls(np.ones((1, ny, nx), dtype=np.complex128), np.ones((ny, nx)))

    @property
    def ncoils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]

    @property
    def support(self) -> np.ndarray:
        return self.norm > 0

    def combine(self, x: np.ndarray) -> np.ndarray:
        """Sensitivity-weighted coil combination ``sum_i conj(s_i) x_i``."""
        x = np.asarray(x)
        if x.shape[-3:] != self.maps.shape:
            raise GridError(f"image shape {x.shape[-3:]} does not match maps {self.maps.shape}")
        return np.sum(self.maps.conj() * x, axis=-3)

    def expand(self, m: np.ndarray) -> np.ndarray:
        """Coil images ``s_i * m`` of a single image ``m``."""
        return self.maps * np.asarray(m)[..., None, :, :]


def q_project(s: SensitivityMaps | None, x: np.ndarray) -> np.ndarray:
    """Coil-redundancy projection ``s_i * sum_j conj(s_j) x_j``.

    ``s=None`` stands for the identity projection (coil-by-coil processing).
    """
    if s is None:
        return np.asarray(x)
    return s.expand(s.combine(x))


def self_consistency_residual(ker: SpiritKernel, s: SensitivityMaps, z: np.ndarray) -> float:
    """``||(Phi - I) F Q z|| / ||F Q z||``, zero for a vanishing projection."""
    kq = fft2c(q_project(s, z))
    den = np.linalg.norm(kq)
    if den == 0:
        return 0.0
    return float(np.linalg.norm(phi_kspace(ker, kq) - kq) / den)


# ------------------------------------------------------------- acquisition

def acquire(x: np.ndarray, m: SamplingMask) -> np.ndarray:
    return apply_mask(fft2c(x), m)


def acquire_adjoint(y: np.ndarray, m: SamplingMask) -> np.ndarray:
    return ifft2c(apply_mask(y, m))


def dc_replace(k_iter: np.ndarray, y: np.ndarray, m: SamplingMask) -> np.ndarray:
    """Hard data consistency: sampled locations take the measured values."""
    if np.shape(k_iter)[-2:] != m.shape:
        raise GridError(f"k-space shape {np.shape(k_iter)} does not match mask {m.shape}")
    return np.where(m.keep, y, k_iter)


def dc_gradient(k_iter: np.ndarray, y: np.ndarray, m: SamplingMask, step: float) -> np.ndarray:
    """One gradient step on ``0.5 ||M k - y||^2``; ``step=1`` equals :func:`dc_replace`."""
    return k_iter - step * apply_mask(k_iter - y, m)
