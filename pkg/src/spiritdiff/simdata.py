"""Synthetic ground truth: vessel-wall phantom, coil maps, masks, acquisition.

Geometry is given in normalized coordinates, ``[-1, 1]`` across the grid, so
one spec rasterizes at any size.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridError, SamplingMask, apply_mask, crandn, fft2c
from .operators import SensitivityMaps


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (y, x)
    axes: tuple[float, float]  # (semi-axis y, semi-axis x)
    angle: float = 0.0  # degrees
    intensity: float = 1.0


@dataclass(frozen=True)
class VesselRing:
    center: tuple[float, float]
    r_inner: float
    r_outer: float
    intensity: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    ellipses: tuple[Ellipse, ...] = ()
    vessel_rings: tuple[VesselRing, ...] = ()

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"phantom size must be >= 16, got {self.size}")
        vals = [e.intensity for e in self.ellipses] + [r.intensity for r in self.vessel_rings]
        if not np.all(np.isfinite(vals)):
            raise ValueError("phantom intensities must be finite")


def default_phantom_spec(size: int = 64) -> PhantomSpec:
    """Head-like section with bright thin-walled vessels."""
    return PhantomSpec(
        size=size,
        ellipses=(
            Ellipse((0.0, 0.0), (0.86, 0.70), 0.0, 0.8),
            Ellipse((0.0, 0.0), (0.78, 0.62), 0.0, -0.35),
            Ellipse((-0.28, -0.22), (0.22, 0.12), 18.0, 0.25),
            Ellipse((-0.28, 0.22), (0.22, 0.12), -18.0, 0.25),
            Ellipse((0.38, 0.0), (0.14, 0.30), 0.0, 0.15),
        ),
        vessel_rings=(
            VesselRing((0.10, -0.32), 0.06, 0.14, 0.6),
            VesselRing((0.10, 0.32), 0.06, 0.14, 0.6),
            VesselRing((-0.02, 0.0), 0.04, 0.11, 0.5),
        ),
    )


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) - size // 2) / (size / 2)
    return np.meshgrid(c, c, indexing="ij")


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Rasterize ellipses and annuli additively into a real image."""
    yy, xx = _coords(spec.size)
    img = np.zeros((spec.size, spec.size))
    for e in spec.ellipses:
        th = np.deg2rad(e.angle)
        dy, dx = yy - e.center[0], xx - e.center[1]
        u = dy * np.cos(th) + dx * np.sin(th)
        v = -dy * np.sin(th) + dx * np.cos(th)
        img[(u / e.axes[0]) ** 2 + (v / e.axes[1]) ** 2 <= 1.0] += e.intensity
    for r in spec.vessel_rings:
        d = np.hypot(yy - r.center[0], xx - r.center[1])
        img[(d >= r.r_inner) & (d <= r.r_outer)] += r.intensity
    return img


def jitter_spec(spec: PhantomSpec, rng: np.random.Generator, scale: float = 0.1) -> PhantomSpec:
    """Random anatomical variant: intensities, positions and sizes perturbed by ``scale``."""

    def j(v, s):
        return float(v + s * rng.standard_normal())

    ellipses = tuple(
        replace(
            e,
            center=(j(e.center[0], 0.1 * scale), j(e.center[1], 0.1 * scale)),
            axes=(e.axes[0] * (1 + j(0, 0.2 * scale)), e.axes[1] * (1 + j(0, 0.2 * scale))),
            intensity=e.intensity * (1 + j(0, scale)),
        )
        for e in spec.ellipses
    )
    rings = []
    for r in spec.vessel_rings:
        k = 1 + j(0, 0.3 * scale)
        rings.append(
            replace(
                r,
                center=(j(r.center[0], 0.2 * scale), j(r.center[1], 0.2 * scale)),
                r_inner=r.r_inner * k,
                r_outer=r.r_outer * k,
                intensity=r.intensity * (1 + j(0, scale)),
            )
        )
    return replace(spec, ellipses=ellipses, vessel_rings=tuple(rings))


def make_phantom_population(
    spec: PhantomSpec, n: int, rng: np.random.Generator, scale: float = 0.1
) -> np.ndarray:
    """``n`` jittered phantoms stacked as ``(n, size, size)``."""
    return np.stack([make_phantom(jitter_spec(spec, rng, scale)) for _ in range(n)])


def phantom_checksum(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype="<f8").tobytes()).hexdigest()


def make_sensitivities(
    ncoils: int, ny: int, nx: int, decay: float = 0.9, radius: float = 1.2,
    phase_cycles: float = 0.5, support: np.ndarray | None = None,
) -> SensitivityMaps:
    """Gaussian-lobe receive coils spaced evenly on a ring around the grid.

    Each coil carries a linear phase ramp pointing along its own angular
    position; ``phase_cycles`` is the total phase excursion across the field of
    view in cycles. Maps are normalized to unit coil norm per pixel.
    """
    if ncoils < 1:
        raise ValueError("ncoils must be >= 1")
    if ncoils == 1:
        phase_cycles = 0.0  # a lone coil has no partner to be phased against
    cy = (np.arange(ny) - ny // 2) / (ny / 2)
    cx = (np.arange(nx) - nx // 2) / (nx / 2)
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    raw = np.empty((ncoils, ny, nx), dtype=np.complex128)
    for i in range(ncoils):
        a = 2 * np.pi * i / ncoils
        py, px = radius * np.sin(a), radius * np.cos(a)
        mag = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * decay**2))
        ph = np.pi * phase_cycles * (yy * np.sin(a) + xx * np.cos(a))
        raw[i] = mag * np.exp(1j * ph)
    return SensitivityMaps.from_raw(raw, support)


def make_phase_ramp_sensitivities(ncoils: int, ny: int, nx: int) -> SensitivityMaps:
    """Equal-magnitude coils, coil ``c`` carrying ``c`` phase cycles along x.

    Coil ``c`` is coil 0 shifted by ``c`` k-space columns, so a SPIRiT kernel
    spanning ``ncoils - 1`` columns reproduces these maps exactly.
    """
    xx = (np.arange(nx) - nx // 2)[None, :]
    raw = np.stack([np.exp(2j * np.pi * c * xx / nx) * np.ones((ny, 1)) for c in range(ncoils)])
    return SensitivityMaps.from_raw(raw)


def max_map_gradient(s: SensitivityMaps) -> float:
    """Largest per-pixel finite-difference step of any coil map."""
    gy = np.abs(np.diff(s.maps, axis=1))
    gx = np.abs(np.diff(s.maps, axis=2))
    return float(max(gy.max(initial=0.0), gx.max(initial=0.0)))


def make_mask(
    ny: int, nx: int, R: float, acs_lines: int, scheme: str = "uniform",
    rng: np.random.Generator | None = None, acs_in_budget: bool = True,
) -> SamplingMask:
    """Phase-encode (row) undersampling with a centered ACS block.

    By default the line budget is ``ceil(ny / R)`` including the ACS lines,
    so the achieved acceleration never exceeds ``R``; ``uniform`` spreads the
    remaining lines evenly over the non-ACS rows, ``random`` draws them
    without replacement. With ``acs_in_budget=False`` the ``uniform`` scheme
    keeps every ``R``-th row (``R`` rounded) and adds the ACS block on top,
    and ``random`` draws ``ceil(ny / R)`` outer rows.
    """
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    if not 0 < acs_lines <= ny:
        raise ValueError(f"acs_lines must be in 1..{ny}, got {acs_lines}")
    if scheme not in ("uniform", "random"):
        raise ValueError(f"unknown mask scheme {scheme!r}")
    r0 = ny // 2 - acs_lines // 2
    r1 = r0 + acs_lines
    outside = np.r_[0:r0, r1:ny]
    keep = np.zeros((ny, nx), dtype=bool)
    keep[r0:r1] = True
    if not acs_in_budget and scheme == "uniform":
        step = max(1, int(round(R)))
        keep[(np.arange(ny) - ny // 2) % step == 0] = True  # lattice through the center row
        return SamplingMask(keep, (r0, r1, 0, nx))
    budget = int(np.ceil(ny / R - 1e-9))
    n_out = budget if not acs_in_budget else budget - acs_lines
    if n_out < 1 and outside.size:
        raise ValueError(
            f"infeasible rate: {acs_lines} ACS lines leave no budget at R={R} ({budget} lines)"
        )
    n_out = min(n_out, outside.size)
    if scheme == "uniform":
        idx = np.floor((np.arange(n_out) + 0.5) * outside.size / max(n_out, 1)).astype(int)
        rows = outside[idx]
    else:
        if rng is None:
            raise ValueError("random scheme needs an rng")
        rows = rng.choice(outside, size=n_out, replace=False)
    keep[rows] = True
    return SamplingMask(keep, (r0, r1, 0, nx))


def simulate_acquisition(
    phantom: np.ndarray, s: SensitivityMaps, m: SamplingMask, noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y, truth)`` with ``truth_i = s_i * phantom``.

    Complex measurement noise with ``E|n|^2 = noise_sigma^2`` lands on
    sampled locations only.
    """
    phantom = np.asarray(phantom)
    if phantom.shape != s.shape or m.shape != s.shape:
        raise GridError(f"shape mismatch: phantom {phantom.shape}, maps {s.shape}, mask {m.shape}")
    truth = s.expand(phantom)
    k = fft2c(truth)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise needs an rng")
        k = k + noise_sigma * crandn(rng, k.shape)
    return apply_mask(k, m), truth


@dataclass
class Scene:
    """Everything a reconstruction experiment needs for one slice."""

    phantom: np.ndarray
    maps: SensitivityMaps
    mask: SamplingMask
    y: np.ndarray
    truth: np.ndarray
    meta: dict = field(default_factory=dict)


# the container format is part of the synthetic-data surface
from .container import read_container, write_container  # noqa: E402,F401
