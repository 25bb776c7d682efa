"""SPIRiT-Diffusion SDE: schedules, perturbation kernel, forward simulation
and reverse-time sampling.

Conventions
-----------
Complex noise is circularly symmetric with ``E|z|^2 = 1`` per entry (the
standard complex Wiener increment). ``SdeSchedule.sigma2`` is the closed-form
kernel variance per real component, so a unit Q-direction of
``x(t) - x(0)`` carries ``E|.|^2 = 2 * sigma2(t)`` (``kernel_var``). Scores are
Wirtinger gradients ``d log p / d conj(x)``, for which the reverse drift is
``beta * Q^2 score`` with the same noise normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .calibration import SpiritKernel
from .grid import SamplingMask, crandn, fft2c, ifft2c
from .operators import (
    ImageKernel,
    SensitivityMaps,
    acquire_adjoint,
    dc_gradient,
    dc_replace,
    psi,
    q_project,
)

ScoreFn = Callable[[np.ndarray, float], np.ndarray]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SdeSchedule:
    """Linear noise-rate ``beta(t)`` and drift-rate ``eta(t)`` on ``[0, T]``.

    ``variance`` selects the perturbation-kernel variance:
    ``"exponential"`` uses ``0.5 * int_0^t beta(tau) exp(int_tau^t eta) dtau``;
    ``"driftless"`` drops the exponential, which is what the forward process
    produces when the injected noise is SPIRiT-consistent.
    """

    beta_min: float = 0.1
    beta_max: float = 10.0
    eta_min: float = 1.0
    eta_max: float = 1.0
    T: float = 1.0
    n_steps: int = 500
    t_min: float = 1e-3
    variance: str = "exponential"

    def __post_init__(self):
        # beta = 0 is allowed: it switches the noise off (deterministic flows)
        if self.beta_min < 0 or self.beta_max < 0:
            raise ScheduleError("beta endpoints must be >= 0")
        if self.eta_min < 0 or self.eta_max < 0:
            raise ScheduleError("eta endpoints must be >= 0")
        if self.n_steps < 1:
            raise ScheduleError("n_steps must be >= 1")
        if not 0 < self.t_min < self.T:
            raise ScheduleError("need 0 < t_min < T")
        if self.variance not in ("exponential", "driftless"):
            raise ScheduleError(f"unknown variance model {self.variance!r}")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def eta(self, t):
        return self.eta_min + t * (self.eta_max - self.eta_min)

    def eta_integral(self, a, b):
        """``int_a^b eta(s) ds``."""
        return self.eta_min * (b - a) + 0.5 * (self.eta_max - self.eta_min) * (b * b - a * a)

    def _check_t(self, t: float) -> None:
        if not 0.0 <= t <= self.T:
            raise ScheduleError(f"t={t} outside [0, {self.T}]")

    def sigma2(self, t: float) -> float:
        """Closed-form perturbation variance (per real component)."""
        self._check_t(t)
        if t == 0:
            return 0.0
        b0, b1 = self.beta_min, self.beta_max - self.beta_min
        if self.variance == "driftless":
            return 0.5 * (b0 * t + 0.5 * b1 * t * t)
        if self.eta_min == self.eta_max:
            c = self.eta_min
            if c == 0:
                return 0.5 * (b0 * t + 0.5 * b1 * t * t)
            e = np.expm1(c * t)
            return 0.5 * (b0 * e / c + b1 * (e - c * t) / c**2)
        val, _ = integrate.quad(
            lambda tau: self.beta(tau) * np.exp(self.eta_integral(tau, t)),
            0.0, t, epsabs=1e-10, epsrel=1e-12, limit=200,
        )
        return 0.5 * val

    def kernel_var(self, t: float) -> float:
        """``E|x(t) - x(0)|^2`` along one unit direction in the range of Q."""
        return 2.0 * self.sigma2(t)

    def time_grid(self, n_steps: int | None = None) -> np.ndarray:
        n = self.n_steps if n_steps is None else n_steps
        return np.linspace(self.T, self.t_min, n + 1)


@dataclass
class DiffusionState:
    x: np.ndarray
    t: float


def perturb(
    x0: np.ndarray, t: float, sch: SdeSchedule, s: SensitivityMaps | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``x(t) ~ N(x0, sigma2(t) Q)`` (per real component)."""
    x0 = np.asarray(x0)
    if t == 0:
        return x0.copy()
    return x0 + np.sqrt(sch.kernel_var(t)) * q_project(s, crandn(rng, x0.shape))


def _psi_op(ker, shape) -> Optional[ImageKernel]:
    if ker is None or isinstance(ker, ImageKernel):
        return ker
    return ImageKernel(ker, shape[-2:])


def simulate_forward(
    x0: np.ndarray, sch: SdeSchedule, ker: SpiritKernel | ImageKernel | None,
    s: SensitivityMaps | None, n_steps: int, rng: np.random.Generator,
    t_end: float | None = None, record: tuple[float, ...] = (),
) -> DiffusionState | dict[float, DiffusionState]:
    """Euler-Maruyama for ``dx = (eta/2) Psi x dt + sqrt(beta) Q dw``.

    ``x0`` may carry leading batch axes (independent paths). With ``record``,
    returns the states at those grid times (each must be a multiple of
    ``t_end / n_steps``) keyed by time.
    """
    if n_steps < 1:
        raise ScheduleError("n_steps must be >= 1")
    t_end = sch.T if t_end is None else t_end
    x = np.array(x0, dtype=np.complex128)
    ik = _psi_op(ker, x.shape)
    dt = t_end / n_steps
    want = {int(round(tr / dt)): tr for tr in record}
    for k, tr in want.items():
        if abs(k * dt - tr) > 1e-9 or not 0 <= k <= n_steps:
            raise ScheduleError(f"record time {tr} is not on the time grid")
    out = {}
    if 0 in want:
        out[want[0]] = DiffusionState(x.copy(), 0.0)
    for k in range(n_steps):
        t = k * dt
        b, e = sch.beta(t), sch.eta(t)
        drift = 0.5 * e * psi(ik, x) if (ik is not None and e != 0) else 0.0
        x = x + drift * dt + np.sqrt(b * dt) * q_project(s, crandn(rng, x.shape))
        if k + 1 in want:
            out[want[k + 1]] = DiffusionState(x.copy(), (k + 1) * dt)
    if record:
        return out
    return DiffusionState(x, t_end)


def reverse_step(
    state: DiffusionState, dt: float, score: ScoreFn, sch: SdeSchedule,
    ker: SpiritKernel | ImageKernel | None, s: SensitivityMaps | None,
    rng: np.random.Generator, expand_q2: bool = True,
) -> tuple[DiffusionState, np.ndarray]:
    """One reverse-time Euler-Maruyama step from ``t`` to ``t - dt``.

    Returns the new state and its noise-free mean. ``expand_q2`` applies
    ``Q^2`` as two projections; ``False`` uses one (identical up to rounding,
    Q being idempotent).
    """
    t = state.t
    if dt <= 0 or t - dt < -1e-12:
        raise ScheduleError(f"invalid reverse step dt={dt} at t={t}")
    x = state.x
    ik = _psi_op(ker, x.shape)
    b, e = sch.beta(t), sch.eta(t)
    g = score(x, t)
    qg = q_project(s, q_project(s, g)) if expand_q2 else q_project(s, g)
    cons = e / 2 * psi(ik, x) if ik is not None else np.zeros_like(x)
    drift = cons - b * qg
    x_mean = x - drift * dt
    x_new = x_mean + np.sqrt(b * dt) * q_project(s, crandn(rng, x.shape))
    return DiffusionState(x_new, max(t - dt, 0.0)), x_mean


@dataclass(frozen=True)
class CorrectorConfig:
    """Annealed Langevin corrector; step size set from the signal-to-noise ratio."""

    snr: float = 0.16
    n_steps: int = 1


def langevin_correct(
    x: np.ndarray, t: float, score: ScoreFn, s: SensitivityMaps | None,
    cfg: CorrectorConfig, rng: np.random.Generator,
) -> np.ndarray:
    for _ in range(cfg.n_steps):
        g = q_project(s, score(x, t))
        z = q_project(s, crandn(rng, x.shape))
        g_norm = np.linalg.norm(g)
        if g_norm == 0:
            continue
        eps = 2 * (cfg.snr * np.linalg.norm(z) / g_norm) ** 2
        x = x + eps * g + np.sqrt(2 * eps) * z
    return x


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-sampler options.

    ``dc`` is ``"hard"`` (k-space replacement), ``"gradient"`` (step of size
    ``dc_step`` on the data misfit) or ``"none"``. ``denoise`` drops the noise
    of the final predictor step.
    """

    n_steps: int | None = None
    corrector: CorrectorConfig | None = None
    dc: str = "hard"
    dc_step: float = 1.0
    denoise: bool = True
    expand_q2: bool = True


def apply_dc(x: np.ndarray, y: np.ndarray, m: SamplingMask, cfg: SamplerConfig) -> np.ndarray:
    if cfg.dc == "none":
        return x
    k = fft2c(x)
    if cfg.dc == "hard":
        k = dc_replace(k, y, m)
    elif cfg.dc == "gradient":
        k = dc_gradient(k, y, m, cfg.dc_step)
    else:
        raise ValueError(f"unknown dc mode {cfg.dc!r}")
    return ifft2c(k)


def check_stability(sch: SdeSchedule, ik: ImageKernel | None, ts: np.ndarray) -> None:
    """Reject schedules whose explicit Psi drift would amplify on the grid.

    Each Euler step multiplies the top Psi eigendirection by
    ``1 - eta dt lambda_max / 2``; its magnitude must stay below one.
    """
    if ik is None:
        return
    dts = ts[:-1] - ts[1:]
    etas = np.array([sch.eta(t) for t in ts[:-1]])
    worst = float(np.max(etas * dts)) * ik.lambda_max / 2
    if worst >= 2.0:
        raise ScheduleError(
            f"eta*dt*lambda_max/2 = {worst:.3g} >= 2: the consistency drift is "
            "unstable; lower eta_max or raise n_steps"
        )


def sample_reverse(
    y: np.ndarray, m: SamplingMask, score: ScoreFn, sch: SdeSchedule,
    ker: SpiritKernel | ImageKernel | None, s: SensitivityMaps | None,
    rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig(),
    x_init: np.ndarray | None = None,
    callback: Callable[[float, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Reverse-diffuse from ``T`` to ``t_min`` with data consistency.

    Starts at ``acquire_adjoint(y) + sqrt(kernel_var(T)) Q z`` unless
    ``x_init`` is given. Each step runs the predictor, the optional Langevin
    corrector, then data consistency. ``callback(t, x)`` sees every state.
    """
    if cfg.dc != "none" and not m.keep.any():
        raise ValueError("sampling mask is empty; nothing to be consistent with")
    ts = sch.time_grid(cfg.n_steps)
    if x_init is None:
        x = acquire_adjoint(y, m)
        x = x + np.sqrt(sch.kernel_var(ts[0])) * q_project(s, crandn(rng, x.shape))
    else:
        x = np.array(x_init, dtype=np.complex128)
    ik = _psi_op(ker, x.shape)
    check_stability(sch, ik, ts)
    if callback:
        callback(ts[0], x)
    nsteps = len(ts) - 1
    for k in range(nsteps):
        state, x_mean = reverse_step(
            DiffusionState(x, ts[k]), ts[k] - ts[k + 1], score, sch, ik, s, rng, cfg.expand_q2
        )
        last = k == nsteps - 1
        x = x_mean if (last and cfg.denoise) else state.x
        if cfg.corrector is not None and not last:
            x = langevin_correct(x, ts[k + 1], score, s, cfg.corrector, rng)
        x = apply_dc(x, y, m, cfg)
        if callback:
            callback(ts[k + 1], x)
    return x
