"""Config-driven phantom experiments shared by the CLI and the acceptance suite."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np

from .calibration import SpiritKernel, calibrate, calibration_residual, extract_acs
from .operators import ImageKernel, SensitivityMaps
from .recon import (
    Recon,
    nrmse,
    psnr,
    recon_cg_spirit,
    recon_spirit_diffusion,
    recon_vesde,
    recon_zero_filled,
)
from .scores import GaussianPrior, fit_gaussian_prior
from .sde import CorrectorConfig, SamplerConfig, SdeSchedule
from .simdata import (
    Scene,
    default_phantom_spec,
    make_mask,
    make_phantom,
    make_phantom_population,
    make_sensitivities,
    simulate_acquisition,
)

METHODS = ("zf", "cgspirit", "vesde", "spiritdiff")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "phantom": {"size": 64},
    "coils": {"n": 4, "decay": 0.9, "radius": 1.2, "phase_cycles": 0.5},
    "mask": {"acceleration": 6, "acs": 8, "scheme": "uniform"},
    "noise_sigma": 0.0,
    "calibration": {"kernel": 5, "lambda_rel": 2e-6},
    "prior": {"n_train": 64, "jitter": 0.1},
    "sde": {
        "beta_min": 0.1, "beta_max": 10.0, "eta_min": 400.0, "eta_max": 400.0,
        "n_steps": 500, "t_min": 1e-3, "variance": "driftless",
    },
    "sampler": {"corrector_snr": None, "dc": "hard", "dc_step": 1.0, "denoise": True},
    "cg": {"n_iter": 50, "lambda_reg": 0.0},
}

REQUIRED = ("seed", "phantom", "coils", "mask", "noise_sigma", "calibration", "prior", "sde")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"config field {field!r}: {msg}")
        self.field = field


def merge_config(base: dict, override: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


def _field(cfg: dict, path: str, cast=float):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or node.get(part) is None:
            raise ConfigError(path, "missing")
        node = node[part]
    try:
        return cast(node)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {cast.__name__}, got {node!r}") from None


def validate_config(cfg: dict, required=REQUIRED) -> dict:
    """Check a merged config; raise :class:`ConfigError` naming the bad field."""
    for key in required:
        if cfg.get(key) is None:
            raise ConfigError(key, "missing")
    _field(cfg, "seed", int)
    if _field(cfg, "phantom.size", int) < 16:
        raise ConfigError("phantom.size", "must be >= 16")
    if _field(cfg, "coils.n", int) < 1:
        raise ConfigError("coils.n", "must be >= 1")
    for f in ("coils.decay", "coils.radius", "coils.phase_cycles", "calibration.lambda_rel"):
        _field(cfg, f)
    if _field(cfg, "mask.acceleration") < 1:
        raise ConfigError("mask.acceleration", "must be >= 1")
    if _field(cfg, "mask.acs", int) < 1:
        raise ConfigError("mask.acs", "must be >= 1")
    if _field(cfg, "mask.scheme", str) not in ("uniform", "random"):
        raise ConfigError("mask.scheme", "must be 'uniform' or 'random'")
    if _field(cfg, "noise_sigma") < 0:
        raise ConfigError("noise_sigma", "must be >= 0")
    if _field(cfg, "calibration.kernel", int) % 2 == 0:
        raise ConfigError("calibration.kernel", "must be odd")
    if _field(cfg, "prior.n_train", int) < 2:
        raise ConfigError("prior.n_train", "must be >= 2")
    _field(cfg, "prior.jitter")
    try:
        schedule_from(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError("sde", str(e)) from None
    return cfg


def schedule_from(cfg: dict) -> SdeSchedule:
    return SdeSchedule(**cfg["sde"])


def sampler_from(cfg: dict) -> SamplerConfig:
    sc = cfg.get("sampler", {})
    snr = sc.get("corrector_snr")
    return SamplerConfig(
        n_steps=cfg["sde"].get("n_steps"),
        corrector=CorrectorConfig(snr=snr) if snr else None,
        dc=sc.get("dc", "hard"),
        dc_step=sc.get("dc_step", 1.0),
        denoise=sc.get("denoise", True),
    )


def build_scene(cfg: dict) -> Scene:
    """Phantom, maps, mask and measured k-space for a config."""
    rng = np.random.default_rng(cfg["seed"])
    n = int(cfg["phantom"]["size"])
    spec = default_phantom_spec(n)
    phantom = make_phantom(spec)
    c = cfg["coils"]
    maps = make_sensitivities(int(c["n"]), n, n, decay=c["decay"], radius=c["radius"],
                              phase_cycles=c["phase_cycles"])
    mk = cfg["mask"]
    mask = make_mask(n, n, float(mk["acceleration"]), int(mk["acs"]), mk.get("scheme", "uniform"),
                     rng=rng)
    y, truth = simulate_acquisition(phantom, maps, mask, float(cfg["noise_sigma"]), rng)
    return Scene(phantom, maps, mask, y, truth, {"spec": spec})


def calibrate_scene(scene: Scene, cfg: dict) -> tuple[SpiritKernel, float]:
    k = int(cfg["calibration"]["kernel"])
    acs = extract_acs(scene.y, scene.mask, (k, k))
    ker = calibrate(acs, k, k, lambda_rel=float(cfg["calibration"]["lambda_rel"]))
    return ker, calibration_residual(ker, acs)


def training_population(cfg: dict, maps: SensitivityMaps) -> np.ndarray:
    """Coil images of jittered phantoms, ``(n_train, ncoils, ny, nx)``.

    Uses its own seed stream, so the scene's truth is never a member.
    """
    pc = cfg["prior"]
    rng = np.random.default_rng([int(cfg["seed"]), 1])
    spec = default_phantom_spec(int(cfg["phantom"]["size"]))
    pop = make_phantom_population(spec, int(pc["n_train"]), rng, float(pc["jitter"]))
    return maps.expand(pop)


def train_prior(scene: Scene, cfg: dict) -> GaussianPrior:
    """Gaussian prior moment-matched to :func:`training_population`."""
    return fit_gaussian_prior(training_population(cfg, scene.maps))


@dataclass
class MethodResult:
    method: str
    recon: Recon
    psnr: float
    nrmse: float
    wall_time_ms: float


def run_method(method: str, scene: Scene, cfg: dict, ker=None, prior=None, seed=None) -> MethodResult:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    seed = cfg["seed"] if seed is None else seed
    rng = np.random.default_rng([int(seed), 2])
    sch = schedule_from(cfg)
    scfg = sampler_from(cfg)
    t0 = time.perf_counter()
    if method == "zf":
        rec = recon_zero_filled(scene.y, scene.mask, scene.maps)
    elif method == "cgspirit":
        rec = recon_cg_spirit(scene.y, scene.mask, ker, int(cfg["cg"]["n_iter"]),
                              float(cfg["cg"]["lambda_reg"]), s=scene.maps)
    elif method == "vesde":
        rec = recon_vesde(scene.y, scene.mask, prior.score_fn(sch, None), sch, rng, scfg,
                          s=scene.maps)
    else:
        ik = ImageKernel(ker, scene.mask.shape)
        rec = recon_spirit_diffusion(scene.y, scene.mask, ik, scene.maps,
                                     prior.score_fn(sch, scene.maps), sch, scfg, rng)
    ms = (time.perf_counter() - t0) * 1e3
    ref = np.abs(scene.phantom)
    est = np.abs(rec.combined)
    return MethodResult(method, rec, psnr(est, ref), nrmse(est, ref), ms)


def run_experiment(cfg: dict, methods=METHODS) -> dict[str, MethodResult]:
    cfg = validate_config(merge_config(DEFAULT_CONFIG, cfg))
    scene = build_scene(cfg)
    ker, _ = calibrate_scene(scene, cfg)
    prior = train_prior(scene, cfg)
    return {m: run_method(m, scene, cfg, ker, prior) for m in methods}
