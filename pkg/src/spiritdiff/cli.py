"""Command-line entry point: ``spiritdiff <command> [options]``.

Commands share one YAML config (merged over :data:`DEFAULT_CONFIG`) and a
handful of override flags. Every output is a container or plain text file in
``--out-dir``; ``manifest.json`` there accumulates sha256 checksums.

Exit codes: 0 success, 2 usage or config, 3 data format, 4 missing input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import yaml

from .calibration import CalibrationError, calibrate, calibration_residual, extract_acs
from .container import (
    SCORE_ROLES,
    ContainerError,
    file_checksum,
    read_container,
    write_container,
)
from .experiment import (
    DEFAULT_CONFIG,
    METHODS,
    ConfigError,
    build_scene,
    merge_config,
    sampler_from,
    schedule_from,
    training_population,
    validate_config,
)
from .grid import GridError
from .operators import ImageKernel
from .recon import (
    CGNotConverged,
    error_map,
    nrmse,
    psnr,
    recon_cg_spirit,
    recon_spirit_diffusion,
    recon_vesde,
    recon_zero_filled,
)
from .scores import GaussianPrior, TrainConfig, fit_gaussian_prior, train_dsm
from .sde import ScheduleError

log = logging.getLogger("spiritdiff")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_MISSING = 0, 2, 3, 4
METRIC_FIELDS = ("method", "R", "seed", "psnr", "nrmse", "wall_time_ms")


class MissingInput(Exception):
    pass


# ---------------------------------------------------------------- helpers

def load_config(args) -> tuple[dict, str]:
    """Merged, validated config plus the verbatim text of ``--config``."""
    text = ""
    user = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file {path} not found")
        text = path.read_text()
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError("<file>", f"not valid YAML: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("<file>", "top level must be a mapping")
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    sde = {}
    if args.steps is not None:
        sde["n_steps"] = args.steps
    if args.eta_max is not None:
        sde["eta_max"] = args.eta_max
    if args.beta_max is not None:
        sde["beta_max"] = args.beta_max
    if sde:
        over["sde"] = sde
    mask = {}
    if args.acceleration is not None:
        mask["acceleration"] = args.acceleration
    if args.acs is not None:
        mask["acs"] = args.acs
    if mask:
        over["mask"] = mask
    cfg = merge_config(merge_config(DEFAULT_CONFIG, user), over)
    return validate_config(cfg), text


def _path(args, given: str | None, default: str) -> Path:
    p = Path(given) if given else Path(args.out_dir) / default
    if not p.exists():
        raise MissingInput(f"required input {p} not found")
    return p


def _update_manifest(out: Path, command: str, cfg: dict, text: str, files: dict) -> dict:
    mpath = out / "manifest.json"
    man = json.loads(mpath.read_text()) if mpath.exists() else {"files": {}, "runs": []}
    man["files"].update(files)
    man["runs"].append({"command": command, "seed": cfg["seed"], "config": cfg,
                        "config_text": text, "outputs": sorted(files)})
    mpath.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def _write(out: Path, name: str, obj, role=None, meta=None) -> tuple[str, str]:
    return name, write_container(out / name, obj, role, meta)


def _append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)


def _metrics_row(method, R, seed, est, ref, ms) -> dict:
    a, b = np.abs(est), np.abs(ref)
    return {"method": method, "R": f"{R:.4g}", "seed": seed, "psnr": f"{psnr(a, b):.6f}",
            "nrmse": f"{nrmse(a, b):.6f}", "wall_time_ms": f"{ms:.1f}"}


def write_pgm(path: Path, img: np.ndarray) -> str:
    """8-bit binary PGM of ``img`` already scaled to ``[0, 1]``."""
    px = np.clip(np.rint(np.asarray(img, dtype=float) * 255), 0, 255).astype(np.uint8)
    ny, nx = px.shape
    raw = b"P5\n%d %d\n255\n" % (nx, ny) + px.tobytes()
    path.write_bytes(raw)
    return file_checksum(path)


# --------------------------------------------------------------- commands

def cmd_simulate(args, cfg, text) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scene(cfg)
    meta = {"seed": cfg["seed"]}
    files = dict([
        _write(out, "truth.spd", sc.truth, "coil_image", meta),
        _write(out, "maps.spd", sc.maps, meta=meta),
        _write(out, "mask.spd", sc.mask,
               meta={**meta, "acceleration": float(cfg["mask"]["acceleration"])}),
        _write(out, "y.spd", sc.y, "kspace", meta),
    ])
    man = _update_manifest(out, "simulate", cfg, text, files)
    print(json.dumps({k: man["files"][k] for k in sorted(files)}, indent=2))
    return EXIT_OK


def cmd_calibrate(args, cfg, text) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    y = read_container(_path(args, args.y, "y.spd"), "kspace").data
    m = read_container(_path(args, args.mask, "mask.spd"), "mask").to_object()
    k = int(cfg["calibration"]["kernel"])
    acs = extract_acs(y, m, (k, k))
    ker = calibrate(acs, k, k, lambda_rel=float(cfg["calibration"]["lambda_rel"]))
    res = calibration_residual(ker, acs)
    files = dict([_write(out, "kernel.spd", ker, meta={"residual": res,
                                                       "lambda_rel": cfg["calibration"]["lambda_rel"]})])
    _update_manifest(out, "calibrate", cfg, text, files)
    print(f"calibration residual {res:.6g}")
    return EXIT_OK


def cmd_train_score(args, cfg, text) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = read_container(_path(args, args.maps, "maps.spd"), "maps").to_object()
    data = training_population(cfg, maps)
    if args.kind == "gaussian":
        model = fit_gaussian_prior(data)
        note = f"gaussian prior, var {model.var:.6g}"
    else:
        res = train_dsm(data, schedule_from(cfg), maps,
                        TrainConfig(n_bins=args.bins, epochs=args.epochs, seed=cfg["seed"]))
        model = res.model
        note = f"linear DSM model, final loss {res.losses[-1]:.6g}"
    files = dict([_write(out, "score.spd", model, meta={"kind": args.kind, "seed": cfg["seed"]})])
    _update_manifest(out, "train-score", cfg, text, files)
    print(note)
    return EXIT_OK


def cmd_recon(args, cfg, text) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    method = args.method
    y = read_container(_path(args, args.y, "y.spd"), "kspace").data
    mc = read_container(_path(args, args.mask, "mask.spd"), "mask")
    m = mc.to_object()
    maps = read_container(_path(args, args.maps, "maps.spd"), "maps").to_object()
    ker = score_obj = None
    if method in ("cgspirit", "spiritdiff"):
        ker = read_container(_path(args, args.kernel, "kernel.spd"), "kernel").to_object()
    if method in ("vesde", "spiritdiff"):
        sp = Path(args.score) if args.score else Path(args.out_dir) / "score.spd"
        if not sp.exists():
            raise MissingInput(f"method {method} needs a score model; {sp} not found "
                               "(run train-score first)")
        score_obj = read_container(sp, SCORE_ROLES).to_object()
    sch, scfg = schedule_from(cfg), sampler_from(cfg)
    rng = np.random.default_rng([int(cfg["seed"]), 2])

    def score_for(s):
        if isinstance(score_obj, GaussianPrior):
            return score_obj.score_fn(sch, s)
        return score_obj

    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CGNotConverged)
        if method == "zf":
            rec = recon_zero_filled(y, m, maps)
        elif method == "cgspirit":
            rec = recon_cg_spirit(y, m, ker, int(cfg["cg"]["n_iter"]),
                                  float(cfg["cg"]["lambda_reg"]), s=maps)
        elif method == "vesde":
            rec = recon_vesde(y, m, score_for(None), sch, rng, scfg, s=maps)
        else:
            rec = recon_spirit_diffusion(y, m, ImageKernel(ker, m.shape), maps,
                                         score_for(maps), sch, scfg, rng)
    ms = (time.perf_counter() - t0) * 1e3
    for w in caught:
        log.warning("%s", w.message)
    R = float(mc.meta.get("acceleration", m.acceleration()))
    # wall time stays out of the container so checksums are reproducible
    meta = {"method": method, "R": R, "seed": cfg["seed"]}
    files = dict([
        _write(out, f"recon_{method}_coils.spd", rec.coils, "coil_image", meta),
        _write(out, f"recon_{method}.spd", rec.combined, "image", meta),
    ])
    truth_path = Path(args.truth) if args.truth else out / "truth.spd"
    if truth_path.exists():
        truth = read_container(truth_path, "coil_image").data
        row = _metrics_row(method, R, cfg["seed"], rec.combined, maps.combine(truth), ms)
        _append_metrics(out / "metrics.csv", row)
        print(",".join(str(row[k]) for k in METRIC_FIELDS))
    _update_manifest(out, f"recon --method {method}", cfg, text, files)
    return EXIT_OK


def _truth_image(args, out: Path) -> np.ndarray:
    c = read_container(_path(args, args.truth, "truth.spd"), ("coil_image", "image"))
    if c.role == "image":
        return c.data
    maps = read_container(_path(args, args.maps, "maps.spd"), "maps").to_object()
    return maps.combine(c.data)


def cmd_metrics(args, cfg, text) -> int:
    out = Path(args.out_dir)
    rc = read_container(_path(args, args.recon, f"recon_{args.method}.spd"), "image")
    ref = _truth_image(args, out)
    if rc.data.shape != ref.shape:
        raise GridError(f"recon {rc.data.shape} and truth {ref.shape} differ in shape")
    m = rc.meta
    row = _metrics_row(m.get("method", args.method), float(m.get("R", float("nan"))),
                       m.get("seed", cfg["seed"]), rc.data, ref, float("nan"))
    _append_metrics(out / "metrics.csv", row)
    print(",".join(METRIC_FIELDS))
    print(",".join(str(row[k]) for k in METRIC_FIELDS))
    return EXIT_OK


def cmd_render(args, cfg, text) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc = read_container(_path(args, args.recon, f"recon_{args.method}.spd"), "image")
    ref = _truth_image(args, out)
    a, b = np.abs(rc.data), np.abs(ref)
    if a.shape != b.shape:
        raise GridError(f"recon {a.shape} and truth {b.shape} differ in shape")
    stem = Path(args.recon).stem if args.recon else f"recon_{args.method}"
    peak = max(float(b.max(initial=0.0)), 1e-300)
    files = {
        f"{stem}.pgm": write_pgm(out / f"{stem}.pgm", a / peak),
        f"{stem}_error.pgm": write_pgm(out / f"{stem}_error.pgm", error_map(a, b)),
    }
    _update_manifest(out, "render", cfg, text, files)
    for k, v in files.items():
        print(f"{k} {v}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "train-score": cmd_train_score,
    "recon": cmd_recon,
    "metrics": cmd_metrics,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config merged over the defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--steps", type=int, help="reverse-SDE steps (sde.n_steps)")
    common.add_argument("--eta-max", type=float)
    common.add_argument("--beta-max", type=float)
    common.add_argument("--acceleration", type=float)
    common.add_argument("--acs", type=int, help="ACS lines")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spiritdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="phantom, maps, mask and k-space")
    c = sub.add_parser("calibrate", parents=[common], help="SPIRiT kernel from the ACS")
    c.add_argument("--y")
    c.add_argument("--mask")
    t = sub.add_parser("train-score", parents=[common], help="fit a score model")
    t.add_argument("--maps")
    t.add_argument("--kind", choices=("gaussian", "dsm"), default="gaussian")
    t.add_argument("--bins", type=int, default=10)
    t.add_argument("--epochs", type=int, default=400)
    r = sub.add_parser("recon", parents=[common], help="reconstruct with one method")
    r.add_argument("--method", choices=METHODS, required=True)
    for name in ("y", "mask", "maps", "kernel", "score", "truth"):
        r.add_argument(f"--{name}")
    for name, helptext in (("metrics", "PSNR/NRMSE row for a recon"),
                           ("render", "PGM images of a recon and its error map")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("--method", choices=METHODS, default="spiritdiff")
        q.add_argument("--recon")
        q.add_argument("--truth")
        q.add_argument("--maps")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, text = load_config(args)
        return COMMANDS[args.command](args, cfg, text)
    except (ConfigError, CalibrationError, ScheduleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, GridError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except MissingInput as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
