"""Command-line pipeline: simulate-pair, estimate, evaluate, lemma-check.

One JSON config drives all commands; defaults bake in the standard
perturbation and ground-truth magnitudes and every resolved value is echoed
into the output metadata, so runs are self-describing.  Outputs land in a
flat directory under fixed names (source.rcv, target.rcv, gt.rcv, u.rcv,
cov.rcv, mean.rcv, pred.rcv, metrics.json, risk_coverage.csv).  Exit codes:
0 success, 1 config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geometry import (
    AffineTransform,
    ConvergenceError,
    DenseTransform,
    Transform,
    TranslationTransform,
    grid_points,
)
from .metrics import bin_curve, error_map, mse_decomposition_check, pearson, risk_coverage, spearman
from .perturb import GtSpec, PerturbSpec, simulate_gt_with_info
from .register import (
    AffineSsdBackend,
    DemonsBackend,
    ErrorModel,
    OracleBackend,
    affine_ssd_register,
    demons_register,
)
from .uncertainty import decompose_cov, estimate_uncertainty, verify_lemma
from .volume import RoiMask, Volume3, VolumeFormatError, make_phantom, read_nifti, read_volume, warp, write_volume

__all__ = ["main", "ConfigError"]


class ConfigError(ValueError):
    """The configuration file is missing or inconsistent."""


def _load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top-level config must be an object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def _sanitize(obj):
    """Make a structure JSON-clean; non-finite floats become 'undefined'."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else "undefined"
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    return obj


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_sanitize(obj), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def _shape_from(cfg: dict) -> tuple[int, int, int]:
    shape = cfg.get("shape")
    if shape is None:
        raise ConfigError("config needs a 'shape' entry [nx, ny, nz]")
    if not (isinstance(shape, list) and len(shape) == 3):
        raise ConfigError(f"'shape' must be a 3-element list, got {shape!r}")
    return tuple(int(s) for s in shape)


def _build_perturb_spec(cfg: dict, shape, seed: int) -> PerturbSpec:
    sec = _section(cfg, "perturb")
    try:
        return PerturbSpec(
            family=sec.get("family", "translation"),
            shape=shape,
            seed=int(sec.get("seed", seed)),
            count=int(sec.get("count", 50)),
            translation_fraction=float(sec.get("translation_fraction", 0.01)),
            scale_range=tuple(sec.get("scale_range", (0.9, 1.1))),
            shear_max=float(sec.get("shear_max", 0.02)),
            grid_spacing=int(sec.get("grid_spacing", 10)),
            node_max=float(sec.get("node_max", 12.5)),
            deform_strength=float(sec.get("deform_strength", 0.08)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'perturb' section: {exc}") from exc


def _build_gt_spec(cfg: dict, seed: int) -> GtSpec:
    sec = _section(cfg, "gt")
    try:
        return GtSpec(
            kind=sec.get("kind", "translation"),
            seed=int(sec.get("seed", seed)),
            translation_fraction=float(sec.get("translation_fraction", 0.10)),
            shear_max=float(sec.get("shear_max", 0.10)),
            scale_range=tuple(sec.get("scale_range", (0.8, 1.2))),
            grid_spacing=int(sec.get("grid_spacing", 10)),
            node_max=float(sec.get("node_max", 12.5)),
            invert_tol_voxels=float(sec.get("invert_tol_voxels", 0.5)),
            max_resample=int(sec.get("max_resample", 10)),
            phantom_kind=sec.get("phantom_kind", "blobs"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'gt' section: {exc}") from exc


def _build_error_model(sec: dict, seed: int) -> ErrorModel:
    try:
        sigma = sec.get("sigma", 0.0)
        if isinstance(sigma, list):
            sigma = np.asarray(sigma, dtype=np.float64)
        kw = {}
        if "mu_field_path" in sec and sec["mu_field_path"]:
            fld = read_volume(sec["mu_field_path"])
            if fld.channels != 3:
                raise ConfigError("mu_field volume must have 3 channels")
            kw["mu_field"] = fld.data.astype(np.float64)
        else:
            kw["mu"] = tuple(sec.get("mu", (0.0, 0.0, 0.0)))
        return ErrorModel(
            sigma=sigma,
            mu_scale=sec.get("mu_scale"),
            sigma_scale=sec.get("sigma_scale"),
            seed=int(sec.get("seed", seed)),
            **kw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad error model: {exc}") from exc


def _backend_echo(sec: dict, seed: int) -> dict:
    echo = {"kind": sec.get("kind", "affine_ssd")}
    for k, v in sec.items():
        if k not in ("kind",):
            echo[k] = v
    echo.setdefault("seed", seed)
    return echo


def _build_backend(cfg: dict, out_dir: Path, seed: int):
    sec = _section(cfg, "backend")
    kind = sec.get("kind", "affine_ssd")
    if kind == "affine_ssd":
        backend = AffineSsdBackend(
            levels=int(sec.get("levels", 3)),
            iters=int(sec.get("iters", 80)),
            step=float(sec.get("step", 0.5)),
        )
    elif kind == "demons":
        backend = DemonsBackend(
            iters=int(sec.get("iters", 60)),
            smooth_sigma=float(sec.get("smooth_sigma", 1.0)),
        )
    elif kind == "oracle":
        gt_path = out_dir / "gt.rcv"
        if not gt_path.exists():
            raise FileNotFoundError(f"oracle backend needs {gt_path} (run simulate-pair first)")
        model = _build_error_model(_section(sec, "error_model"), seed)
        backend = OracleBackend(_dense_from_file(gt_path), model)
    else:
        raise ConfigError(f"unknown backend kind {kind!r}")
    return backend, _backend_echo(sec, seed)


def _dense_from_file(path) -> DenseTransform:
    vol = read_volume(path)
    if vol.channels != 3:
        raise VolumeFormatError(f"{path}: expected a 3-channel displacement volume")
    return DenseTransform(vol.data.astype(np.float64))


def _dense_to_volume(t: DenseTransform) -> Volume3:
    return Volume3(t.displacement.astype(np.float32))


def _render_dense(t: Transform, shape) -> DenseTransform:
    if isinstance(t, DenseTransform):
        return t
    grid = grid_points(shape).reshape(-1, 3)
    return DenseTransform((t.apply(grid) - grid).reshape(tuple(shape) + (3,)))


def _truth_from(out_dir: Path) -> Transform:
    """Reload ground truth, analytic when the metadata allows it."""
    meta_path = out_dir / "gt.json"
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        info = meta.get("gt", {})
        if info.get("kind") == "translation" and "offset" in info:
            return TranslationTransform(info["offset"])
        if info.get("kind") == "affine" and "matrix" in info:
            return AffineTransform(info["matrix"], info["offset"])
    return _dense_from_file(out_dir / "gt.rcv")


def _mask_from(cfg: dict, shape) -> RoiMask:
    sec = _section(cfg, "evaluate")
    path = sec.get("mask_path")
    if not path:
        return RoiMask.full(shape)
    vol = read_volume(path)
    if vol.shape != tuple(shape) or vol.channels != 1:
        raise ConfigError(f"mask volume {path} must be 1-channel with shape {tuple(shape)}")
    return RoiMask(vol.scalar > 0.5)


def cmd_simulate_pair(cfg: dict, out_dir: Path, seed: int, nifti_path=None) -> int:
    if nifti_path is not None:
        source = read_nifti(nifti_path)
        shape = source.shape
    else:
        shape = _shape_from(cfg)
        sec = _section(cfg, "phantom")
        source = make_phantom(shape, sec.get("kind", "blobs"), seed=int(sec.get("seed", seed)))
    gt_spec = _build_gt_spec(cfg, seed)
    gt, info = simulate_gt_with_info(gt_spec, shape)
    target = warp(source, gt)
    write_volume(out_dir / "source.rcv", source)
    write_volume(out_dir / "target.rcv", target)
    write_volume(out_dir / "gt.rcv", _dense_to_volume(_render_dense(gt, shape)))
    _write_json(
        out_dir / "gt.json",
        {
            "gt": info,
            "gt_spec": asdict(gt_spec),
            "seed": seed,
            "shape": list(shape),
            "source": "nifti-import" if nifti_path else "phantom",
        },
    )
    print(f"wrote pair to {out_dir}")
    return 0


def cmd_estimate(cfg: dict, out_dir: Path, seed: int, threads: int) -> int:
    source = read_volume(out_dir / "source.rcv")
    target = read_volume(out_dir / "target.rcv")
    spec = _build_perturb_spec(cfg, source.shape, seed)
    backend, backend_echo = _build_backend(cfg, out_dir, seed)
    est_sec = _section(cfg, "estimate")
    unbiased = bool(est_sec.get("unbiased", False))
    result = estimate_uncertainty(
        backend, source, target, spec, unbiased=unbiased, threads=threads
    )
    debug = bool(cfg.get("debug", False))
    pred, log_rows = _base_prediction(backend, source, target, debug)
    write_volume(out_dir / "u.rcv", result.uncertainty)
    write_volume(out_dir / "cov.rcv", Volume3(result.cov.astype(np.float32)))
    write_volume(out_dir / "mean.rcv", _dense_to_volume(result.mean))
    write_volume(out_dir / "pred.rcv", _dense_to_volume(pred))
    if isinstance(backend, OracleBackend):
        dec = decompose_cov(backend, spec, spec.count)
        write_volume(out_dir / "intrinsic.rcv", Volume3(dec.intrinsic.astype(np.float32)))
        write_volume(out_dir / "jitter.rcv", Volume3(dec.jitter.astype(np.float32)))
    if log_rows is not None:
        with open(out_dir / "solver_log.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(log_rows[0])
            writer.writerows(log_rows[1:])
    _write_json(
        out_dir / "estimate.json",
        {
            "backend": backend_echo,
            "perturb_spec": asdict(spec),
            "n_samples": result.n_samples,
            "divisor": result.divisor,
            "unbiased": unbiased,
            "seed": seed,
            "threads": threads,
            "deform_strength": spec.deform_strength,
            "wall_time_s": result.wall_time_s,
        },
    )
    print(f"wrote uncertainty maps to {out_dir} (N={result.n_samples})")
    return 0


def _base_prediction(backend, source, target, debug: bool):
    """Unperturbed registration; iteration log captured for solver backends in debug mode."""
    if debug and isinstance(backend, AffineSsdBackend):
        res = affine_ssd_register(
            source, target, levels=backend.levels, iters=backend.iters, step=backend.step
        )
        rows = [("level", "iteration", "ssd", "step")] + [tuple(r) for r in res.log]
        return res.transform, rows
    if debug and isinstance(backend, DemonsBackend):
        res = demons_register(
            source, target, iters=backend.iters, smooth_sigma=backend.smooth_sigma
        )
        rows = [("iteration", "ssd")] + [tuple(r) for r in res.log]
        return res.transform, rows
    return backend.register(source, target), None


def cmd_evaluate(cfg: dict, out_dir: Path, seed: int) -> int:
    u_vol = read_volume(out_dir / "u.rcv")
    pred = _dense_from_file(out_dir / "pred.rcv")
    truth = _truth_from(out_dir)
    mask = _mask_from(cfg, u_vol.shape)
    err = error_map(pred, truth, mask)
    curve = risk_coverage(err, u_vol, mask)
    u_masked = u_vol.scalar[mask.mask].astype(np.float64)
    metrics = {
        "pearson": pearson(err.masked, u_masked),
        "spearman": spearman(err.masked, u_masked),
        "aurc": curve.aurc,
        "oracle_aurc": curve.oracle_aurc,
        "random_aurc": curve.random_aurc,
        "naurc": curve.naurc,
        "mask_voxels": curve.n_voxels,
        "bins": int(_section(cfg, "evaluate").get("bins", 20)),
    }
    write_volume(out_dir / "error.rcv", Volume3(err.values.astype(np.float32)))
    _write_json(out_dir / "metrics.json", metrics)
    with open(out_dir / "risk_coverage.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(("coverage", "risk", "bin_mean_uncertainty"))
        for cv, rk, bu in zip(curve.coverage, curve.risk, curve.bin_mean_uncertainty):
            writer.writerow((repr(float(cv)), repr(float(rk)), repr(float(bu))))
    with open(out_dir / "risk_coverage_binned.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(("coverage", "risk", "bin_mean_uncertainty"))
        for row in bin_curve(curve, metrics["bins"]):
            writer.writerow(
                (repr(row["coverage"]), repr(row["risk"]), repr(row["bin_mean_uncertainty"]))
            )
    shown = {k: v for k, v in metrics.items() if k in ("pearson", "spearman", "naurc")}
    print(f"metrics: {_sanitize(shown)}")
    return 0


def cmd_lemma_check(cfg: dict, out_dir: Path, seed: int) -> int:
    sec = _section(cfg, "lemma")
    grid = tuple(int(s) for s in sec.get("grid", (16, 16, 16)))
    n_mc = int(sec.get("n_mc", 2000))
    phi = _phi_from(sec, grid)
    checks = sec.get("checks")
    if checks is None:
        checks = [{"kind": "translation"}, {"kind": "affine"}]
    reports = []
    all_ok = True
    for chk in checks:
        if "kind" not in chk:
            raise ConfigError("each lemma check needs a 'kind'")
        model = _build_error_model(chk.get("model", {"mu": [0.5, 0.0, 0.0], "sigma": 0.5}), seed)
        rep = verify_lemma(
            chk["kind"],
            model,
            phi,
            grid,
            n_mc=int(chk.get("n_mc", n_mc)),
            seed=int(chk.get("seed", seed)),
            strength=float(chk.get("strength", 0.08)),
            grid_spacing=int(chk.get("grid_spacing", 10)),
            node_max=float(chk.get("node_max", 12.5)),
        )
        reports.append(rep.to_dict())
        status = "PASS" if rep.passed else "FAIL"
        print(
            f"[lemma-check] {status} kind={rep.kind} median_rel_err={rep.median_rel_error:.4f} "
            f"tol={rep.tolerance:.4f} note={rep.note}"
        )
        all_ok = all_ok and rep.passed
    mse_reports = []
    for case in sec.get("mse", []):
        model = _build_error_model(case.get("model", {}), seed)
        draws = int(case.get("draws", 2000))
        oracle = OracleBackend(phi, model)
        rep = mse_decomposition_check(oracle, draws, grid)
        band = 3.0 * rep.chi2_rel_std if math.isfinite(rep.chi2_rel_std) else 0.05
        ok = abs(rep.mean_empirical - rep.mean_expected) <= max(band, 0.05) * max(
            rep.mean_expected, 1e-12
        )
        mse_reports.append({**rep.to_dict(), "passed": ok})
        status = "PASS" if ok else "FAIL"
        print(
            f"[lemma-check] {status} mse mean_emp={rep.mean_empirical:.4f} "
            f"mean_expected={rep.mean_expected:.4f}"
        )
        all_ok = all_ok and ok
    _write_json(
        out_dir / "lemma_report.json",
        {"grid": list(grid), "n_mc": n_mc, "seed": seed, "checks": reports, "mse": mse_reports},
    )
    return 0 if all_ok else 2


def _phi_from(sec: dict, grid) -> Transform:
    phi = sec.get("phi", {"kind": "translation", "offset": [1.5, -0.75, 0.5]})
    kind = phi.get("kind", "translation")
    if kind == "identity":
        return TranslationTransform((0.0, 0.0, 0.0))
    if kind == "translation":
        return TranslationTransform(phi.get("offset", [1.5, -0.75, 0.5]))
    if kind == "affine":
        if "matrix" not in phi:
            raise ConfigError("affine phi needs a 'matrix'")
        return AffineTransform(phi["matrix"], phi.get("offset", [0.0, 0.0, 0.0]))
    raise ConfigError(f"unknown phi kind {kind!r}")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="regcert",
        description="Registration uncertainty from perturbed re-registrations.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    specs = {
        "simulate-pair": "synthesize a source/target pair with known ground truth",
        "estimate": "run the perturbation-based uncertainty estimator",
        "evaluate": "score the uncertainty map against the true error",
        "lemma-check": "verify closed-form covariance identities by Monte Carlo",
    }
    for name, help_text in specs.items():
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--config", required=True, help="JSON config path")
        q.add_argument("--out", required=True, help="output directory")
        q.add_argument("--seed", type=int, default=None, help="override config seed")
        q.add_argument("--threads", type=int, default=None, help="worker cap for sampling")
        if name == "simulate-pair":
            q.add_argument("--import-nifti", dest="import_nifti", default=None,
                           help="use this NIfTI-1 float32 image as the source")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        threads = args.threads if args.threads is not None else int(cfg.get("threads", 1))
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        if args.command == "simulate-pair":
            return cmd_simulate_pair(cfg, out_dir, seed, nifti_path=args.import_nifti)
        if args.command == "estimate":
            return cmd_estimate(cfg, out_dir, seed, threads)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out_dir, seed)
        return cmd_lemma_check(cfg, out_dir, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (VolumeFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
