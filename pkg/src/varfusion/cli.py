"""Command-line driver: ``varfusion {simulate,fuse,denoise,eval,render}``.

Exit codes
----------
0  success, every output written
1  unexpected internal error
2  usage error (bad flags)
3  input file missing or unreadable, output not writable
4  malformed file or config (HSC, checkpoint, manifest, YAML)
5  dimension mismatch between inputs
6  numerical failure during fusion or training
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import CheckpointError, denoise, load_checkpoint, make_denoisers
from .denoiser import save_checkpoint
from .imaging import (
    DimensionError,
    HyperImage,
    SensorModel,
    simulate_pair,
    synthesize_variability,
    synthetic_scene,
)
from .io import (
    COMPOSITES,
    ConfigError,
    HscError,
    RunConfig,
    atomic_write,
    load_config,
    read_hsc,
    render_composite,
    write_hsc,
    write_report,
)
from .metrics import evaluate
from .optimizer import FusionConfig, FusionError, bicubic_baseline, run_fusion

log = logging.getLogger("varfusion")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_DIMS, EXIT_NUMERIC = range(7)

MANIFEST = "manifest.json"


class ManifestError(ValueError):
    pass


def _snr(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise argparse.ArgumentTypeError("SNR must be a number or 'inf'")
    return v


# -- manifests ----------------------------------------------------------------

def sensor_to_dict(sensor: SensorModel) -> dict:
    return {
        "blur_kernel": sensor.blur_kernel.tolist(),
        "decim_factor": sensor.decim_factor,
        "decim_offset": sensor.decim_offset,
        "srf": sensor.srf.tolist(),
        "boundary": sensor.boundary,
    }


def sensor_from_dict(d: dict) -> SensorModel:
    try:
        return SensorModel(np.array(d["blur_kernel"], dtype=np.float64), int(d["decim_factor"]),
                           np.array(d["srf"], dtype=np.float64), int(d["decim_offset"]),
                           d.get("boundary", "circular"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"invalid sensor description: {exc}") from None


def read_manifest(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or "sensor" not in doc:
        raise ManifestError(f"{path}: no sensor section")
    return doc


def _check_written(*paths) -> None:
    """Re-read written HSC files so that exit status 0 implies parseable outputs."""
    for p in paths:
        read_hsc(p)


def _write_json(path, doc) -> None:
    atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


# -- commands -----------------------------------------------------------------

def cmd_simulate(args, rc: RunConfig) -> int:
    if args.input:
        z_h = read_hsc(args.input)
        z_m_img = read_hsc(args.input_m) if args.input_m else None
    else:
        z_h = synthetic_scene(args.rows, args.cols, args.bands, seed=rc.seed)
        z_m_img = None
    wl = z_h.wavelengths
    zh = np.asarray(z_h.data, dtype=np.float64)
    if z_m_img is not None:
        if z_m_img.shape != z_h.shape:
            raise DimensionError(f"z_m {z_m_img.shape} and z_h {z_h.shape} differ")
        zm = np.asarray(z_m_img.data, dtype=np.float64)
    elif args.scaling > 0 or args.patch_amplitude > 0:
        zm = synthesize_variability(zh, args.scaling, args.patch_size, args.patch_amplitude,
                                    seed=rc.seed)
    else:
        zm = zh.copy()
    sensor = rc.sensor.build(zh.shape[0])
    d = sensor.decim_factor
    if zh.shape[1] % d or zh.shape[2] % d:
        raise DimensionError(f"HR dims {zh.shape[1:]} are not multiples of d = {d}")
    snr = rc.sensor.snr_db if args.snr is None else args.snr
    y_h, y_m = simulate_pair(zh, zm, sensor, snr, rc.seed)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ms_wl = None
    if wl is not None:
        ms_wl = sensor.srf @ wl
        if np.any(np.diff(ms_wl) <= 0):
            ms_wl = None
    write_hsc(HyperImage(y_h, wl), out / "Y_h.hsc")
    write_hsc(HyperImage(y_m, ms_wl), out / "Y_m.hsc")
    write_hsc(HyperImage(zh, wl), out / "Z_h_true.hsc")
    write_hsc(HyperImage(zm, wl), out / "Z_m_true.hsc")
    _write_json(out / MANIFEST, {
        "seed": rc.seed,
        "snr_db": "inf" if math.isinf(snr) else snr,
        "sensor": sensor_to_dict(sensor),
        "hr_shape": list(zh.shape),
        "variability": {"scaling": args.scaling, "patch_size": args.patch_size,
                        "patch_amplitude": args.patch_amplitude,
                        "explicit_z_m": args.input_m is not None},
        "source": args.input or "synthetic",
        "version": __version__,
    })
    _check_written(*(out / n for n in ("Y_h.hsc", "Y_m.hsc", "Z_h_true.hsc", "Z_m_true.hsc")))
    log.info("wrote simulated pair to %s", out)
    return EXIT_OK


def _fusion_inputs(args):
    src = Path(args.input_dir) if args.input_dir else None
    yh_path = args.yh or (src / "Y_h.hsc" if src else None)
    ym_path = args.ym or (src / "Y_m.hsc" if src else None)
    man_path = args.manifest or (src / MANIFEST if src else None)
    if yh_path is None or ym_path is None or man_path is None:
        raise FileNotFoundError("give --input-dir or all of --yh, --ym, --manifest")
    y_h, y_m = read_hsc(yh_path), read_hsc(ym_path)
    sensor = sensor_from_dict(read_manifest(man_path)["sensor"])
    if y_h.bands != sensor.n_hs or y_m.bands != sensor.n_ms:
        raise DimensionError(f"band counts (HI {y_h.bands}, MI {y_m.bands}) do not match "
                             f"the manifest SRF {sensor.srf.shape}")
    d = sensor.decim_factor
    if (y_m.rows, y_m.cols) != (y_h.rows * d, y_h.cols * d):
        raise DimensionError(f"MI dims {(y_m.rows, y_m.cols)} are not {d}x the HI dims "
                             f"{(y_h.rows, y_h.cols)}")
    return y_h, y_m, sensor


def cmd_fuse(args, rc: RunConfig) -> int:
    y_h, y_m, sensor = _fusion_inputs(args)
    cfg = rc.fusion
    if args.preset:
        base = {k: getattr(cfg, k) for k in ("bcd_iters", "cg_iters", "cg_tol", "rho",
                                              "epsilon", "red_steps", "stop_tol")}
        cfg = FusionConfig.preset(args.preset, **base)
    if args.bcd_iters is not None:
        cfg = cfg.replace(bcd_iters=args.bcd_iters)
    cfg = cfg.replace(seed=rc.seed)
    tc = rc.train
    if args.epochs_initial is not None:
        tc = replace(tc, epochs_initial=args.epochs_initial)
    if args.epochs_finetune is not None:
        tc = replace(tc, epochs_finetune=args.epochs_finetune)
    den_h, den_m = (None, None) if args.no_denoiser else make_denoisers(rc.l_h, tc, rc.seed)

    trace_lines = []

    def progress(state):
        trace_lines.append(f"{state.iteration} {state.objective_trace[-1]!r}")
        log.info("iteration %d/%d objective %.6e", state.iteration, cfg.bcd_iters,
                 state.objective_trace[-1])

    z_h, z_m, _ = run_fusion(y_h.data, y_m.data, sensor, cfg=cfg, denoiser_h=den_h,
                             denoiser_m=den_m, callback=progress)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_hsc(HyperImage(z_h, y_h.wavelengths), out / "Zh_hat.hsc")
    write_hsc(HyperImage(z_m, y_h.wavelengths), out / "Zm_hat.hsc")
    atomic_write(out / "objective_trace.log",
                 ("# iteration objective\n" + "".join(s + "\n" for s in trace_lines)).encode())
    written = [out / "Zh_hat.hsc", out / "Zm_hat.hsc"]
    if args.baseline == "bicubic":
        write_hsc(HyperImage(bicubic_baseline(y_h.data, sensor), y_h.wavelengths),
                  out / "baseline_bicubic.hsc")
        written.append(out / "baseline_bicubic.hsc")
    _check_written(*written)
    log.info("wrote fused images to %s", out)
    return EXIT_OK


def cmd_denoise(args, rc: RunConfig) -> int:
    img = read_hsc(args.input)
    model = load_checkpoint(args.resume) if args.resume else None
    tc = replace(rc.train, seed=rc.seed)
    if args.epochs is not None:
        tc = replace(tc, epochs_initial=args.epochs, epochs_finetune=args.epochs)
    l_h = args.l_h if args.l_h is not None else rc.l_h
    out, model = denoise(img.data, model, l_h, tc)
    write_hsc(img.with_data(out), args.output)
    _check_written(args.output)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    est, ref = read_hsc(args.est), read_hsc(args.ref)
    if est.shape != ref.shape:
        raise DimensionError(f"estimate {est.shape} and reference {ref.shape} differ")
    ratio = args.ratio if args.ratio is not None else rc.sensor.decim_factor ** 2
    report = evaluate(est.data, ref.data, ratio)
    sys.stdout.write(report.to_text())
    if args.output:
        write_report(report, args.output)
    return EXIT_OK


def cmd_render(args, rc: RunConfig) -> int:
    render_composite(read_hsc(args.input), args.mode, args.output)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        # subcommands repeat the flags with suppressed defaults so that
        # "varfusion --seed 3 fuse" and "varfusion fuse --seed 3" both work
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", metavar="PATH", default=default(None),
                       help="YAML run configuration")
        g.add_argument("--seed", type=int, default=default(None),
                       help="master seed (overrides the config; default 0)")
        g.add_argument("--verbose", "-v", action="store_true", default=default(False),
                       help="log progress to stderr")
        return g

    common = global_flags(lambda _: argparse.SUPPRESS)
    p = argparse.ArgumentParser(
        prog="varfusion", parents=[global_flags(lambda v: v)],
        description="Hyperspectral/multispectral fusion with inter-image variability.",
        epilog="Exit codes: 0 ok, 1 internal error, 2 usage, 3 I/O, 4 malformed input, "
               "5 dimension mismatch, 6 numerical failure.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("simulate", parents=[common], formatter_class=fmt,
                       help="degrade reference images into an (HI, MI) pair")
    s.add_argument("--input", help="reference HR cube (HSC); a synthetic scene when omitted")
    s.add_argument("--input-m", help="second reference for the MI; else variability flags apply")
    s.add_argument("--rows", type=int, default=64, help="synthetic scene rows")
    s.add_argument("--cols", type=int, default=64, help="synthetic scene columns")
    s.add_argument("--bands", type=int, default=20, help="synthetic scene bands")
    s.add_argument("--snr", type=_snr, default=None,
                   help="noise level in dB, 'inf' for none (default: sensor.snr_db = 35)")
    s.add_argument("--scaling", type=float, default=0.0,
                   help="amplitude of smooth multiplicative spectral scaling for z_m")
    s.add_argument("--patch-size", type=int, default=12, help="side of the additive patch")
    s.add_argument("--patch-amplitude", type=float, default=0.0,
                   help="amplitude of the localized additive patch for z_m")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fuse", parents=[common], formatter_class=fmt,
                       help="estimate the HR images from a simulated or measured pair")
    f.add_argument("--input-dir", help="directory holding Y_h.hsc, Y_m.hsc and manifest.json")
    f.add_argument("--yh")
    f.add_argument("--ym")
    f.add_argument("--manifest")
    f.add_argument("--out-dir", required=True)
    f.add_argument("--preset", choices=sorted(FusionConfig.PRESETS),
                   help="parameter preset (default: config file, else moderate)")
    f.add_argument("--bcd-iters", type=int, help="outer iterations (default 20)")
    f.add_argument("--epochs-initial", type=int, help="first denoiser training epochs (2000)")
    f.add_argument("--epochs-finetune", type=int, help="per-iteration fine-tuning epochs (400)")
    f.add_argument("--no-denoiser", action="store_true", help="disable the learned priors")
    f.add_argument("--baseline", choices=["bicubic"], help="also write an interpolation baseline")
    f.set_defaults(func=cmd_fuse)

    d = sub.add_parser("denoise", parents=[common], formatter_class=fmt,
                       help="zero-shot denoise one cube")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--l-h", type=int, help="subspace dimension (default 5)")
    d.add_argument("--epochs", type=int, help="training epochs (default: train.epochs_initial)")
    d.add_argument("--resume", help="checkpoint to fine-tune instead of training from scratch")
    d.add_argument("--checkpoint", help="write the trained model here")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", parents=[common], formatter_class=fmt,
                       help="score an estimate against a reference")
    e.add_argument("--est", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--ratio", type=float, help="HR/LR pixel-count ratio (default d**2 = 16)")
    e.add_argument("--output", help="report path; .json for structured output")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", parents=[common], formatter_class=fmt,
                       help="write an RGB composite PNG")
    r.add_argument("--input", required=True)
    r.add_argument("--mode", choices=sorted(COMPOSITES), default="visible")
    r.add_argument("--output", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        rc = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            rc.seed = args.seed
        return args.func(args, rc)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        code, msg = EXIT_IO, exc
    except (HscError, CheckpointError, ConfigError, ManifestError) as exc:
        code, msg = EXIT_FORMAT, exc
    except DimensionError as exc:
        code, msg = EXIT_DIMS, exc
    except (FusionError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, exc
    except OSError as exc:
        code, msg = EXIT_IO, exc
    except ValueError as exc:
        code, msg = EXIT_USAGE, exc
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        code, msg = EXIT_INTERNAL, exc
    print(f"varfusion {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
