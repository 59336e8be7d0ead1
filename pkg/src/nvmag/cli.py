"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 bad data, 4 numeric failure (fit or sign
resolution). Errors are printed to stderr as one JSON object.
"""

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import cubeio, maps, strayfield, synth
from .errors import (
    AllInvalidError,
    AmbiguousSignsError,
    BadDimsError,
    BadStateError,
    BadSweepError,
    BadTimingError,
    CorruptMagicError,
    EmptySceneError,
    HeaderMismatchError,
    NoPeaksError,
    NonPositiveError,
    NotConvergedError,
    OutOfBandError,
    SingularPointError,
)
from .fitting import fit_rabi, hwhm_to_fwhm, moving_average_3x3

_DATA_ERRORS = (
    OSError,
    json.JSONDecodeError,
    KeyError,
    CorruptMagicError,
    HeaderMismatchError,
    BadDimsError,
    EmptySceneError,
    BadStateError,
    BadSweepError,
    BadTimingError,
    AllInvalidError,
    ValueError,
)
_NUMERIC_ERRORS = (
    AmbiguousSignsError,
    NoPeaksError,
    NotConvergedError,
    NonPositiveError,
    OutOfBandError,
    SingularPointError,
)


class UsageError(Exception):
    pass


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def _parse_floats(text, n, what):
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"cannot parse {what}: {text!r}") from exc
    if len(vals) != n:
        raise UsageError(f"{what} needs {n} comma-separated values, got {len(vals)}")
    return vals


def _parse_region(text):
    x, y, w, h = (int(v) for v in _parse_floats(text, 4, "region"))
    return maps.Region(x, y, w, h)


def _schedule_from_args(args):
    return synth.build_schedule(
        t_laser=args.laser,
        t_mw=args.mw,
        t_exposure=args.exposure,
        sweep_start=args.sweep_start,
        sweep_stop=args.sweep_stop,
        sweep_step=args.sweep_step,
        n_avg=args.averages,
    )


def _add_schedule_flags(p):
    p.add_argument("--sweep-start", type=float, default=2.65e9, help="sweep start (Hz)")
    p.add_argument("--sweep-stop", type=float, default=2.88e9, help="sweep stop (Hz)")
    p.add_argument("--sweep-step", type=float, default=1e6, help="sweep step (Hz)")
    p.add_argument("--exposure", type=float, default=20e-3, help="camera exposure (s)")
    p.add_argument("--laser", type=float, default=50e-6, help="laser init/readout pulse (s)")
    p.add_argument("--mw", type=float, default=110e-9, help="MW pi-pulse duration (s)")
    p.add_argument("--averages", type=int, default=30, help="number of sweep averages")


def _load_scene(spec):
    if spec == "demo":
        with resources.files("nvmag").joinpath("data/demo_scene.json").open() as f:
            return strayfield.Scene.from_json_dict(json.load(f))
    return strayfield.Scene.load(spec)


def _load_fmaps(fits_dir):
    d = Path(fits_dir)
    nu = np.stack([cubeio.read_map_csv(d / f"nu_{i}.csv") for i in range(4)], axis=-1)
    amp = np.stack([cubeio.read_map_csv(d / f"amp_{i}.csv") for i in range(4)], axis=-1)
    glw = np.stack([cubeio.read_map_csv(d / f"gamma_{i}.csv") for i in range(4)], axis=-1)
    converged = cubeio.read_map_csv(d / "converged.csv") > 0.5
    assigned = cubeio.read_map_csv(d / "assigned.csv") > 0.5
    rss = cubeio.read_map_csv(d / "rss.csv")
    baseline = cubeio.read_map_csv(d / "baseline.csv")
    return maps.FrequencyMaps(
        nu=nu, amplitudes=amp, gamma_hwhm=glw, baseline=baseline, rss=rss,
        converged=converged, assigned=assigned,
    )


def _check_convergence(fmaps, max_unconverged):
    bad = 1.0 - float(np.mean(fmaps.converged & fmaps.assigned))
    if bad > max_unconverged:
        raise NotConvergedError(
            f"{bad:.1%} of pixels failed to fit (limit {max_unconverged:.1%})"
        )


def cmd_schedule(args):
    print(json.dumps(_schedule_from_args(args).to_json_dict(), indent=2))
    return 0


def cmd_simulate(args):
    scene = _load_scene(args.scene)
    bias = np.array(_parse_floats(args.bias, 3, "bias"))
    schedule = _schedule_from_args(args)
    fieldmap = strayfield.field_map(scene)
    cube = synth.synth_cube(
        fieldmap, bias, schedule, photons_per_pixel=args.photons, seed=args.seed
    )
    cubeio.write_cube(cube, args.out)
    print(json.dumps({"out": str(args.out), "width": cube.width_px,
                      "height": cube.height_px, "n_freq": cube.n_freq}))
    return 0


def cmd_rabi(args):
    durations = np.linspace(0.0, args.max_duration, args.points)
    tau, fluor = synth.rabi_trace(
        durations, t_pi_true=args.t_pi, decay=args.decay,
        f0=args.f0, contrast=args.contrast, seed=args.seed,
    )
    out = {"t_pi_s": args.t_pi}
    if args.fit:
        fit = fit_rabi(tau, fluor, guess_freq=1.0 / (2.0 * args.t_pi))
        out = {
            "t_pi_s": fit.t_pi,
            "rabi_freq_hz": fit.rabi_freq,
            "decay_s": None if np.isinf(fit.decay) else fit.decay,
            "contrast": fit.contrast,
            "rss": fit.rss,
        }
    if args.trace_out:
        with open(args.trace_out, "w", encoding="utf-8") as f:
            f.write("duration_s,fluorescence\n")
            for t, v in zip(tau, fluor):
                f.write(f"{float(t)!r},{float(v)!r}\n")
    print(json.dumps(out))
    return 0


def cmd_calibrate(args):
    cube = cubeio.read_cube(args.cube)
    calib = maps.calibrate_bias(cube, _parse_region(args.region))
    print(json.dumps(calib.to_json_dict(), indent=2))
    return 0


def cmd_fit(args):
    cube = cubeio.read_cube(args.cube)
    with open(args.calib, "r", encoding="utf-8") as f:
        calib = maps.BiasCalibration.from_json_dict(json.load(f))
    smoothed = moving_average_3x3(cube)
    fmaps = maps.frequency_maps(smoothed, calib)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(4):
        cubeio.write_map_csv(out / f"nu_{i}.csv", fmaps.nu[:, :, i])
        cubeio.write_map_csv(out / f"amp_{i}.csv", fmaps.amplitudes[:, :, i])
        cubeio.write_map_csv(out / f"gamma_{i}.csv", fmaps.gamma_hwhm[:, :, i])
    cubeio.write_map_csv(out / "converged.csv", fmaps.converged.astype(float))
    cubeio.write_map_csv(out / "assigned.csv", fmaps.assigned.astype(float))
    cubeio.write_map_csv(out / "rss.csv", fmaps.rss)
    cubeio.write_map_csv(out / "baseline.csv", fmaps.baseline)
    print(json.dumps({
        "out": str(out),
        "converged_fraction": float(np.mean(fmaps.converged)),
        "assigned_fraction": float(np.mean(fmaps.assigned)),
    }))
    _check_convergence(fmaps, args.max_unconverged)
    return 0


def cmd_reconstruct(args):
    cube = cubeio.read_cube(args.cube)
    with open(args.calib, "r", encoding="utf-8") as f:
        calib = maps.BiasCalibration.from_json_dict(json.load(f))
    smoothed = moving_average_3x3(cube)
    fmaps = maps.frequency_maps(smoothed, calib)
    _check_convergence(fmaps, args.max_unconverged)
    vmaps = maps.vector_maps(fmaps, calib, subtract_bias=args.subtract_bias)
    magnitude, angle, _ = maps.magnitude_and_angle(vmaps)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    b = np.where(vmaps.valid[:, :, None], vmaps.b, np.nan)
    cubeio.write_vector_csv(out / "vector.csv", b)
    cubeio.write_map_csv(out / "magnitude.csv", np.where(vmaps.valid, magnitude, np.nan))
    cubeio.write_map_csv(out / "angle.csv", angle)
    for i, name in enumerate(("bx", "by", "bz")):
        cubeio.render_map(b[:, :, i], out / f"{name}.pgm")
    cubeio.render_map(np.where(vmaps.valid, magnitude, np.nan), out / "magnitude.pgm")
    print(json.dumps({
        "out": str(out),
        "valid_fraction": float(np.mean(vmaps.valid)),
        "bias_subtracted": vmaps.bias_subtracted,
    }))
    return 0


def cmd_sensitivity(args):
    cube = cubeio.read_cube(args.cube)
    fmaps = _load_fmaps(args.fits)
    if ";" in args.corners:
        regions = [_parse_region(r) for r in args.corners.split(";")]
    else:
        w, h = (int(v) for v in _parse_floats(args.corners, 2, "corners"))
        regions = maps.default_corner_regions(cube.width_px, cube.height_px, size=w)
        if h != w:
            regions = [maps.Region(r.x, r.y, w, h) for r in regions]
    report = maps.sensitivity_report(cube, fmaps, regions)
    print(json.dumps(report.to_json_dict(), indent=2))
    return 0


def cmd_render(args):
    values = cubeio.read_map_csv(args.map)
    lo, hi = _parse_floats(args.clip, 2, "clip")
    cubeio.render_map(values, args.out, percentile_clip=(lo, hi))
    print(json.dumps({"out": str(args.out)}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nvmag",
        description="Widefield NV vector magnetometry: simulate and analyze ODMR cubes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="print the derived pulse schedule as JSON")
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="forward-model a contrast cube")
    p.add_argument("--scene", required=True, help="scene JSON path, or 'demo'")
    p.add_argument("--bias", default="4.1e-3,0.72e-3,1.1e-3", help="bias field T as bx,by,bz")
    p.add_argument("--photons", type=float, default=1e4, help="reference counts per pixel per exposure")
    p.add_argument("--seed", type=int, default=None, help="RNG seed; omit for a noiseless cube")
    p.add_argument("--out", required=True, help="output cube path")
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rabi", help="synthesize and/or fit a Rabi trace")
    p.add_argument("--t-pi", type=float, default=110e-9, help="true pi-pulse duration (s)")
    p.add_argument("--decay", type=float, default=2e-6, help="oscillation decay time (s)")
    p.add_argument("--f0", type=float, default=1e4, help="fluorescence level (counts)")
    p.add_argument("--contrast", type=float, default=0.2, help="Rabi contrast")
    p.add_argument("--points", type=int, default=101, help="number of durations")
    p.add_argument("--max-duration", type=float, default=400e-9, help="longest pulse (s)")
    p.add_argument("--seed", type=int, default=None, help="Poisson noise seed")
    p.add_argument("--fit", action="store_true", help="fit the trace and report t_pi")
    p.add_argument("--trace-out", default=None, help="optional CSV path for the trace")
    p.set_defaults(func=cmd_rabi)

    p = sub.add_parser("calibrate", help="extract the bias field from a region")
    p.add_argument("--cube", required=True)
    p.add_argument("--region", required=True, help="x,y,w,h in pixels")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit", help="per-pixel frequency maps and diagnostics")
    p.add_argument("--cube", required=True)
    p.add_argument("--calib", required=True, help="calibration JSON from 'calibrate'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-unconverged", type=float, default=0.05)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("reconstruct", help="vector, magnitude and angle maps")
    p.add_argument("--cube", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--subtract-bias", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-unconverged", type=float, default=0.05)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sensitivity", help="per-orientation sensitivity report")
    p.add_argument("--cube", required=True)
    p.add_argument("--fits", required=True, help="directory produced by 'fit'")
    p.add_argument("--corners", default="10,10",
                   help="corner size 'w,h', or four regions 'x,y,w,h;...'")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("render", help="render a CSV map to 16-bit PGM")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip", default="1,99", help="percentile clip 'lo,hi'")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(exc, 2)
    except _NUMERIC_ERRORS as exc:
        return _fail(exc, 4)
    except _DATA_ERRORS as exc:
        return _fail(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
