"""Persistent formats: the cube container, CSV map exports and PGM renders.

Cube container layout (single file, atomic to copy):
  * line 1: magic ``ODMRCUBE1`` plus newline,
  * line 2: one JSON object (UTF-8, canonical key order, no embedded
    newlines) describing the cube,
  * payload: little-endian float32, frequency-major then row-major
    (``index = f*H*W + y*W + x``).

The payload therefore starts right after the second newline; byte
comparisons that must ignore the header timestamp can compare from that
offset on.
"""

import json
from datetime import datetime, timezone

import numpy as np

from .errors import AllInvalidError, CorruptMagicError, HeaderMismatchError
from .synth import OdmrCube, PulseSchedule

MAGIC = b"ODMRCUBE1\n"


def _cube_header_dict(cube: OdmrCube) -> dict:
    header = {
        "created_utc": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "width": cube.width_px,
        "height": cube.height_px,
        "n_freq": cube.n_freq,
        "frequencies_hz": cube.frequencies.tolist(),
        "schedule": cube.schedule.to_json_dict(),
        "ref_counts_mean": cube.ref_counts_mean,
    }
    if cube.rng_seed is not None:
        header["rng_seed"] = cube.rng_seed
    return header


def write_cube(cube: OdmrCube, path) -> None:
    header = json.dumps(_cube_header_dict(cube), sort_keys=True, separators=(",", ":"))
    payload = np.ascontiguousarray(cube.contrast.transpose(2, 0, 1)).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        f.write(payload)


def read_cube_parts(path):
    """Raw pieces of a cube file: ``(header dict, payload bytes)``."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CorruptMagicError(f"{path}: bad magic {magic!r}")
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HeaderMismatchError(f"{path}: unreadable header") from exc
        payload = f.read()
    return header, payload


def read_cube(path) -> OdmrCube:
    header, payload = read_cube_parts(path)
    w, h, n_f = header["width"], header["height"], header["n_freq"]
    expected = 4 * w * h * n_f
    if len(payload) != expected:
        raise HeaderMismatchError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n_f, h, w)
    return OdmrCube(
        frequencies=np.asarray(header["frequencies_hz"], dtype=float),
        contrast=np.ascontiguousarray(data.transpose(1, 2, 0)),
        ref_counts_mean=float(header["ref_counts_mean"]),
        schedule=PulseSchedule.from_json_dict(header["schedule"]),
        rng_seed=header.get("rng_seed"),
    )


# ---------------------------------------------------------------------------
# CSV map exports (lossless)


def write_map_csv(path, values) -> None:
    """Scalar map as ``x,y,value`` rows (pixel indices, full float precision)."""
    values = np.asarray(values, dtype=float)
    h, w = values.shape
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    with open(path, "w", encoding="utf-8") as f:
        f.write("x,y,value\n")
        for x, y, v in zip(xs.ravel(), ys.ravel(), values.ravel()):
            f.write(f"{x},{y},{float(v)!r}\n")


def read_map_csv(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xs = rows[:, 0].astype(int)
    ys = rows[:, 1].astype(int)
    out = np.full((ys.max() + 1, xs.max() + 1), np.nan)
    out[ys, xs] = rows[:, 2]
    return out


def write_vector_csv(path, b) -> None:
    """Vector map as ``x,y,bx,by,bz`` rows (tesla)."""
    b = np.asarray(b, dtype=float)
    h, w, _ = b.shape
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    with open(path, "w", encoding="utf-8") as f:
        f.write("x,y,bx,by,bz\n")
        for x, y, (bx, by, bz) in zip(xs.ravel(), ys.ravel(), b.reshape(-1, 3)):
            f.write(f"{x},{y},{float(bx)!r},{float(by)!r},{float(bz)!r}\n")


def read_vector_csv(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xs = rows[:, 0].astype(int)
    ys = rows[:, 1].astype(int)
    out = np.full((ys.max() + 1, xs.max() + 1, 3), np.nan)
    out[ys, xs] = rows[:, 2:5]
    return out


# ---------------------------------------------------------------------------
# PGM renders (16-bit grayscale with a JSON sidecar for the value mapping)


def render_map(values, path, percentile_clip=(1.0, 99.0)) -> dict:
    """Render a scalar map to 16-bit PGM, linearly scaled between percentiles.

    Non-finite pixels render as 0. A degenerate range (min == max) renders
    mid-gray (32768). The sidecar ``<path>.json`` records the linear
    gray <-> value mapping: ``value = vmin + gray/65535 * (vmax - vmin)``.
    Returns the sidecar dict.
    """
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not np.any(finite):
        raise AllInvalidError("map has no finite values to render")
    lo, hi = percentile_clip
    vmin = float(np.percentile(values[finite], lo))
    vmax = float(np.percentile(values[finite], hi))

    gray = np.zeros(values.shape, dtype=np.uint16)
    if vmax > vmin:
        scaled = np.clip((values[finite] - vmin) / (vmax - vmin), 0.0, 1.0)
        gray[finite] = np.round(scaled * 65535.0).astype(np.uint16)
    else:
        gray[finite] = 32768

    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(gray.astype(">u2").tobytes())

    sidecar = {
        "vmin": vmin,
        "vmax": vmax,
        "width": w,
        "height": h,
        "percentile_clip": [lo, hi],
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True)
    return sidecar


def read_pgm(path):
    """Read a 16-bit P5 PGM back into a uint16 array (for round-trip checks)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError("not a P5 PGM")
        w, h = (int(t) for t in f.readline().split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(), dtype=">u2" if maxval > 255 else "u1")
    return data.reshape(h, w).astype(np.uint16), maxval


def values_from_render(gray, sidecar) -> np.ndarray:
    """Invert a render via its sidecar mapping (to quantization precision)."""
    return sidecar["vmin"] + gray.astype(float) / 65535.0 * (sidecar["vmax"] - sidecar["vmin"])
