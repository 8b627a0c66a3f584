"""Raster files: 8-bit PNG for radio maps and images, raw float32 plus a text sidecar for heights and features."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image


class RasterError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".hdr")


def write_raw(path, array, units: str = "") -> str:
    """Little-endian float32 raster with a ``.hdr`` sidecar (shape, dtype, units, checksum).

    Returns the checksum of the data file.
    """
    path = Path(path)
    data = np.ascontiguousarray(array, dtype="<f4")
    raw = data.tobytes()
    digest = hashlib.sha256(raw).hexdigest()
    path.write_bytes(raw)
    lines = [f"shape={','.join(str(s) for s in data.shape)}", "dtype=float32le", f"units={units}",
             f"sha256={digest}"]
    sidecar_path(path).write_text("\n".join(lines) + "\n")
    return digest


def read_header(path) -> dict:
    hdr = sidecar_path(path)
    if not hdr.exists():
        raise RasterError(f"{path}: missing sidecar {hdr.name}")
    out = {}
    for line in hdr.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    for key in ("shape", "dtype", "sha256"):
        if key not in out:
            raise RasterError(f"{hdr}: missing key {key!r}")
    out["shape"] = tuple(int(s) for s in out["shape"].split(",") if s)
    return out


def read_raw(path) -> np.ndarray:
    """Read a raw raster; raises :class:`RasterError` on size or checksum mismatch."""
    hdr = read_header(path)
    if hdr["dtype"] != "float32le":
        raise RasterError(f"{path}: unsupported dtype {hdr['dtype']}")
    raw = Path(path).read_bytes()
    expected = 4 * int(np.prod(hdr["shape"], dtype=np.int64))
    if len(raw) != expected:
        raise RasterError(f"{path}: expected {expected} bytes for shape {hdr['shape']}, found {len(raw)}")
    if hashlib.sha256(raw).hexdigest() != hdr["sha256"]:
        raise RasterError(f"{path}: checksum mismatch")
    return np.frombuffer(raw, dtype="<f4").reshape(hdr["shape"]).copy()


def _to_u8(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise RasterError("raster contains non-finite values")
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png_gray(path, gray):
    """Grayscale values in [0, 1] quantised to 8 bits."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise RasterError("grayscale raster must be 2D")
    Image.fromarray(_to_u8(gray)).save(path, format="PNG")


def _open_png(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, SyntaxError) as exc:
        raise RasterError(f"{path}: unreadable PNG ({exc})") from exc
    return im


def read_png_gray(path) -> np.ndarray:
    with _open_png(path) as im:
        if im.mode != "L":
            raise RasterError(f"{path}: expected 8-bit grayscale, found mode {im.mode}")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_png_rgba(path, image):
    """``(4, H, W)`` image in [0, 1]; the fourth channel (infrared) is stored as alpha."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 4:
        raise RasterError("RGBA raster must be (4, H, W)")
    Image.fromarray(np.ascontiguousarray(np.moveaxis(_to_u8(image), 0, -1))).save(path, format="PNG")


def read_png_rgba(path) -> np.ndarray:
    with _open_png(path) as im:
        if im.mode != "RGBA":
            raise RasterError(f"{path}: expected RGBA, found mode {im.mode}")
        return np.moveaxis(np.asarray(im, dtype=np.float64) / 255.0, -1, 0)
