"""Image I/O, bicubic resampling, LR synthesis and paired patch sampling.

Images are numpy ``uint8`` arrays: ``(H, W)`` for grayscale, ``(H, W, 3)``
for RGB. Network-facing tensors are float32 ``(C, H, W)`` in [0, 1].
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SCALE = 4


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------- I/O

def _read_pnm(data: bytes, path) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported PNM type {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError(f"{path}: truncated header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = data[pos:pos + n]
    if len(raster) < n:
        raise ImageFormatError(f"{path}: truncated raster ({len(raster)} of {n} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3).copy() if channels == 3 else arr.reshape(h, w).copy()


def _png_bit_depth(data: bytes) -> int | None:
    # IHDR is always the first chunk: 8-byte signature, 8-byte chunk header, w, h, depth
    if data[:8] == b"\x89PNG\r\n\x1a\n" and len(data) > 24:
        return data[24]
    return None


def load_image(path) -> np.ndarray:
    """Read PNG, PPM (P6) or PGM (P5) into a uint8 array.

    PNGs come back as RGB unless they are plain 8-bit grayscale.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return _read_pnm(data, path)
    depth = _png_bit_depth(data)
    if depth is None:
        raise ImageFormatError(f"{path}: unsupported format")
    if depth > 8:
        raise ImageFormatError(f"{path}: unsupported bit depth {depth}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                return np.asarray(im, dtype=np.uint8).copy()
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def encode_image(img: np.ndarray, fmt: str) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("images must be uint8")
    if fmt in ("ppm", "pgm", "pnm"):
        if img.ndim == 2:
            header = b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0])
        elif img.ndim == 3 and img.shape[2] == 3:
            header = b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0])
        else:
            raise ValueError(f"cannot write shape {img.shape} as PNM")
        return header + np.ascontiguousarray(img).tobytes()
    if fmt == "png":
        import io
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="PNG")
        return buf.getvalue()
    raise ImageFormatError(f"unsupported output format {fmt!r}")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(img: np.ndarray, path) -> None:
    """Write by extension (.png, .ppm, .pgm, .pnm); grayscale PNM is always P5."""
    path = Path(path)
    fmt = path.suffix.lower().lstrip(".")
    atomic_write(path, encode_image(img, fmt))


# ---------------------------------------------------------------- conversions

def to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 luma as float64 on the 0-255 scale."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    rgb = img.astype(np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def round_to_uint8(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half away from zero."""
    clipped = np.clip(values, 0.0, 255.0)
    return np.floor(clipped + 0.5).astype(np.uint8)


def image_to_tensor(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    return (img.transpose(2, 0, 1).astype(np.float32) / 255.0)


def tensor_to_image(t: np.ndarray) -> np.ndarray:
    return round_to_uint8(np.asarray(t, dtype=np.float64).transpose(1, 2, 0) * 255.0).squeeze()


# ---------------------------------------------------------------- resampling

def keys_kernel(x, a: float = -0.5):
    """Keys cubic-convolution kernel (support [-2, 2])."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def resize_weights(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Dense ``(n_out, n_in)`` interpolation matrix along one axis."""
    scale = n_out / n_in
    # stretch the kernel when shrinking so it also low-pass filters
    stretch = min(scale, 1.0) if antialias else 1.0
    support = 2.0 / stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centers - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    offsets = first[:, None] + np.arange(taps)[None, :]
    w = keys_kernel((centers[:, None] - offsets) * stretch)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, reflect_index(offsets, n_in).ravel()), w.ravel())
    return mat


def bicubic_resize_float(img: np.ndarray, out_w: int, out_h: int,
                         antialias: bool = True) -> np.ndarray:
    """Separable bicubic resize without quantization (float64 result)."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    wy = resize_weights(h, out_h, antialias)
    wx = resize_weights(w, out_w, antialias)
    if arr.ndim == 2:
        return wy @ arr @ wx.T
    return np.einsum("ij,jkc,lk->ilc", wy, arr, wx, optimize=True)


def bicubic_resize(img: np.ndarray, out_w: int, out_h: int, antialias: bool = True) -> np.ndarray:
    return round_to_uint8(bicubic_resize_float(img, out_w, out_h, antialias))


def degrade(hr: np.ndarray) -> np.ndarray:
    """Synthesize the x4 low-resolution counterpart by bicubic downscaling."""
    h, w = hr.shape[:2]
    if h % SCALE or w % SCALE:
        raise ValueError(f"HR size {w}x{h} is not divisible by {SCALE}")
    return bicubic_resize(hr, w // SCALE, h // SCALE)


# ---------------------------------------------------------------- patches

@dataclass
class PatchPair:
    lr_patch: np.ndarray
    hr_patch: np.ndarray
    source_id: str
    lr_xy: tuple[int, int]
    hr_xy: tuple[int, int]


def sample_patch_pairs(hr: np.ndarray, lr, patch: int, count: int, seed: int,
                       source_id: str = "") -> list[PatchPair]:
    """Draw ``count`` aligned (LR, HR) patch pairs uniformly at random.

    ``lr`` may be a uint8 image or an already-built float ``(C, h, w)``
    network input (e.g. with edge channels).
    """
    hr_t = image_to_tensor(hr) if hr.dtype == np.uint8 else np.asarray(hr, np.float32)
    lr_t = image_to_tensor(lr) if np.asarray(lr).dtype == np.uint8 else np.asarray(lr, np.float32)
    _, lh, lw = lr_t.shape
    if patch > lh or patch > lw:
        raise ValueError(f"patch {patch} larger than LR image {lw}x{lh}")
    if hr_t.shape[1] != SCALE * lh or hr_t.shape[2] != SCALE * lw:
        raise ValueError("HR image is not exactly x4 the LR image")
    rng = np.random.default_rng(seed)
    pairs = []
    hp = SCALE * patch
    for _ in range(count):
        y = int(rng.integers(0, lh - patch + 1))
        x = int(rng.integers(0, lw - patch + 1))
        hy, hx = SCALE * y, SCALE * x
        pairs.append(PatchPair(
            lr_patch=lr_t[:, y:y + patch, x:x + patch].copy(),
            hr_patch=hr_t[:, hy:hy + hp, hx:hx + hp].copy(),
            source_id=source_id, lr_xy=(x, y), hr_xy=(hx, hy)))
    return pairs
