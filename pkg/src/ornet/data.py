"""Image I/O, bicubic resampling, synthetic degradation and dataset manifests.

Images are float64 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DimensionError, ImageDecodeError
from .tensor import Tensor

DEGRADATIONS = ("real", "bicubic", "blur_noise")
_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass
class PatchPair:
    """Aligned low/high resolution images, both (3, h, w) in [0, 1]."""

    lr: np.ndarray
    hr: np.ndarray
    scale: int
    source: str = ""
    tag: str = "real"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in DEGRADATIONS:
            raise ValueError(f"unknown degradation tag {self.tag!r}")
        if self.lr.ndim != 3 or self.hr.ndim != 3:
            raise DimensionError("PatchPair images must be (3, h, w)")
        h, w = self.lr.shape[1:]
        if self.hr.shape[1:] != (self.scale * h, self.scale * w):
            raise DimensionError(f"HR {self.hr.shape[1:]} is not {self.scale}x LR {self.lr.shape[1:]}")


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def _ppm_tokens(raw: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers after the magic."""
    pos, values = 2, []
    while len(values) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageDecodeError("malformed PPM header", path, pos)
        values.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageDecodeError("malformed PPM header", path, pos)
    return values, pos + 1


def _decode_ppm(raw: bytes, path) -> np.ndarray:
    (width, height, maxval), pos = _ppm_tokens(raw, 3, path)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError("invalid PPM dimensions", path, 2)
    bytes_per = 1 if maxval < 256 else 2
    need = width * height * 3 * bytes_per
    if len(raw) - pos < need:
        raise ImageDecodeError(f"truncated PPM pixel data ({len(raw) - pos} of {need} bytes)", path, len(raw))
    dtype = np.uint8 if bytes_per == 1 else np.dtype(">u2")
    pixels = np.frombuffer(raw, dtype=dtype, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1) / float(maxval)


def decode_image(path) -> Tensor:
    """Load an 8-bit PNG or binary PPM (P6) as a 3 x H x W tensor in [0, 1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"cannot read: {exc.strerror}", path) from exc
    if raw[:2] == b"P6":
        return Tensor(_decode_ppm(raw, path))
    if raw[:8] == _PNG_MAGIC:
        try:
            with Image.open(Path(path)) as img:
                img.load()
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, SyntaxError, ValueError) as exc:
            raise ImageDecodeError(f"corrupt PNG: {exc}", path, len(raw)) from exc
        return Tensor(rgb.transpose(2, 0, 1))
    raise ImageDecodeError("unsupported image format (expected PNG or binary PPM)", path, 0)


def quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def encode_image(t, path) -> None:
    """Write a 3 x H x W image; ``.png`` or ``.ppm`` chosen by extension."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"encode_image: expected 3 x H x W, got {arr.shape}")
    pixels = quantize(arr).transpose(1, 2, 0)
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        header = f"P6\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode()
        Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())
    elif suffix == ".png":
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported output extension {suffix!r}")


def encode_pgm(arr: np.ndarray, path) -> None:
    """Write a 2-D array as an 8-bit PGM heatmap, min-max normalized."""
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    pixels = quantize(scaled)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@functools.lru_cache(maxsize=128)
def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """(n_out, n_in) bicubic weights; half-pixel centers, clamped edges.

    When shrinking with ``antialias`` the kernel is stretched by the
    reduction factor, as MATLAB's ``imresize`` does.
    """
    scale = n_in / n_out
    stretch = scale if (antialias and scale > 1) else 1.0
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for dst in range(n_out):
        center = (dst + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        taps = np.arange(lo, int(np.floor(center + support)) + 1)
        w = cubic_kernel((center - taps) / stretch) / stretch
        w /= w.sum()
        for idx, weight in zip(np.clip(taps, 0, n_in - 1), w):
            m[dst, idx] += weight
    m.setflags(write=False)
    return m


def bicubic_resize(x, out_h: int, out_w: int, antialias: bool = True):
    """Resize the last two axes of ``x`` (array or Tensor) to ``out_h x out_w``.

    A Tensor input yields an untracked Tensor; arrays yield arrays.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bicubic_resize: output size must be positive, got {out_h}x{out_w}")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim < 2:
        raise DimensionError("bicubic_resize: need at least 2 dimensions")
    h, w = arr.shape[-2:]
    out = np.matmul(np.matmul(resize_matrix(h, out_h, antialias), arr), resize_matrix(w, out_w, antialias).T)
    return Tensor(out) if isinstance(x, Tensor) else out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    return np.stack([ndimage.gaussian_filter(c, sigma, mode="reflect") for c in img])


def synthesize_degradation(hr, kind: str, scale: int, rng: np.random.Generator,
                           blur_sigma=(1.0, 2.0), noise_sigma=(0.01, 0.03),
                           source: str = "") -> PatchPair:
    """Build an aligned pair from an HR image.

    ``bicubic``: bicubic downscale. ``blur_noise``: Gaussian blur with sigma
    drawn from ``blur_sigma``, bicubic downscale, then additive Gaussian
    noise with sigma drawn from ``noise_sigma``. Results are clipped to [0, 1].
    """
    hr = np.asarray(hr.data if isinstance(hr, Tensor) else hr, dtype=np.float64)
    if kind not in ("bicubic", "blur_noise"):
        raise ValueError(f"unknown degradation kind {kind!r}")
    if hr.ndim != 3:
        raise DimensionError(f"expected 3 x H x W image, got {hr.shape}")
    h, w = hr.shape[1:]
    if h < scale or w < scale:
        raise ValueError(f"image {h}x{w} is smaller than scale {scale}")
    h, w = h - h % scale, w - w % scale
    hr = hr[:, :h, :w]
    meta = {}
    src = hr
    if kind == "blur_noise":
        sigma = float(rng.uniform(*blur_sigma))
        noise = float(rng.uniform(*noise_sigma))
        meta = {"blur_sigma": sigma, "noise_sigma": noise}
        src = gaussian_blur(hr, sigma)
    lr = bicubic_resize(src, h // scale, w // scale)
    if kind == "blur_noise":
        lr = lr + rng.normal(0.0, 1.0, size=lr.shape) * meta["noise_sigma"]
    lr = np.clip(lr, 0.0, 1.0)
    return PatchPair(lr=lr, hr=np.clip(hr, 0.0, 1.0), scale=scale, source=source, tag=kind, meta=meta)


def upsample_lr(pair: PatchPair) -> np.ndarray:
    """Bicubic enlargement of the LR image to the HR grid (the network input)."""
    return bicubic_resize(pair.lr, pair.hr.shape[1], pair.hr.shape[2])


# ---------------------------------------------------------------------------
# synthetic content and manifests
# ---------------------------------------------------------------------------

def synthetic_image(rng: np.random.Generator, height: int, width: int | None = None) -> np.ndarray:
    """Procedural RGB scene: smooth shading, a few shapes with edges, and texture."""
    width = width or height
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((3, height, width))
    base = rng.uniform(0.2, 0.8, size=3)
    grad = rng.uniform(-0.3, 0.3, size=(3, 2))
    for c in range(3):
        img[c] = base[c] + grad[c, 0] * (yy - 0.5) + grad[c, 1] * (xx - 0.5)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        color = rng.uniform(0, 1, size=3)
        if rng.uniform() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.4, 1.0))
        img[:, mask] = 0.5 * img[:, mask] + 0.5 * color[:, None]
    freq = rng.uniform(8, 24, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.08 * np.sin(2 * np.pi * (freq[0] * yy + freq[1] * xx) + phase)
    img += texture[None]
    smooth = ndimage.gaussian_filter(rng.normal(0, 1, size=(height, width)), 2.0)
    img += 0.1 * smooth[None] / (np.abs(smooth).max() + 1e-12)
    return np.clip(img, 0.0, 1.0)


def synthetic_pairs(count: int, size: int, scale: int, kind: str, seed: int) -> list[PatchPair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        hr = synthetic_image(rng, size)
        pairs.append(synthesize_degradation(hr, kind, scale, rng, source=f"synthetic-{seed}-{i}"))
    return pairs


@dataclass
class ManifestEntry:
    hr_path: str
    lr: str
    scale: int

    @property
    def synthetic_kind(self) -> str | None:
        return self.lr[len("SYNTH:"):] if self.lr.startswith("SYNTH:") else None


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``hr<TAB>lr<TAB>scale`` or ``hr<TAB>SYNTH:<kind><TAB>scale`` lines."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(cols)}")
        hr, lr, scale = cols
        try:
            s = int(scale)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: scale {scale!r} is not an integer") from None
        if s not in (2, 3, 4):
            raise ConfigError(f"{path}:{lineno}: scale must be 2, 3 or 4")
        hr = hr if os.path.isabs(hr) else str(base / hr)
        if not lr.startswith("SYNTH:"):
            lr = lr if os.path.isabs(lr) else str(base / lr)
        elif lr[6:] not in ("bicubic", "blur_noise"):
            raise ConfigError(f"{path}:{lineno}: unknown synthetic kind {lr[6:]!r}")
        entries.append(ManifestEntry(hr, lr, s))
    return entries


def load_pairs(manifest, seed: int = 0) -> list[PatchPair]:
    """Load every manifest entry; synthetic LR images are drawn from ``seed``."""
    entries = read_manifest(manifest)
    rng = np.random.default_rng(seed)
    pairs = []
    for e in entries:
        hr = decode_image(e.hr_path).data
        kind = e.synthetic_kind
        if kind is not None:
            pairs.append(synthesize_degradation(hr, kind, e.scale, rng, source=e.hr_path))
            continue
        lr = decode_image(e.lr).data
        h, w = lr.shape[1:]
        if hr.shape[1] < e.scale * h or hr.shape[2] < e.scale * w:
            raise DimensionError(f"{e.hr_path}: HR smaller than {e.scale}x LR")
        pairs.append(PatchPair(lr=lr, hr=hr[:, :e.scale * h, :e.scale * w], scale=e.scale,
                               source=e.hr_path, tag="real"))
    return pairs


def write_toy_dataset(out_dir, count: int, size: int, scale: int, kind: str, seed: int) -> Path:
    """Write ``count`` procedural HR images as PNG plus a SYNTH manifest; returns the manifest path."""
    if kind not in ("bicubic", "blur_noise"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(count):
        name = f"hr_{i:03d}.png"
        encode_image(synthetic_image(rng, size), out / name)
        lines.append(f"{name}\tSYNTH:{kind}\t{scale}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
