"""Image I/O, synthetic degradations, patch sampling and dataset manifests."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .tensor import InputValidationError


class ImageDecodeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


IMAGE_EXTENSIONS = (".png", ".ppm")

# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def quantize(x) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up (values clipped first)."""
    x = np.clip(np.asarray(getattr(x, "data", x), dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` integer header tokens after the magic; returns
    (tokens, offset of the single whitespace byte that ends the header)."""
    pos, tokens = 2, []
    while len(tokens) < count:
        if pos >= len(data):
            raise ImageDecodeError("truncated PPM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise ImageDecodeError("truncated PPM header comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise ImageDecodeError(f"bad PPM header byte {ch!r}")
            tokens.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageDecodeError("truncated PPM header")
    return tokens, pos


def _decode_ppm(data: bytes) -> np.ndarray:
    (w, h, maxval), pos = _ppm_tokens(data, 3)
    if w < 1 or h < 1:
        raise ImageDecodeError(f"PPM has empty extent {w}x{h}")
    if maxval != 255:
        raise ImageDecodeError(f"unsupported PPM maxval {maxval} (only 8-bit is supported)")
    body = data[pos + 1 :]
    need = w * h * 3
    if len(body) < need:
        raise ImageDecodeError(f"truncated PPM pixel data ({len(body)} of {need} bytes)")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3)


def _decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("RGB", "RGBA", "L", "LA", "P"):
                rgb = im.convert("RGB")
            else:
                raise ImageDecodeError(f"unsupported PNG mode {im.mode!r} (need 8-bit RGB/RGBA)")
            return np.asarray(rgb, dtype=np.uint8)
    except ImageDecodeError:
        raise
    except Exception as exc:  # Pillow raises a variety of types on bad data
        raise ImageDecodeError(f"cannot decode PNG: {exc}") from None


def load_image(path: str) -> np.ndarray:
    """Read PNG or binary PPM (P6) as float32 ``3 x H x W`` in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc.strerror}") from None
    if not data:
        raise ImageDecodeError(f"{path}: empty file")
    try:
        if data[:8] == b"\x89PNG\r\n\x1a\n":
            hwc = _decode_png(data)
        elif data[:2] == b"P6":
            hwc = _decode_ppm(data)
        else:
            raise ImageDecodeError("unsupported format (expected PNG or binary PPM)")
    except ImageDecodeError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from None
    return (hwc.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def save_image(img, path: str) -> None:
    """Write ``3 x H x W`` [0, 1] data as PNG or P6 PPM, chosen by extension."""
    arr = np.asarray(getattr(img, "data", img))
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise InputValidationError(f"save_image expects 3 x H x W, got {arr.shape}")
    hwc = quantize(arr).transpose(1, 2, 0)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        Image.fromarray(np.ascontiguousarray(hwc), mode="RGB").save(path, format="PNG")
    elif ext == ".ppm":
        h, w = hwc.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(hwc).tobytes())
    else:
        raise InputValidationError(f"unsupported output extension {ext!r}; use .png or .ppm")


# ---------------------------------------------------------------------------
# Degradations
# ---------------------------------------------------------------------------

# kind -> {param: (default, low, high, low_open)}
DEGRADATION_PARAMS: dict[str, dict[str, tuple]] = {
    "identity": {},
    "noise": {"sigma": (0.1, 0.0, 1.0, True)},
    "blur": {"sigma_b": (1.5, 0.0, 10.0, True)},
    "rain": {
        "count": (40, 1, 10000, False),
        "length": (14.0, 1.0, 256.0, False),
        "angle": (90.0, 0.0, 180.0, False),
        "intensity": (0.6, 0.0, 1.0, True),
        "width": (0.6, 0.1, 4.0, False),
    },
    "haze": {"t": (0.5, 0.0, 1.0, False), "airlight": (0.9, 0.0, 1.0, False)},
    "lowlight": {"gamma": (2.0, 1.0, 5.0, True), "gain": (0.6, 0.0, 1.0, True)},
    "snow": {
        "density": (0.004, 0.0, 0.2, True),
        "size": (1.5, 0.3, 8.0, False),
        "brightness": (0.9, 0.0, 1.0, True),
    },
}


def _bounds_text(kind: str) -> str:
    parts = []
    for name, (_, lo, hi, open_lo) in DEGRADATION_PARAMS[kind].items():
        parts.append(f"{name} in {'(' if open_lo else '['}{lo}, {hi}]")
    return ", ".join(parts) or "no parameters"


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATION_PARAMS:
            raise InputValidationError(
                f"unknown degradation kind {self.kind!r}; choose from {sorted(DEGRADATION_PARAMS)}"
            )
        allowed = DEGRADATION_PARAMS[self.kind]
        unknown = sorted(set(self.params) - set(allowed))
        if unknown:
            raise InputValidationError(f"{self.kind}: unknown parameter(s) {unknown}; valid: {_bounds_text(self.kind)}")
        resolved = {name: spec[0] for name, spec in allowed.items()}
        resolved.update(self.params)
        bad = []
        for name, (_, lo, hi, open_lo) in allowed.items():
            v = resolved[name]
            ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
            ok = ok and (v > lo if open_lo else v >= lo) and v <= hi
            if not ok:
                bad.append(f"{name}={v!r}")
        if bad:
            raise InputValidationError(
                f"{self.kind}: out-of-range parameter(s) {', '.join(bad)}; bounds: {_bounds_text(self.kind)}"
            )
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InputValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "params", resolved)

    def with_seed(self, seed: int) -> "DegradationSpec":
        return DegradationSpec(self.kind, dict(self.params), seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise InputValidationError(f"degradation spec must be an object with a 'kind', got {d!r}")
        extra = sorted(set(d) - {"kind", "params", "seed"})
        if extra:
            raise InputValidationError(f"degradation spec has unknown key(s) {extra}")
        return cls(d["kind"], dict(d.get("params") or {}), int(d.get("seed", 0)))


def _segment_layer(h, w, rng, count, length, angle_deg, width, intensity) -> np.ndarray:
    """Sum of Gaussian-profiled line segments (rain streaks)."""
    layer = np.zeros((h, w))
    a = math.radians(angle_deg)
    # image y grows downward; angle 90 means a vertical streak
    d = np.array([math.sin(a), math.cos(a)])  # (dy, dx)
    reach = 3.0 * width
    for _ in range(int(count)):
        seg_len = length * rng.uniform(0.6, 1.4)
        amp = intensity * rng.uniform(0.6, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        half = 0.5 * seg_len
        y0, y1 = cy - half * abs(d[0]) - reach, cy + half * abs(d[0]) + reach
        x0, x1 = cx - half * abs(d[1]) - reach, cx + half * abs(d[1]) + reach
        iy0, iy1 = max(int(math.floor(y0)), 0), min(int(math.ceil(y1)) + 1, h)
        ix0, ix1 = max(int(math.floor(x0)), 0), min(int(math.ceil(x1)) + 1, w)
        if iy0 >= iy1 or ix0 >= ix1:
            continue
        yy, xx = np.mgrid[iy0:iy1, ix0:ix1].astype(np.float64)
        ry, rx = yy - cy, xx - cx
        along = np.clip(ry * d[0] + rx * d[1], -half, half)
        dist2 = (ry - along * d[0]) ** 2 + (rx - along * d[1]) ** 2
        layer[iy0:iy1, ix0:ix1] += amp * np.exp(-dist2 / (2.0 * width**2))
    return np.clip(layer, 0.0, 1.0)


def _disc_layer(h, w, rng, density, size, brightness) -> np.ndarray:
    """Soft bright discs (snow flakes); returns an alpha map in [0, 1]."""
    alpha = np.zeros((h, w))
    count = rng.poisson(density * h * w)
    for _ in range(count):
        r = size * rng.uniform(0.5, 1.5)
        amp = brightness * rng.uniform(0.7, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        reach = r + 1.5
        iy0, iy1 = max(int(cy - reach), 0), min(int(cy + reach) + 2, h)
        ix0, ix1 = max(int(cx - reach), 0), min(int(cx + reach) + 2, w)
        if iy0 >= iy1 or ix0 >= ix1:
            continue
        yy, xx = np.mgrid[iy0:iy1, ix0:ix1].astype(np.float64)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        disc = np.clip(r + 0.5 - dist, 0.0, 1.0) * amp  # anti-aliased edge
        np.maximum(alpha[iy0:iy1, ix0:ix1], disc, out=alpha[iy0:iy1, ix0:ix1])
    return alpha


def degrade(clean, spec: DegradationSpec) -> np.ndarray:
    """Apply one synthetic degradation to a ``3 x H x W`` image in [0, 1].

    The output has the input's float dtype, lies in [0, 1], and is a pure
    function of (clean, spec) including the spec seed.
    """
    x = np.asarray(getattr(clean, "data", clean))
    if x.ndim != 3 or x.shape[0] != 3:
        raise InputValidationError(f"degrade expects 3 x H x W, got {x.shape}")
    out_dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    x = x.astype(np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InputValidationError("degrade expects values in [0, 1]")
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    _, h, w = x.shape
    if spec.kind == "identity":
        y = x
    elif spec.kind == "noise":
        y = np.clip(x + rng.normal(0.0, p["sigma"], size=x.shape), 0.0, 1.0)
    elif spec.kind == "blur":
        y = np.stack([gaussian_filter(c, p["sigma_b"], mode="mirror", truncate=3.0) for c in x])
    elif spec.kind == "rain":
        layer = _segment_layer(h, w, rng, p["count"], p["length"], p["angle"], p["width"], p["intensity"])
        y = np.clip(x + layer[None], 0.0, 1.0)
    elif spec.kind == "haze":
        y = x * p["t"] + p["airlight"] * (1.0 - p["t"])
    elif spec.kind == "lowlight":
        y = p["gain"] * x ** p["gamma"]
    elif spec.kind == "snow":
        alpha = _disc_layer(h, w, rng, p["density"], p["size"], p["brightness"])[None]
        y = x + alpha * (1.0 - x)
    else:  # pragma: no cover - guarded by DegradationSpec
        raise InputValidationError(spec.kind)
    return np.clip(y, 0.0, 1.0).astype(out_dtype)


# ---------------------------------------------------------------------------
# Samples and patches
# ---------------------------------------------------------------------------


@dataclass
class ImageSample:
    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec
    id: str

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise InputValidationError(f"{self.id}: clean {self.clean.shape} and degraded {self.degraded.shape} differ")


def sample_patches(sample: ImageSample, size: int = 64, n: int = 1, seed=0, flips: bool = True) -> list[ImageSample]:
    """Aligned random crops of clean and degraded, with shared random flips."""
    _, h, w = sample.clean.shape
    if h < size or w < size:
        raise InputValidationError(f"{sample.id}: image {h}x{w} smaller than patch size {size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for k in range(n):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        flip_h, flip_v = (bool(rng.integers(2)), bool(rng.integers(2))) if flips else (False, False)
        crops = []
        for img in (sample.clean, sample.degraded):
            c = img[:, top : top + size, left : left + size]
            if flip_h:
                c = c[:, :, ::-1]
            if flip_v:
                c = c[:, ::-1, :]
            crops.append(np.ascontiguousarray(c))
        out.append(ImageSample(crops[0], crops[1], sample.spec, f"{sample.id}#{k}"))
    return out


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

SPEC_LIST_NAME = "specs.json"
MANIFEST_VERSION = 1


def _entry_seed(base: int, index: int) -> int:
    # distinct, reproducible noise realisation per clean image
    return (base * 1_000_003 + index) % (2**31)


def build_manifest(root: str) -> dict:
    """Manifest over ``root``: every clean image (PNG/PPM, sorted by name)
    crossed with every spec in ``root/specs.json``.

    Entry seeds are derived from the spec seed and the image index, so each
    image gets its own realisation. Paths are stored relative to ``root``.
    """
    if not os.path.isdir(root):
        raise ManifestError(f"{root}: not a directory")
    names = sorted(f for f in os.listdir(root) if f.lower().endswith(IMAGE_EXTENSIONS))
    spec_path = os.path.join(root, SPEC_LIST_NAME)
    specs = []
    if os.path.exists(spec_path):
        try:
            with open(spec_path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{spec_path}: invalid JSON: {exc}") from None
        if not isinstance(raw, list):
            raise ManifestError(f"{spec_path}: expected a JSON list of specs")
        specs = [DegradationSpec.from_dict(d) for d in raw]
    entries = []
    for i, name in enumerate(names):
        stem = os.path.splitext(name)[0]
        for j, spec in enumerate(specs):
            entries.append(
                {
                    "id": f"{stem}__{spec.kind}{j}",
                    "clean_path": name,
                    "spec": spec.with_seed(_entry_seed(spec.seed, i)).to_dict(),
                }
            )
    return {"version": MANIFEST_VERSION, "root": os.path.abspath(root), "entries": entries}


def validate_manifest(manifest: dict) -> dict:
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"manifest must be an object with version {MANIFEST_VERSION}")
    root = manifest.get("root", ".")
    seen = set()
    for e in manifest.get("entries", []):
        for key in ("id", "clean_path", "spec"):
            if key not in e:
                raise ManifestError(f"manifest entry missing {key!r}: {e}")
        if e["id"] in seen:
            raise ManifestError(f"duplicate manifest id {e['id']!r}")
        seen.add(e["id"])
        path = os.path.join(root, e["clean_path"])
        if not os.path.isfile(path):
            raise ManifestError(f"{e['id']}: dangling clean_path {path}")
        try:
            DegradationSpec.from_dict(e["spec"])
        except InputValidationError as exc:
            raise ManifestError(f"{e['id']}: {exc}") from None
    return manifest


def write_manifest(manifest: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_manifest(path: str) -> dict:
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(manifest, dict) and not os.path.isabs(manifest.get("root", "")):
        manifest["root"] = os.path.join(os.path.dirname(os.path.abspath(path)), manifest.get("root", "."))
    return validate_manifest(manifest)


def iterate(manifest: dict) -> Iterator[ImageSample]:
    """Samples in manifest order, degraded on the fly."""
    root = manifest.get("root", ".")
    for e in manifest["entries"]:
        clean = load_image(os.path.join(root, e["clean_path"]))
        spec = DegradationSpec.from_dict(e["spec"])
        yield ImageSample(clean, degrade(clean, spec), spec, e["id"])


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def synthetic_clean(seed: int, size: int = 64) -> np.ndarray:
    """Piecewise-smooth test image: a colour ramp, axis-aligned rectangles
    and a faint fine texture. Float32 ``3 x size x size`` in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.25, 0.75, 3)[:, None, None]
    tilt = rng.uniform(-0.15, 0.15, (3, 2))
    img = base + tilt[:, :1, None] * (yy - 0.5) + tilt[:, 1:, None] * (xx - 0.5)
    for _ in range(int(rng.integers(3, 7))):
        h, w = rng.integers(size // 8, size // 2, 2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        img[:, top : top + h, left : left + w] = rng.uniform(0.1, 0.9, 3)[:, None, None]
    freq = rng.uniform(0.6, 1.2)
    texture = 0.03 * np.sin(freq * (yy + xx) * size + rng.uniform(0, 2 * np.pi))
    img = img + texture[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


FIXTURE_SPECS = [
    DegradationSpec("noise", {"sigma": 0.1}, seed=11),
    DegradationSpec("blur", {"sigma_b": 1.5}, seed=12),
    DegradationSpec("rain", {"count": 40, "length": 14.0, "angle": 90.0, "intensity": 0.6}, seed=13),
    DegradationSpec("haze", {"t": 0.5, "airlight": 0.9}, seed=14),
    DegradationSpec("lowlight", {"gamma": 2.0, "gain": 0.6}, seed=15),
    DegradationSpec("snow", {"density": 0.004, "size": 1.5, "brightness": 0.9}, seed=16),
]


def write_fixture_corpus(root: str, n_clean: int = 20, size: int = 64, seed: int = 0, specs=None) -> dict:
    """Write ``n_clean`` synthetic PNGs plus ``specs.json`` under ``root`` and
    return the resulting manifest."""
    os.makedirs(root, exist_ok=True)
    for i in range(n_clean):
        save_image(synthetic_clean(seed * 10_007 + i, size), os.path.join(root, f"clean_{i:03d}.png"))
    with open(os.path.join(root, SPEC_LIST_NAME), "w") as fh:
        json.dump([s.to_dict() for s in (specs or FIXTURE_SPECS)], fh, indent=2)
    return build_manifest(root)
