"""Image I/O, the synthetic shape dataset, and assignment-map rendering.

Images travel as float arrays in [0, 1] with shape (H, W, C). On disk the
only formats are binary portable pixmaps (P6) and graymaps (P5) with
maxval 255; datasets are directories with one subdirectory per class.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SHAPE_CLASSES = ("disk", "square", "cross")


# ---------------------------------------------------------------------------
# portable anymap I/O


def _read_header_tokens(raw: bytes, path, count: int) -> tuple[list[int], int]:
    # tokens separated by whitespace; '#' starts a comment through end of line
    tokens: list[int] = []
    i = 2  # past the magic
    while len(tokens) < count:
        if i >= len(raw):
            raise DataError(f"{path}: truncated header")
        c = raw[i:i + 1]
        if c == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
                j += 1
            word = raw[i:j]
            if not word.isdigit():
                raise DataError(f"{path}: malformed header token {word!r}")
            tokens.append(int(word))
            i = j
    # exactly one whitespace byte separates the header from pixel data
    if i >= len(raw) or not raw[i:i + 1].isspace():
        raise DataError(f"{path}: missing separator before pixel data")
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into float (H, W, 1) or (H, W, 3) in [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read image: {exc}") from exc
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported image magic {magic!r} (need P5 or P6)")
    (w, h, maxval), start = _read_header_tokens(raw, path, 3)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (only 255)")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    pixels = raw[start:start + need]
    if len(pixels) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, channels)
    return arr.astype(np.float64) / 255.0


def write_pnm(path, image: np.ndarray):
    """Write uint8 (H, W) / (H, W, 1) as P5 or (H, W, 3) as P6."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise DataError(f"write_pnm expects uint8 data, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic, channels = b"P5", 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, channels = b"P6", 3
    else:
        raise DataError(f"write_pnm: unsupported shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


# ---------------------------------------------------------------------------
# synthetic shape dataset


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    classes: int = 3
    per_class: int = 100
    noise: float = 0.1

    def __post_init__(self):
        if not 1 <= self.classes <= len(SHAPE_CLASSES):
            raise ConfigError(
                f"synthetic classes must be in [1, {len(SHAPE_CLASSES)}], got {self.classes}")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError(f"synthetic noise must lie in [0, 1), got {self.noise}")
        if self.per_class < 1 or self.image_size < 8:
            raise ConfigError("synthetic per_class must be >= 1 and image_size >= 8")


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse 'synthetic:size=32,classes=3,per_class=100,noise=0.1' (all optional)."""
    body = text[len("synthetic:"):] if text.startswith("synthetic:") else text
    kwargs = {}
    if body.strip():
        for item in body.split(","):
            if "=" not in item:
                raise DataError(f"malformed synthetic spec item {item!r}")
            key, value = item.split("=", 1)
            key = key.strip()
            if key == "size":
                key = "image_size"
            if key not in ("image_size", "classes", "per_class", "noise"):
                raise DataError(f"unknown synthetic spec key {key!r}")
            kwargs[key] = float(value) if key == "noise" else int(value)
    return SyntheticSpec(**kwargs)


def _draw_shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    # class signatures are deliberately distinct at the patch level: filled
    # blob with curved boundary (disk), hollow axis-aligned outline (square),
    # thin full-span bars (cross); position and size jitter per sample
    img = np.zeros((size, size), dtype=np.float64)
    margin = size // 4
    cy = int(rng.integers(margin, size - margin))
    cx = int(rng.integers(margin, size - margin))
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        r = int(rng.integers(size // 4, size // 3 + 1))
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    elif kind == "square":
        r = int(rng.integers(size // 4, size // 3 + 1))
        edge = max(2, size // 16)
        outer = (np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r)
        inner = (np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r - edge)
        img[outer & ~inner] = 1.0
    elif kind == "cross":
        bar = max(1, size // 16)
        img[max(0, cy - bar):cy + bar + 1, :] = 1.0
        img[:, max(0, cx - bar):cx + bar + 1] = 1.0
    else:
        raise ConfigError(f"unknown shape class {kind!r}")
    return img


def synthetic_dataset(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labeled shape images, deterministic in the seed.

    Returns (images, labels) with images (N, size, size) in [0, 1], ordered
    class-major then by index within the class.
    """
    rng = np.random.default_rng(seed)
    images = []
    labels = []
    for cls in range(spec.classes):
        for _ in range(spec.per_class):
            img = _draw_shape(SHAPE_CLASSES[cls], spec.image_size, rng)
            if spec.noise > 0:
                img = img + spec.noise * rng.uniform(-1.0, 1.0, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# dataset loading


def _convert_channel_axis(arr: np.ndarray, channels: int) -> np.ndarray:
    have = arr.shape[-1]
    if have == channels:
        return arr
    if have == 1:
        return np.repeat(arr, channels, axis=-1)
    if channels == 1:
        return arr.mean(axis=-1, keepdims=True)
    raise DataError(f"cannot adapt {have}-channel images to {channels} channels")


def adapt_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """One image: (H, W) or (H, W, C) -> (H, W, channels)."""
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise DataError(f"expected one (H, W[, C]) image, got shape {image.shape}")
    return _convert_channel_axis(image, channels)


def adapt_batch_channels(images: np.ndarray, channels: int) -> np.ndarray:
    """Batch: (N, H, W) or (N, H, W, C) -> (N, H, W, channels)."""
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise DataError(f"expected (N, H, W[, C]) images, got shape {images.shape}")
    return _convert_channel_axis(images, channels)


def load_dataset(source: str, seed: int, channels: int = 1
                 ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load from a class-per-subdirectory tree or a synthetic: spec.

    Returns (images (N, H, W, C) in [0, 1], labels, class names) in a
    deterministic order: sorted class names, sorted file names.
    """
    if source.startswith("synthetic:") or source == "synthetic":
        spec = parse_synthetic_spec(source if ":" in source else "synthetic:")
        images, labels = synthetic_dataset(spec, seed)
        names = list(SHAPE_CLASSES[:spec.classes])
        return adapt_batch_channels(images, channels), labels, names
    root = Path(source)
    if not root.is_dir():
        raise DataError(f"dataset path {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset directory {root} has no class subdirectories")
    images = []
    labels = []
    shape = None
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
        if not files:
            raise DataError(f"class directory {cdir} has no .ppm/.pgm images")
        for f in files:
            img = read_pnm(f)
            if shape is None:
                shape = img.shape[:2]
            elif img.shape[:2] != shape:
                raise DataError(
                    f"{f}: image size {img.shape[:2]} differs from first image {shape}")
            images.append(img)
            labels.append(label)
    stacked = adapt_batch_channels(np.stack(images), channels)
    return stacked, np.asarray(labels, dtype=np.int64), [d.name for d in class_dirs]


# ---------------------------------------------------------------------------
# assignment-map rendering


def cluster_palette(k: int) -> np.ndarray:
    """Fixed RGB palette with one distinct color per cluster id."""
    colors = []
    for i in range(k):
        # evenly spaced hues; alternate saturation rows for large K
        hue = (i / max(k, 1)) % 1.0
        sat = 0.85 if i % 2 == 0 else 0.55
        r, g, b = colorsys.hsv_to_rgb(hue, sat, 0.95)
        colors.append((round(r * 255), round(g * 255), round(b * 255)))
    return np.asarray(colors, dtype=np.uint8)


def render_assignment_map(assignment: np.ndarray, h: int, w: int,
                          cell: int = 16) -> np.ndarray:
    """Argmax over the center axis rendered as a color grid.

    `assignment` is (K, HW); each token cell gets the fixed palette color of
    its winning center, upscaled by nearest neighbor to `cell` pixels.
    """
    k, hw = assignment.shape
    if hw != h * w:
        raise DataError(f"assignment has {hw} columns, expected {h}x{w}={h * w}")
    labels = np.argmax(assignment, axis=0).reshape(h, w)
    palette = cluster_palette(k)
    img = palette[labels]
    img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    return img
