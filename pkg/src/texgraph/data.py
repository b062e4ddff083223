"""Procedural texture dataset generation, PPM I/O and directory loading.

Six pattern families (checkerboard, stripes, dots, blobs, noise, weave)
are rendered from closed-form functions of the pixel grid; per-image
jitter (phase, orientation, scale, brightness/tint, additive noise)
comes from a seeded generator, so a spec reproduces its images bit for
bit.  With jitter 0 every pattern equals its closed form exactly.

On-disk format is binary PPM (P6, 8-bit); a dataset directory holds one
subdirectory per class, labels assigned by lexicographic directory
order unless a ``manifest.tsv`` (``class<TAB>dirname`` per line, label =
line order) overrides it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, FileFormatError

__all__ = [
    "SyntheticSpec",
    "DatasetItem",
    "Dataset",
    "generate",
    "split",
    "load_dir",
    "write_ppm",
    "read_ppm",
    "save_dataset_tree",
    "PATTERNS",
]


# --- closed-form patterns (value in [0,1] on jitter-free pixel coords) ----

def _checkerboard(x, y, cell=8.0):
    return (np.floor(x / cell) + np.floor(y / cell)) % 2.0


def _stripes(x, y, cell=6.0):
    return np.floor(x / cell) % 2.0


def _dots(x, y, cell=10.0):
    fx = x - cell * np.floor(x / cell) - cell / 2.0
    fy = y - cell * np.floor(y / cell) - cell / 2.0
    return (fx * fx + fy * fy <= (0.3 * cell) ** 2).astype(np.float64)


def _blobs(x, y, cell=12.0):
    fx = x - cell * np.floor(x / cell) - cell / 2.0
    fy = y - cell * np.floor(y / cell) - cell / 2.0
    s2 = 2.0 * (0.3 * cell) ** 2
    return np.exp(-(fx * fx + fy * fy) / s2)


def _noise(x, y, cell=1.0):
    # flat base; the texture is carried entirely by the additive jitter noise
    return np.full_like(x, 0.5)


def _weave(x, y, cell=8.0):
    px = np.floor(x / cell)
    py = np.floor(y / cell)
    fx = (x - cell * px) / cell
    fy = (y - cell * py) / cell
    horizontal = (px + py) % 2.0 == 0.0
    tri_y = 1.0 - np.abs(2.0 * fy - 1.0)
    tri_x = 1.0 - np.abs(2.0 * fx - 1.0)
    return np.where(horizontal, tri_y, tri_x)


PATTERNS = {
    "checkerboard": _checkerboard,
    "stripes": _stripes,
    "dots": _dots,
    "blobs": _blobs,
    "noise": _noise,
    "weave": _weave,
}


@dataclass(frozen=True)
class SyntheticSpec:
    """What to generate; ``jitter`` scales all randomization, 0 = none."""

    classes: tuple[str, ...] = ("checkerboard", "stripes", "dots", "blobs")
    per_class: int = 100
    image_size: int = 64
    seed: int = 0
    jitter: float = 1.0

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        unknown = [c for c in self.classes if c not in PATTERNS]
        if unknown:
            raise ConfigError(f"unknown class names {unknown}; known: {sorted(PATTERNS)}")
        if self.per_class < 2:
            raise ConfigError(f"need at least 2 images per class, got {self.per_class}")
        if self.image_size < 4:
            raise ConfigError(f"image size {self.image_size} too small")

    def to_text(self) -> str:
        return (
            f"classes={','.join(self.classes)}\nper_class={self.per_class}\n"
            f"image_size={self.image_size}\nseed={self.seed}\njitter={self.jitter:.17g}\n"
        )


@dataclass
class DatasetItem:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    label: int
    id: str
    split: str = ""


@dataclass
class Dataset:
    items: list[DatasetItem]
    class_names: tuple[str, ...]

    def split_items(self, tag: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == tag]

    def __len__(self) -> int:
        return len(self.items)


def render_image(cls: str, size: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """One H x W x 3 image of a pattern class with jittered coordinates."""
    pattern = PATTERNS[cls]
    # fixed draw order keeps the stream layout identical for any jitter
    u_phase = rng.uniform(0.0, 16.0, size=2)
    u_angle = rng.uniform(-1.0, 1.0)
    u_scale = rng.uniform(-1.0, 1.0)
    u_bright = rng.uniform(0.0, 1.0)
    u_tint = rng.uniform(0.0, 1.0, size=3)
    px, py = jitter * u_phase
    theta = jitter * u_angle * 0.35
    zoom = math.exp(jitter * u_scale * math.log(1.25))
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xr = (cos_t * (xx + px) + sin_t * (yy + py)) / zoom
    yr = (-sin_t * (xx + px) + cos_t * (yy + py)) / zoom
    base = pattern(xr, yr)
    brightness = 1.0 - jitter * u_bright * 0.25
    tint = 1.0 - jitter * u_tint * 0.1
    img = base[:, :, None] * (brightness * tint)[None, None, :]
    sigma = jitter * (0.25 if cls == "noise" else 0.03)
    if sigma > 0.0:
        img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic, class-balanced synthetic dataset (no split tags)."""
    spec.validate()
    items: list[DatasetItem] = []
    for ci, cls in enumerate(spec.classes):
        for j in range(spec.per_class):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, ci, j)))
            img = render_image(cls, spec.image_size, rng, spec.jitter)
            items.append(DatasetItem(image=img, label=ci, id=f"{cls}/{cls}_{j:04d}"))
    return Dataset(items=items, class_names=spec.classes)


def split(ds: Dataset, fractions, seed: int) -> Dataset:
    """Stratified train/val/test tagging; disjoint and exhaustive."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigError(f"expected 3 split fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} sum to {sum(fractions)}, not 1")
    rng = np.random.default_rng(seed)
    tags = ("train", "val", "test")
    by_class: dict[int, list[int]] = {}
    for i, it in enumerate(ds.items):
        by_class.setdefault(it.label, []).append(i)
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        cuts = [round(sum(fractions[: i + 1]) * n) for i in range(3)]
        lo = 0
        for tag, hi in zip(tags, cuts):
            for i in idx[lo:hi]:
                ds.items[int(i)].split = tag
            lo = hi
    return ds


# --- binary PPM (P6, 8-bit) -----------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"write_ppm: expected H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    raster = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def _ppm_tokens(buf: bytes, path, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, '#' comments skipped."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise FileFormatError(f"{path}: truncated header")
        c = buf[i : i + 1]
        if c == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    return tokens, i


def read_ppm(path) -> np.ndarray:
    """Decode to H x W x 3 float64 in [0, 1] (255 maps to exactly 1.0)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        tokens, i = _ppm_tokens(buf, path, 4)
    except FileFormatError:
        raise
    if tokens[0] != b"P6":
        raise FileFormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FileFormatError(f"{path}: malformed header fields {tokens[1:]}") from None
    if maxval != 255:
        raise FileFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise FileFormatError(f"{path}: bad dimensions {w}x{h}")
    i += 1  # single whitespace byte after maxval
    need = w * h * 3
    raster = buf[i : i + need]
    if len(raster) != need:
        raise FileFormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def _center_crop_resize(img: np.ndarray, side: int) -> np.ndarray:
    h, w, _ = img.shape
    square = min(h, w)
    r0, c0 = (h - square) // 2, (w - square) // 2
    img = img[r0 : r0 + square, c0 : c0 + square]
    if square != side:
        ii = (np.arange(side) * square) // side
        img = img[ii[:, None], ii[None, :]]
    return np.ascontiguousarray(img)


def load_dir(root, image_size: int | None = None, strict: bool = True) -> Dataset:
    """Load ``root/<class>/<image>.ppm`` into a Dataset (no split tags).

    Labels follow lexicographic class-directory order, or the line order
    of ``root/manifest.tsv`` (``class<TAB>dirname``) when present.
    Non-uniform image sizes are center-cropped to the smallest common
    square and nearest-resized to ``image_size`` (or that square).
    ``strict=False`` skips undecodable files instead of raising.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    manifest = root / "manifest.tsv"
    if manifest.is_file():
        pairs = []
        for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{manifest}:{lineno}: expected class<TAB>dirname")
            cls, dirname = line.split("\t", 1)
            pairs.append((cls.strip(), root / dirname.strip()))
    else:
        pairs = [(d.name, d) for d in sorted(root.iterdir(), key=lambda p: p.name) if d.is_dir()]
    if len(pairs) < 2:
        raise DataError(f"dataset root {root} needs at least 2 class directories")

    items: list[DatasetItem] = []
    for label, (cls, d) in enumerate(pairs):
        files = sorted(d.glob("*.ppm"))
        loaded = 0
        for f in files:
            try:
                img = read_ppm(f)
            except FileFormatError:
                if strict:
                    raise
                continue
            items.append(DatasetItem(image=img, label=label, id=f"{cls}/{f.name}"))
            loaded += 1
        if loaded == 0:
            raise DataError(f"class directory {d} contains no readable .ppm images")

    sides = {it.image.shape[:2] for it in items}
    min_square = min(min(h, w) for h, w in sides)
    target = image_size or min_square
    if len(sides) > 1 or any((h, w) != (target, target) for h, w in sides):
        for it in items:
            it.image = _center_crop_resize(it.image, target)
    return Dataset(items=items, class_names=tuple(cls for cls, _ in pairs))


def save_dataset_tree(ds: Dataset, root, spec: SyntheticSpec | None = None) -> None:
    """Write ``root/<class>/<id>.ppm`` (+ spec.txt for generated data)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for it in ds.items:
        cls, name = it.id.split("/", 1)
        d = root / cls
        d.mkdir(exist_ok=True)
        write_ppm(d / f"{name}.ppm", it.image)
    if spec is not None:
        (root / "spec.txt").write_text(spec.to_text())
