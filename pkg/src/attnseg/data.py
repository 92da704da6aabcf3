"""Class tables, dataset directories, synthetic data and the nuclei adapter.

Dataset root layout::

    root/
      classes.csv          index,name,r,g,b,ciw
      images/<id>.png      8-bit RGB
      masks/<id>.png       8-bit RGB, exact class colors
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

from .blocks import ConfigError

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".bmp", ".tif", ".tiff")
# Images only; masks must stay lossless.
LOSSY_IMAGE_EXTS = (".jpg", ".jpeg")


class FormatError(ValueError):
    pass


class DecodeError(FormatError):
    pass


@dataclass(frozen=True)
class ClassEntry:
    index: int
    name: str
    rgb: tuple[int, int, int]
    ciw: float


class ClassTable:
    """Ordered classes; index 0 is background."""

    def __init__(self, entries: Sequence[ClassEntry], normalize: bool = True):
        entries = sorted(entries, key=lambda e: e.index)
        if [e.index for e in entries] != list(range(len(entries))):
            raise FormatError("class indices must be unique and contiguous from 0")
        colors = [tuple(e.rgb) for e in entries]
        if len(set(colors)) != len(colors):
            dup = next(c for c in colors if colors.count(c) > 1)
            raise FormatError(f"color {dup} is assigned to more than one class")
        if any(not 0 <= e.ciw for e in entries):
            raise FormatError("CIW values must be non-negative")
        if normalize and len(entries) > 1:
            top = max(e.ciw for e in entries[1:])
            if top > 0:
                entries = [entries[0]] + [
                    ClassEntry(e.index, e.name, e.rgb, e.ciw / top) for e in entries[1:]
                ]
        self.entries = list(entries)

    def __len__(self):
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def ciw(self) -> np.ndarray:
        return np.array([e.ciw for e in self.entries])

    @property
    def palette(self) -> np.ndarray:
        return np.array([e.rgb for e in self.entries], dtype=np.uint8)

    def subset(self, n: int) -> "ClassTable":
        """The first ``n`` classes (background included)."""
        if not 1 <= n <= len(self):
            raise ConfigError(f"cannot take {n} classes from a table of {len(self)}")
        return ClassTable(self.entries[:n])

    def encode(self, mask) -> np.ndarray:
        """Class-index mask (H, W) to RGB uint8 (H, W, 3)."""
        mask = np.asarray(mask)
        if mask.size and (mask.min() < 0 or mask.max() >= len(self)):
            raise FormatError("mask contains indices outside the class table")
        return self.palette[mask]

    def decode(self, rgb) -> np.ndarray:
        """RGB mask to class indices by exact color match."""
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DecodeError(f"mask must be (H, W, 3) RGB, got {rgb.shape}")
        key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
        pal = self.palette.astype(np.int64)
        pal_key = (pal[:, 0] << 16) | (pal[:, 1] << 8) | pal[:, 2]
        order = np.argsort(pal_key)
        pos = np.clip(np.searchsorted(pal_key[order], key), 0, len(pal_key) - 1)
        hit = pal_key[order][pos] == key
        if not hit.all():
            y, x = np.argwhere(~hit)[0]
            color = tuple(int(v) for v in rgb[y, x])
            raise DecodeError(
                f"unknown mask color {color} at pixel (row={y}, col={x}); "
                f"{int((~hit).sum())} unmatched pixels"
            )
        return order[pos].astype(np.int64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "name", "r", "g", "b", "ciw"])
            for e in self.entries:
                w.writerow([e.index, e.name, *e.rgb, f"{e.ciw:.4f}"])


def load_class_table(path=None) -> ClassTable:
    """Read a class table CSV; ``None`` loads the bundled sewer/culvert table."""
    if path is None:
        text = resources.files("attnseg.resources").joinpath("sewer_classes.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = list(csv.DictReader(text.splitlines()))
    try:
        entries = [
            ClassEntry(int(r["index"]), r["name"], (int(r["r"]), int(r["g"]), int(r["b"])), float(r["ciw"]))
            for r in rows
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed class table: {exc}") from exc
    idx = [e.index for e in entries]
    if len(set(idx)) != len(idx):
        raise FormatError("duplicate class index")
    return ClassTable(entries)


def binary_table() -> ClassTable:
    return ClassTable([
        ClassEntry(0, "Background", (0, 0, 0), 0.0),
        ClassEntry(1, "Foreground", (255, 255, 255), 1.0),
    ])


@dataclass
class Sample:
    """``image`` is float32 (H, W, 3) in [0, 1]; ``mask`` int64 (H, W)."""

    image: np.ndarray
    mask: np.ndarray
    id: str
    features_ref: str | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise FormatError(f"{self.id}: image must be (H, W, 3)")
        if self.image.shape[:2] != self.mask.shape:
            raise FormatError(f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed}


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, img) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _index_dir(d: Path, allow_lossy: bool) -> dict[str, Path]:
    exts = IMAGE_EXTS + (LOSSY_IMAGE_EXTS if allow_lossy else ())
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in exts:
            out[p.stem] = p
        elif not allow_lossy and p.suffix.lower() in LOSSY_IMAGE_EXTS:
            raise FormatError(f"{p}: masks must be stored losslessly")
    return out


def load_dataset(root, table: ClassTable | None = None) -> list[Sample]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.exists() and not mask_dir.exists():
        return []
    if table is None:
        table = load_class_table(root / "classes.csv")
    images = _index_dir(img_dir, allow_lossy=True) if img_dir.exists() else {}
    masks = _index_dir(mask_dir, allow_lossy=False) if mask_dir.exists() else {}
    missing = sorted(set(images) ^ set(masks))
    if missing:
        raise FormatError(f"unpaired image/mask ids: {missing[:10]}")
    samples = []
    for sid in sorted(images):
        image = read_image(images[sid])
        with Image.open(masks[sid]) as im:
            rgb = np.asarray(im.convert("RGB"))
        try:
            mask = table.decode(rgb)
        except DecodeError as exc:
            raise DecodeError(f"{masks[sid]}: {exc}") from None
        samples.append(Sample(image, mask, sid))
    return samples


def save_dataset(samples: Iterable[Sample], root, table: ClassTable) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    table.write_csv(root / "classes.csv")
    for s in samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        Image.fromarray(table.encode(s.mask)).save(root / "masks" / f"{s.id}.png")


def split_dataset(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    ids = [s.id if isinstance(s, Sample) else str(s) for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(fractions[0] * len(ids)))
    n_val = min(int(round(fractions[1] * len(ids))), len(ids) - n_train)
    return DatasetSplit(
        shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], seed
    )


# --- synthetic data ------------------------------------------------------------

PRIMITIVE_KINDS = ("crack", "root", "hole", "texture", "band", "ring", "blob")

_KEYWORDS = {
    "crack": "crack", "root": "root", "hole": "hole", "encrust": "texture", "deposit": "texture",
    "water": "band", "joint": "band", "gasket": "ring", "deform": "ring", "fracture": "blob",
}

# Mean RGB tone of each foreground class, cycled by class index.
_TONES = np.array([
    [0.10, 0.08, 0.06], [0.85, 0.80, 0.55], [0.30, 0.45, 0.20], [0.05, 0.05, 0.10],
    [0.80, 0.45, 0.20], [0.45, 0.55, 0.80], [0.75, 0.30, 0.35], [0.90, 0.90, 0.90],
    [0.50, 0.25, 0.55],
])


def primitive_kind(entry: ClassEntry) -> str:
    low = entry.name.lower()
    for key, kind in _KEYWORDS.items():
        if key in low:
            return kind
    return PRIMITIVE_KINDS[(entry.index - 1) % len(PRIMITIVE_KINDS)]


def value_noise(shape, rng: np.random.Generator, octaves: int = 4, base_cells: int = 4) -> np.ndarray:
    """Multi-octave smooth noise in [0, 1] (cubic-interpolated random lattices)."""
    h, w = shape
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        lattice = rng.random((cells + 1, cells + 1))
        up = ndimage.zoom(lattice, (h / (cells + 1), w / (cells + 1)), order=3, mode="reflect",
                          grid_mode=True)
        out += amp * up[:h, :w]
        total += amp
        amp *= 0.5
    out /= total
    return np.clip((out - out.min()) / max(out.max() - out.min(), 1e-12), 0, 1)


def _polyline(rng, h, w, steps, step_len):
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    ang = rng.uniform(0, 2 * math.pi)
    pts = [(y, x)]
    for _ in range(steps):
        ang += rng.normal(0, 0.5)
        y = float(np.clip(y + step_len * math.sin(ang), 0, h - 1))
        x = float(np.clip(x + step_len * math.cos(ang), 0, w - 1))
        pts.append((y, x))
    return pts


def _raster_path(pts, shape, width):
    m = np.zeros(shape, dtype=bool)
    pts = [(min(max(int(round(y)), 0), shape[0] - 1), min(max(int(round(x)), 0), shape[1] - 1)) for y, x in pts]
    for (y0, x0), (y1, x1) in zip(pts, pts[1:]):
        rr, cc = draw.line(y0, x0, y1, x1)
        m[rr, cc] = True
    if width > 1:
        m = ndimage.binary_dilation(m, iterations=width - 1)
    return m


def _region(kind: str, rng: np.random.Generator, shape) -> np.ndarray:
    h, w = shape
    s = min(h, w)
    m = np.zeros(shape, dtype=bool)
    if kind == "crack":
        m = _raster_path(_polyline(rng, h, w, 8, s / 8), shape, 1 + int(rng.integers(0, 2)))
    elif kind == "root":
        trunk = _polyline(rng, h, w, 6, s / 8)
        m = _raster_path(trunk, shape, 2)
        for _ in range(int(rng.integers(2, 4))):
            y, x = trunk[int(rng.integers(1, len(trunk)))]
            ang = rng.uniform(0, 2 * math.pi)
            br = [(y, x)]
            for _ in range(3):
                ang += rng.normal(0, 0.4)
                y = float(np.clip(y + s / 10 * math.sin(ang), 0, h - 1))
                x = float(np.clip(x + s / 10 * math.cos(ang), 0, w - 1))
                br.append((y, x))
            m |= _raster_path(br, shape, 1)
    elif kind in ("hole", "texture", "blob"):
        ry, rx = rng.uniform(s / 12, s / 5, size=2)
        rr, cc = draw.ellipse(rng.uniform(ry, h - ry), rng.uniform(rx, w - rx), ry, rx, shape=shape,
                              rotation=rng.uniform(0, math.pi))
        m[rr, cc] = True
    elif kind == "band":
        thick = int(rng.integers(max(2, s // 16), max(3, s // 6)))
        top = int(rng.integers(0, h - thick))
        m[top:top + thick] = True
    elif kind == "ring":
        cy, cx = rng.uniform(s / 4, h - s / 4), rng.uniform(s / 4, w - s / 4)
        r = rng.uniform(s / 8, s / 4)
        rr, cc = draw.disk((cy, cx), r, shape=shape)
        m[rr, cc] = True
        rr, cc = draw.disk((cy, cx), max(r - max(2, s / 24), 1), shape=shape)
        m[rr, cc] = False
    return m


def _appearance(kind: str, cls: int, rng: np.random.Generator, shape) -> np.ndarray:
    tone = _TONES[(cls - 1) % len(_TONES)]
    img = np.ones(shape + (3,)) * tone
    if kind == "texture":
        yy, xx = np.mgrid[:shape[0], :shape[1]]
        period = 2 + (cls % 3)
        pattern = ((yy // period + xx // period) % 2).astype(np.float64)
        img = img * (0.7 + 0.5 * pattern[..., None])
    img = img + rng.normal(0, 0.03, size=img.shape)
    return img


def generate_synthetic(num: int, size, seed: int, table: ClassTable) -> list[Sample]:
    """Textured backgrounds with class-specific primitives painted on top.

    Sample ``i`` always contains foreground class ``1 + i % (K - 1)`` so every
    class appears once ``num >= K - 1``; one or two more random classes are
    added per sample. Pure function of the arguments.
    """
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    k = table.num_classes
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(num):
        noise = value_noise((h, w), rng)
        tint = np.array([0.55, 0.50, 0.45]) + rng.normal(0, 0.03, 3)
        image = (0.55 + 0.45 * noise)[..., None] * tint
        mask = np.zeros((h, w), dtype=np.int64)
        if k > 1:
            classes = [1 + i % (k - 1)]
            classes += [int(c) for c in rng.integers(1, k, size=int(rng.integers(1, 3)))]
            for cls in classes:
                kind = primitive_kind(table.entries[cls])
                region = _region(kind, rng, (h, w))
                look = _appearance(kind, cls, rng, (h, w))
                image[region] = look[region]
                mask[region] = cls
        image = np.clip(image, 0.0, 1.0)
        # quantize to 8 bits so in-memory samples equal their PNG round trip
        image = (np.round(image * 255.0) / 255.0).astype(np.float32)
        samples.append(Sample(image, mask, f"synth_{seed}_{i:05d}"))
    return samples


# --- nuclei benchmark ----------------------------------------------------------

def import_nuclei_benchmark(root) -> list[Sample]:
    """Read ``root/<id>/images/<id>.png`` plus ``root/<id>/masks/*.png``
    instance masks, flattening instances to a binary foreground mask."""
    root = Path(root)
    samples = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        sid = folder.name
        imgs = sorted((folder / "images").glob("*.png")) if (folder / "images").is_dir() else []
        if len(imgs) != 1:
            log.warning("skipping %s: expected exactly one image, found %d", folder, len(imgs))
            continue
        try:
            image = read_image(imgs[0])
            mask = np.zeros(image.shape[:2], dtype=np.int64)
            mask_dir = folder / "masks"
            for mp in sorted(mask_dir.glob("*.png")) if mask_dir.is_dir() else []:
                with Image.open(mp) as im:
                    inst = np.asarray(im.convert("L")) > 0
                if inst.shape != mask.shape:
                    raise FormatError(f"instance mask {mp.name} has shape {inst.shape}, image {mask.shape}")
                mask[inst] = 1
        except (OSError, FormatError) as exc:
            log.warning("skipping %s: %s", folder, exc)
            continue
        samples.append(Sample(image, mask, sid))
    return samples
