"""Synthetic multi-object shape images and binary PPM/PGM I/O.

Each image holds exactly one class-determining (shape, colour) object and
``distractor_count`` objects whose (shape, colour) pair belongs to no
class.  The manifest records the pixel bounding box of the class object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import os
import re

import numpy as np

from .errors import DataError, FormatError
from .trainer import Sample

SHAPES = ("square", "circle", "triangle", "cross", "stripe")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 220, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 210, 220),
    "white": (235, 235, 235),
    "orange": (240, 140, 30),
}
DEFAULT_CLASSES = (("square", "red"), ("circle", "green"), ("triangle", "blue"), ("cross", "yellow"))
MANIFEST = "manifest.tsv"


@dataclass
class SyntheticSpec:
    classes: tuple = DEFAULT_CLASSES
    image_size: int = 32
    distractor_count: int = 1
    noise_std: float = 0.05
    samples_per_class: int = 40
    min_size: int = 9
    max_size: int = 13
    background: tuple = (30, 30, 30)
    palette: dict = field(default_factory=lambda: dict(COLORS))

    def class_names(self):
        return [f"{color}_{shape}" for shape, color in self.classes]

    def distractor_pairs(self):
        taken = set(self.classes)
        return [(s, c) for s in SHAPES for c in self.palette if (s, c) not in taken]

    def validate(self):
        if len(set(self.classes)) != len(self.classes):
            raise DataError("class (shape, color) pairs must be distinct")
        for shape, color in self.classes:
            if shape not in SHAPES or color not in self.palette:
                raise DataError(f"unknown shape/color {shape}/{color}")
        if self.max_size > self.image_size:
            raise DataError("shapes larger than the image")


def default_spec(n_classes=4, **kwargs):
    pairs = list(DEFAULT_CLASSES)
    extra = [(s, c) for c in COLORS for s in SHAPES if (s, c) not in pairs]
    pairs += extra
    return SyntheticSpec(classes=tuple(pairs[:n_classes]), **kwargs)


def shape_mask(kind, size):
    """Boolean ``size x size`` mask of a shape filling its box."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    if kind == "triangle":
        half_width = (yy + 1) / size * (size / 2.0)
        return np.abs(xx - c) <= half_width
    if kind == "cross":
        arm = max(1, size // 3)
        lo = (size - arm) // 2
        band = slice(lo, lo + arm)
        m = np.zeros((size, size), bool)
        m[band, :] = True
        m[:, band] = True
        return m
    if kind == "stripe":
        return (yy // 2) % 2 == 0
    raise DataError(f"unknown shape {kind!r}")


def _place(rng, size, image_size, taken, tries=200):
    for _ in range(tries):
        y = int(rng.integers(0, image_size - size + 1))
        x = int(rng.integers(0, image_size - size + 1))
        box = (x, y, x + size, y + size)
        if all(box[2] <= t[0] or t[2] <= box[0] or box[3] <= t[1] or t[3] <= box[1] for t in taken):
            return box
    return None


def render_sample(spec, label, rng):
    """One uint8 ``(H, W, 3)`` image and the class object's tight bounding box."""
    n = spec.image_size
    img = np.empty((n, n, 3), np.float64)
    img[...] = spec.background
    objects = [spec.classes[label]]
    pool = spec.distractor_pairs()
    for _ in range(spec.distractor_count):
        objects.append(pool[int(rng.integers(len(pool)))])
    taken, bbox = [], None
    for i, (shape, color) in enumerate(objects):
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        box = _place(rng, size, n, taken)
        if box is None:
            if i == 0:
                raise DataError("could not place the class object")
            continue
        taken.append(box)
        mask = shape_mask(shape, size)
        x0, y0, x1, y1 = box
        region = img[y0:y1, x0:x1]
        region[mask] = spec.palette[color]
        if i == 0:
            ys, xs = np.nonzero(mask)
            bbox = (x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1)
    img += rng.normal(0.0, spec.noise_std * 255.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), bbox


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_pgm(path, gray):
    gray = np.asarray(gray, np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        m = _TOKEN.search(raw, pos)
        if m is None:
            raise FormatError(f"{path}: truncated netpbm header", offset=pos)
        pos = m.end()
        if m.group(2):
            fields.append(m.group(2))
    if fields[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} got {fields[0]!r}", offset=0)
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported", offset=pos)
    pos += 1
    count = w * h * channels
    if len(raw) - pos < count:
        raise FormatError(f"{path}: pixel data truncated", offset=pos)
    data = np.frombuffer(raw, np.uint8, count=count, offset=pos)
    return data.reshape(h, w, channels) if channels > 1 else data.reshape(h, w)


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)


def to_model_input(rgb):
    """uint8 ``(H, W, 3)`` -> float32 ``(3, H, W)`` scaled to [-1, 1]."""
    return (np.asarray(rgb, np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def generate_synthetic_dataset(spec, root, seed):
    """Write ``root/<class>/<id>.ppm`` plus ``root/manifest.tsv``; returns the row count."""
    spec.validate()
    names = spec.class_names()
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    try:
        os.makedirs(root, exist_ok=True)
        for label, name in enumerate(names):
            os.makedirs(os.path.join(root, name), exist_ok=True)
            for i in range(spec.samples_per_class):
                rgb, bbox = render_sample(spec, label, rng)
                rel = f"{name}/{i:04d}.ppm"
                write_ppm(os.path.join(root, rel), rgb)
                rows.append((rel, name, *bbox))
        with open(os.path.join(root, MANIFEST), "w", encoding="utf-8") as fh:
            fh.write("#classes\t" + "\t".join(names) + "\n")
            fh.write(f"#image_size\t{spec.image_size}\n")
            fh.write("path\tclass\tx0\ty0\tx1\ty1\n")
            for row in rows:
                fh.write("\t".join(str(v) for v in row) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {root}: {exc}") from exc
    return len(rows)


def load_dataset(root):
    """Read a dataset directory into ``(class_names, [Sample, ...])``."""
    path = os.path.join(root, MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST} under {root}")
    class_names, samples = None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "#classes":
                class_names = parts[1:]
                index = {n: i for i, n in enumerate(class_names)}
                continue
            if parts[0].startswith("#") or parts[0] == "path" or not parts[0]:
                continue
            if class_names is None:
                raise DataError(f"{path}: class list must precede samples")
            rel, name, *box = parts
            if name not in index:
                raise DataError(f"{path}: unknown class {name!r}")
            rgb = read_ppm(os.path.join(root, rel))
            samples.append(Sample(to_model_input(rgb), index[name], tuple(int(b) for b in box), rel))
    if class_names is None:
        raise DataError(f"{path}: missing class list")
    return class_names, samples
