"""Synthetic co-occurring scenes, netpbm corpus I/O, class-sharing sampling.

A scene is an ``H x W x 3`` image in [0, 1] with an integer pixel mask
(0 = background, 1..C = object classes) and the image-level label vector
derived from that mask.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, ParseError
from .tensor_core import rng_stream

SHAPES = ("disc", "square", "triangle", "ring")

# one hue per class; class k uses PALETTE[(k - 1) % len(PALETTE)]
PALETTE = np.array([
    [0.90, 0.20, 0.15],
    [0.20, 0.80, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.85],
])


@dataclass
class Scene:
    image: np.ndarray       # H x W x 3, float64 in [0, 1]
    mask: np.ndarray        # H x W, int (0 = background)
    labels: np.ndarray      # length C, {0, 1}
    name: str = ""
    has_mask: bool = True


@dataclass
class Corpus:
    scenes: list
    n_classes: int
    class_index: dict = field(init=False)

    def __post_init__(self):
        self.reindex()

    def reindex(self):
        self.class_index = {
            c: [i for i, s in enumerate(self.scenes) if s.labels[c]]
            for c in range(self.n_classes)
        }

    def __len__(self):
        return len(self.scenes)


@dataclass
class DataConfig:
    H: int = 32
    W: int = 32
    n_classes: int = 4
    shapes: tuple = SHAPES
    noise: float = 0.08
    scenes: int = 200
    eval_scenes: int = 50
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 18
    bg_low: float = 0.0
    bg_high: float = 0.15

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        if self.n_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.n_classes}")
        if len(self.shapes) < self.n_classes:
            raise ParameterError("one shape per class is required")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ParameterError(f"unknown shapes {sorted(unknown)}")
        if self.H % 4 or self.W % 4:
            raise ParameterError("H and W must be divisible by 4")


def labels_from_mask(mask, n_classes):
    """Label c is set iff class c+1 occupies at least one pixel."""
    present = np.zeros(n_classes, dtype=np.int64)
    ids = np.unique(mask)
    ids = ids[(ids > 0) & (ids <= n_classes)]
    present[ids - 1] = 1
    return present


def _shape_mask(kind, size, H, W, top, left):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = top + (size - 1) / 2.0, left + (size - 1) / 2.0
    r = size / 2.0
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (yy >= top) & (yy < top + size) & (xx >= left) & (xx < left + size)
    if kind == "triangle":
        # apex up, base on the bottom row of the box
        rel = (yy - top + 1) / size
        half = rel * r
        return (yy >= top) & (yy < top + size) & (np.abs(xx - cx) <= half)
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    raise ParameterError(f"unknown shape {kind!r}")


def gen_scene(cfg, rng, name=""):
    H, W, C = cfg.H, cfg.W, cfg.n_classes
    base = rng.uniform(cfg.bg_low, cfg.bg_high, 3)
    image = base + cfg.noise * rng.standard_normal((H, W, 3))
    mask = np.zeros((H, W), dtype=np.int64)
    n_obj = int(rng.integers(cfg.min_objects, min(cfg.max_objects, C) + 1))
    classes = rng.choice(C, size=n_obj, replace=False) + 1
    for cls in classes:
        for _ in range(50):
            size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            top = int(rng.integers(0, H - size + 1))
            left = int(rng.integers(0, W - size + 1))
            region = _shape_mask(cfg.shapes[cls - 1], size, H, W, top, left)
            # keep a 1-pixel gap so masks never touch
            grown = region.copy()
            grown[1:] |= region[:-1]
            grown[:-1] |= region[1:]
            grown[:, 1:] |= region[:, :-1]
            grown[:, :-1] |= region[:, 1:]
            if not np.any(mask[grown]):
                break
        else:
            continue
        color = PALETTE[(cls - 1) % len(PALETTE)]
        shade = rng.uniform(0.85, 1.0)
        texture = cfg.noise * rng.standard_normal((H, W, 3))
        image[region] = shade * color + texture[region]
        mask[region] = cls
    image = np.clip(image, 0.0, 1.0)
    return Scene(image, mask, labels_from_mask(mask, C), name=name)


def gen_corpus(cfg, rng=None, count=None, stream_offset=0):
    """Deterministic corpus of ``count`` (default ``cfg.scenes``) scenes.

    Scene ``i`` draws from its own stream ``(cfg.seed, stream_offset + i)``,
    so generation order does not matter. If some class ends up in fewer than
    two scenes, the corpus is regenerated on the next block of streams.
    ``rng`` is accepted for signature symmetry; when given, its first draw
    replaces ``cfg.seed``.
    """
    seed = cfg.seed if rng is None else int(rng.integers(0, 2**31 - 1))
    count = cfg.scenes if count is None else count
    if count < 2:
        raise ParameterError("a corpus needs at least two scenes")
    for attempt in range(100):
        base = stream_offset + attempt * 1_000_003
        scenes = [gen_scene(cfg, rng_stream(seed, base + i), name=f"scene_{i:05d}")
                  for i in range(count)]
        corpus = Corpus(scenes, cfg.n_classes)
        if all(len(v) >= 2 for v in corpus.class_index.values()):
            return corpus
    raise DataError("could not place every class in at least two scenes")


def eval_corpus(cfg):
    """Held-out scenes drawn from streams disjoint from the training corpus."""
    return gen_corpus(cfg, count=cfg.eval_scenes, stream_offset=500_000_000)


# ---------------------------------------------------------------- sampling

def _shareable(corpus, n):
    return [c for c, ids in corpus.class_index.items() if len(ids) >= n]


def sample_group(corpus, n, rng):
    """``n`` distinct scenes containing a uniformly drawn shareable class.

    Returns ``(scenes, class_id)``.
    """
    classes = _shareable(corpus, n)
    if not classes:
        raise DataError(f"no class appears in {n} or more scenes")
    cls = classes[int(rng.integers(len(classes)))]
    ids = rng.choice(corpus.class_index[cls], size=n, replace=False)
    return [corpus.scenes[int(i)] for i in ids], cls


def sample_pair(corpus, rng):
    (a, b), cls = sample_group(corpus, 2, rng)
    return a, b, cls


def hflip(scene):
    """Mirror image and mask left-right; labels are unchanged."""
    return Scene(scene.image[:, ::-1].copy(), scene.mask[:, ::-1].copy(), scene.labels.copy(),
                 scene.name, scene.has_mask)


def augment(scene, rng, pad=4):
    """Random flip, zero-pad-and-crop, and per-channel colour jitter."""
    if rng.random() < 0.5:
        scene = hflip(scene)
    image, mask = scene.image, scene.mask
    H, W = mask.shape
    padded = np.zeros((H + 2 * pad, W + 2 * pad, 3))
    padded[pad:pad + H, pad:pad + W] = image
    pmask = np.zeros((H + 2 * pad, W + 2 * pad), dtype=mask.dtype)
    pmask[pad:pad + H, pad:pad + W] = mask
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    image = padded[top:top + H, left:left + W]
    mask = pmask[top:top + H, left:left + W].copy()
    image = np.clip(image * rng.uniform(0.9, 1.1, 3), 0.0, 1.0)
    return Scene(image, mask, labels_from_mask(mask, len(scene.labels)), scene.name, scene.has_mask)


# ---------------------------------------------------------------- netpbm I/O

def _read_netpbm(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ParseError(f"{path}: expected {magic.decode()} header, got {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: malformed header") from None
    if width <= 0 or height <= 0 or maxval != 255:
        raise ParseError(f"{path}: unsupported header {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ParseError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels == 3 else arr.reshape(height, width)


def read_ppm(path):
    """Binary P6 file -> ``H x W x 3`` float array in [0, 1]."""
    return _read_netpbm(path, b"P6").astype(np.float64) / 255.0


def read_pgm(path):
    """Binary P5 file -> ``H x W`` uint8 array."""
    return _read_netpbm(path, b"P5").copy()


def write_ppm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, gray):
    gray = np.asarray(gray)
    if gray.min(initial=0) < 0 or gray.max(initial=0) > 255:
        raise ParameterError(f"{path}: gray values must lie in [0, 255]")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def mask_path(directory, filename):
    stem = os.path.splitext(filename)[0]
    return os.path.join(directory, stem + ".mask.pgm")


def save_corpus(corpus, directory):
    """Write images as P6, masks as ``<stem>.mask.pgm`` and ``labels.csv``."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for i, scene in enumerate(corpus.scenes):
        fname = (scene.name or f"scene_{i:05d}") + ".ppm"
        write_ppm(os.path.join(directory, fname), scene.image)
        if scene.has_mask:
            write_pgm(mask_path(directory, fname), scene.mask)
        rows.append([fname] + [int(v) for v in scene.labels])
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename"] + [f"class_{c}" for c in range(corpus.n_classes)])
        writer.writerows(rows)


def load_corpus(directory):
    """Inverse of :func:`save_corpus`; masks are optional per image."""
    csv_path = os.path.join(directory, "labels.csv")
    if not os.path.exists(csv_path):
        raise ParseError(f"{csv_path}: missing labels file")
    with open(csv_path, newline="") as fh:
        table = list(csv.reader(fh))
    if not table or table[0][:1] != ["filename"]:
        raise ParseError(f"{csv_path}: header must start with 'filename'")
    n_classes = len(table[0]) - 1
    labels = {}
    for lineno, row in enumerate(table[1:], start=2):
        if not row:
            continue
        if len(row) != n_classes + 1:
            raise ParseError(f"{csv_path}:{lineno}: expected {n_classes + 1} fields")
        try:
            labels[row[0]] = np.array([int(v) for v in row[1:]], dtype=np.int64)
        except ValueError:
            raise ParseError(f"{csv_path}:{lineno}: non-integer label") from None

    images = sorted(f for f in os.listdir(directory) if f.endswith(".ppm"))
    scenes = []
    for fname in images:
        if fname not in labels:
            raise ParseError(f"{os.path.join(directory, fname)}: no row in labels.csv")
        image = read_ppm(os.path.join(directory, fname))
        mpath = mask_path(directory, fname)
        if os.path.exists(mpath):
            mask = read_pgm(mpath).astype(np.int64)
            if mask.shape != image.shape[:2]:
                raise ParseError(f"{mpath}: mask shape {mask.shape} != image {image.shape[:2]}")
            has_mask = True
        else:
            mask = np.zeros(image.shape[:2], dtype=np.int64)
            has_mask = False
        scenes.append(Scene(image, mask, labels[fname], os.path.splitext(fname)[0], has_mask))
    missing = set(labels) - set(images)
    if missing:
        raise ParseError(f"{directory}: labels.csv lists missing images {sorted(missing)[:3]}")
    return Corpus(scenes, n_classes)
