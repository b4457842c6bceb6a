"""Deterministic synthetic shapes for few-shot detection episodes.

Eight geometric classes are drawn on 64x64 noise canvases. Hue is correlated
with the class but jittered enough that colour alone does not identify it.
Every function here is a pure function of its integer seeds.
"""

from __future__ import annotations

import colorsys
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import DTYPE, Tensor

CLASS_NAMES = ("circle", "square", "triangle", "cross", "diamond", "ring", "bar", "star")
NUM_CLASSES = len(CLASS_NAMES)
CANVAS = (64, 64)
SCALE_RANGE = (10, 28)
NOISE_AMPLITUDE = 0.1
HUE_JITTER = 0.15
MIN_BOX = 8
MAX_IOU = 0.3
GRID_CELL = 8
MAX_ATTEMPTS = 100
POOL_SIZE = 10  # largest supported K

# purpose tags mixed into derived seeds
TAG_QUERY, TAG_SUPPORT, TAG_POOL, TAG_EPISODE, TAG_AUGMENT = 11, 13, 17, 19, 23


class PlacementError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class Box:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def within(self, canvas: tuple[int, int] = CANVAS) -> bool:
        h, w = canvas
        return 0 <= self.x0 and self.x1 <= w and 0 <= self.y0 and self.y1 <= h


@dataclass(frozen=True)
class ShapeParams:
    class_id: int
    cx: float
    cy: float
    size: float
    vertical: bool
    rgb: tuple[float, float, float]


@dataclass
class Scene:
    image: np.ndarray  # [3,H,W]
    boxes: list[Box]
    shapes: list[ShapeParams] = field(default_factory=list)


@dataclass
class SupportItem:
    image: Tensor
    mask: Tensor
    class_id: int
    box: Box

    @property
    def area(self) -> int:
        return int(round(self.box.area))


@dataclass
class QueryItem:
    image: Tensor
    boxes: list[Box]


@dataclass
class Episode:
    support: list[SupportItem]
    query: list[QueryItem]
    class_roster: dict[int, str]
    seed: int = 0

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_roster)


@dataclass(frozen=True)
class ClassSplit:
    base_ids: frozenset
    novel_ids: frozenset

    def __post_init__(self):
        if self.base_ids & self.novel_ids:
            raise ValueError("base and novel classes overlap")

    @property
    def all_ids(self) -> list[int]:
        return sorted(self.base_ids | self.novel_ids)

    def roster(self, ids: Optional[Sequence[int]] = None) -> dict[int, str]:
        ids = self.all_ids if ids is None else ids
        return {c: ("novel" if c in self.novel_ids else "base") for c in sorted(ids)}


def default_split(num_classes: int = NUM_CLASSES, num_novel: int = 2, variant: int = 0) -> ClassSplit:
    """Rotating split: variant 0 holds out the last ``num_novel`` classes."""
    if variant not in (0, 1, 2):
        raise ValueError(f"split variant must be 0, 1 or 2, got {variant}")
    start = (num_classes - num_novel - variant * num_novel) % num_classes
    novel = frozenset((start + i) % num_classes for i in range(num_novel))
    return ClassSplit(frozenset(range(num_classes)) - novel, novel)


# ---------------------------------------------------------------------------
# rasterisation


def shape_mask(params: ShapeParams, canvas: tuple[int, int] = CANVAS) -> np.ndarray:
    """Boolean [H,W] indicator of a shape, sampled at pixel centres."""
    h, w = canvas
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - params.cx
    dy = ys + 0.5 - params.cy
    r = params.size / 2.0
    name = CLASS_NAMES[params.class_id]
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if name == "triangle":
        t = (dy + r) / (2.0 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    if name == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if name == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "bar":
        long_, short = (dy, dx) if params.vertical else (dx, dy)
        return (np.abs(long_) <= r) & (np.abs(short) <= r / 3.0)
    if name == "star":
        theta = np.arctan2(dy, dx)
        rad = np.sqrt(dx * dx + dy * dy)
        return rad <= r * (0.6 + 0.4 * np.cos(5.0 * theta + np.pi / 2.0))
    raise ValueError(f"unknown class id {params.class_id}")


def tight_box(mask: np.ndarray, class_id: int) -> Optional[Box]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1, class_id)


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def center_cell(box: Box) -> tuple[int, int]:
    cx, cy = box.center
    return int(cy // GRID_CELL), int(cx // GRID_CELL)


def _class_rgb(class_id: int, rng: np.random.Generator) -> tuple[float, float, float]:
    hue = (class_id / NUM_CLASSES + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    sat = rng.uniform(0.55, 1.0)
    val = rng.uniform(0.6, 1.0)
    return colorsys.hsv_to_rgb(hue, sat, val)


def _place(rng: np.random.Generator, class_id: int, taken: list[Box], canvas) -> tuple[ShapeParams, np.ndarray, Box]:
    h, w = canvas
    cells = {center_cell(b) for b in taken}
    for _ in range(MAX_ATTEMPTS):
        size = rng.uniform(*SCALE_RANGE)
        half = size / 2.0
        cx = rng.uniform(half, w - half)
        cy = rng.uniform(half, h - half)
        vertical = bool(rng.integers(2))
        rgb = _class_rgb(class_id, rng)
        params = ShapeParams(class_id, float(cx), float(cy), float(size), vertical, tuple(float(c) for c in rgb))
        mask = shape_mask(params, canvas)
        box = tight_box(mask, class_id)
        if box is None or box.width < MIN_BOX or box.height < MIN_BOX:
            continue
        if any(box_iou(box, t) >= MAX_IOU for t in taken) or center_cell(box) in cells:
            continue
        return params, mask, box
    raise PlacementError("placement exhausted")


def render_scene(seed: int, classes: Sequence[int], canvas: tuple[int, int] = CANVAS) -> Scene:
    """Draw one object per entry of ``classes`` over a uniform-noise background."""
    if tuple(canvas) != CANVAS:
        raise ValueError(f"canvas must be {CANVAS}, got {canvas}")
    for c in classes:
        if not 0 <= c < NUM_CLASSES:
            raise ValueError(f"class id {c} outside the {NUM_CLASSES} built-in shapes")
    rng = np.random.default_rng(seed)
    h, w = canvas
    image = rng.uniform(0.0, NOISE_AMPLITUDE, size=(3, h, w))
    boxes: list[Box] = []
    shapes: list[ShapeParams] = []
    for c in classes:
        params, mask, box = _place(rng, int(c), boxes, canvas)
        shade = rng.uniform(-0.05, 0.05, size=(3, h, w))
        color = np.asarray(params.rgb)[:, None, None] + shade
        image = np.where(mask[None], np.clip(color, 0.0, 1.0), image)
        boxes.append(box)
        shapes.append(params)
    return Scene(image.astype(DTYPE), boxes, shapes)


def make_support_mask(box: Box, canvas: tuple[int, int] = CANVAS) -> Tensor:
    """Binary [1,H,W] indicator of the half-open box."""
    h, w = canvas
    x0, y0, x1, y1 = (int(round(v)) for v in (box.x0, box.y0, box.x1, box.y1))
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"box {box} is not valid on a {h}x{w} canvas")
    mask = np.zeros((1, h, w), dtype=DTYPE)
    mask[0, y0:y1, x0:x1] = 1.0
    return Tensor(mask)


# ---------------------------------------------------------------------------
# items and episodes


def _scene_classes(rng: np.random.Generator, pool: Sequence[int], n: int) -> list[int]:
    return [int(c) for c in rng.choice(sorted(pool), size=n, replace=True)]


def render_support(seed: int, class_id: int, distractor_pool: Sequence[int]) -> tuple[SupportItem, Scene]:
    """Support image: the target object plus up to two distractors of other classes."""
    rng = np.random.default_rng(derive_seed(seed, TAG_SUPPORT))
    others = [c for c in distractor_pool if c != class_id]
    n_extra = int(rng.integers(0, 3)) if others else 0
    classes = [class_id] + _scene_classes(rng, others, n_extra) if n_extra else [class_id]
    scene = render_scene(seed, classes)
    box = scene.boxes[0]
    item = SupportItem(Tensor(scene.image), make_support_mask(box), class_id, box)
    return item, scene


def render_query(seed: int, class_pool: Sequence[int]) -> QueryItem:
    rng = np.random.default_rng(derive_seed(seed, TAG_QUERY))
    n = int(rng.integers(1, 4))
    scene = render_scene(seed, _scene_classes(rng, class_pool, n))
    return QueryItem(Tensor(scene.image), scene.boxes)


@dataclass
class ShotPool:
    """Frozen K-shot annotations: for each class, the first K of ``POOL_SIZE`` scenes."""

    items: dict[int, list[SupportItem]]
    scenes: dict[int, list[Scene]]

    def take(self, class_id: int, k: int) -> list[SupportItem]:
        return self.items[class_id][:k]


_POOL_CACHE: dict = {}


def shot_pool(pool_seed: int, split: ClassSplit) -> ShotPool:
    """Per-seed pool of support scenes for every class.

    Distractors come from base classes only, so a novel class never appears in
    the pool more than its K designated instances.
    """
    key = (pool_seed, split)
    if key not in _POOL_CACHE:
        items: dict[int, list[SupportItem]] = {}
        scenes: dict[int, list[Scene]] = {}
        for c in split.all_ids:
            items[c], scenes[c] = [], []
            for j in range(POOL_SIZE):
                item, scene = render_support(derive_seed(pool_seed, TAG_POOL, c, j), c, sorted(split.base_ids))
                items[c].append(item)
                scenes[c].append(scene)
        _POOL_CACHE.clear()
        _POOL_CACHE[key] = ShotPool(items, scenes)
    return _POOL_CACHE[key]


def augment_query(item: QueryItem, seed: int) -> QueryItem:
    """Horizontal flip, random crop (zoom in) and random resize (zoom out)."""
    rng = np.random.default_rng(derive_seed(seed, TAG_AUGMENT))
    image = item.image.data
    boxes = [(b.x0, b.y0, b.x1, b.y1, b.class_id) for b in item.boxes]
    h, w = image.shape[1:]
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        boxes = [(w - x1, y0, w - x0, y1, c) for x0, y0, x1, y1, c in boxes]
    mode = rng.integers(3)
    if mode == 1 and boxes:
        # crop a window containing every box, then scale it back up
        side = int(rng.integers(52, 65))
        lo_x = max(0, max(b[2] for b in boxes) - side)
        hi_x = min(w - side, min(b[0] for b in boxes))
        lo_y = max(0, max(b[3] for b in boxes) - side)
        hi_y = min(h - side, min(b[1] for b in boxes))
        if side < w and lo_x <= hi_x and lo_y <= hi_y:
            ox = int(rng.integers(lo_x, hi_x + 1))
            oy = int(rng.integers(lo_y, hi_y + 1))
            src = np.clip(((np.arange(w) + 0.5) * side / w).astype(int), 0, side - 1)
            image = image[:, oy + src][:, :, ox + src]
            scale = w / side
            boxes = [(_rescale(x0 - ox, scale, w), _rescale(y0 - oy, scale, h),
                      _rescale(x1 - ox, scale, w), _rescale(y1 - oy, scale, h), c)
                     for x0, y0, x1, y1, c in boxes]
    elif mode == 2 and boxes:
        # shrink the whole scene into a noise canvas
        new = int(rng.integers(52, 64))
        scale = new / w
        if all(min(b[2] - b[0], b[3] - b[1]) * scale >= MIN_BOX + 1 for b in boxes):
            ox = int(rng.integers(0, w - new + 1))
            oy = int(rng.integers(0, h - new + 1))
            canvas = rng.uniform(0.0, NOISE_AMPLITUDE, size=image.shape).astype(DTYPE)
            src = np.clip(((np.arange(new) + 0.5) / scale).astype(int), 0, w - 1)
            canvas[:, oy:oy + new, ox:ox + new] = image[:, src][:, :, src]
            image = canvas
            boxes = [(ox + _rescale(x0, scale, new), oy + _rescale(y0, scale, new),
                      ox + _rescale(x1, scale, new), oy + _rescale(y1, scale, new), c)
                     for x0, y0, x1, y1, c in boxes]
    out = []
    for x0, y0, x1, y1, c in boxes:
        if x1 - x0 >= 1 and y1 - y0 >= 1:
            out.append(Box(int(x0), int(y0), int(x1), int(y1), int(c)))
    return QueryItem(Tensor(np.ascontiguousarray(image)), out)


def _rescale(v: float, scale: float, limit: int) -> int:
    return int(min(max(round(v * scale), 0), limit))


def sample_episode(
    rng_seed: int,
    split: ClassSplit,
    phase: str,
    K: int,
    num_query: int,
    pool_seed: int = 0,
    augment: bool = False,
) -> Episode:
    """One meta-learning task.

    ``phase="base"`` uses base classes only, with freshly rendered supports and
    multi-object queries. ``phase="finetune"`` uses every class with the frozen
    K-shot pool of ``pool_seed`` as supports; queries are resampled from the
    same pool scenes so no class sees more than K annotated instances.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if num_query < 0:
        raise ValueError(f"num_query must be >= 0, got {num_query}")
    rng = np.random.default_rng(derive_seed(rng_seed, TAG_EPISODE))
    if phase == "base":
        classes = sorted(split.base_ids)
        support = []
        for c in classes:
            for k in range(K):
                item, _ = render_support(derive_seed(rng_seed, TAG_SUPPORT, c, k), c, classes)
                support.append(item)
        query = [render_query(derive_seed(rng_seed, TAG_QUERY, q), classes) for q in range(num_query)]
    elif phase == "finetune":
        if K > POOL_SIZE:
            raise ValueError(f"K={K} exceeds the shot pool size {POOL_SIZE}")
        classes = split.all_ids
        pool = shot_pool(pool_seed, split)
        support = [item for c in classes for item in pool.take(c, K)]
        query = []
        for q in range(num_query):
            c = classes[int(rng.integers(len(classes)))]
            scene = pool.scenes[c][int(rng.integers(K))]
            query.append(QueryItem(Tensor(scene.image), list(scene.boxes)))
    else:
        raise ValueError(f"phase must be 'base' or 'finetune', got {phase!r}")
    if augment:
        query = [augment_query(q, derive_seed(rng_seed, TAG_AUGMENT, i)) for i, q in enumerate(query)]
    return Episode(support, query, split.roster(classes), seed=rng_seed)


# ---------------------------------------------------------------------------
# dataset dump

TENSOR_MAGIC = b"CMET"
TENSOR_VERSION = 1


def write_tensor_file(path, array: np.ndarray) -> None:
    """Portable tensor file: magic, u32 version, u32 rank, u32 dims, f64 LE payload."""
    arr = np.asarray(array, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a CMET tensor file")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor version {version}")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload length does not match dims {dims}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(dims).astype(DTYPE)


def format_boxes(boxes: Sequence[Box]) -> str:
    return "".join(f"{b.class_id} {b.x0:g} {b.y0:g} {b.x1:g} {b.y1:g}\n" for b in boxes)


def dump_episode(episode: Episode, directory) -> list[Path]:
    """Write every image and mask of an episode plus plain-text box lists."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(episode.support):
        for name, arr in ((f"support_{i:03d}_image.cmet", s.image.data), (f"support_{i:03d}_mask.cmet", s.mask.data)):
            write_tensor_file(d / name, arr)
            written.append(d / name)
        p = d / f"support_{i:03d}_boxes.txt"
        p.write_text(format_boxes([s.box]))
        written.append(p)
    for i, q in enumerate(episode.query):
        p = d / f"query_{i:03d}_image.cmet"
        write_tensor_file(p, q.image.data)
        b = d / f"query_{i:03d}_boxes.txt"
        b.write_text(format_boxes(q.boxes))
        written += [p, b]
    return written
