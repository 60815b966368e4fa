"""Procedural "parts" images with ground-truth part masks.

Each class is drawn as two class-specific parts (unique shape/colour
combinations) plus one or two shared grey-scale distractor parts on a
low-amplitude textured background. Parts never overlap, so every pixel
belongs to at most one part mask.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pnm

CANVAS = 32
SHAPES = ("disk", "bar", "ring", "triangle")
NUM_SHARED = 3
# Class-specific parts share a narrow warm hue band, so classes differ by
# shape and a small colour shift rather than by clearly separate colours.
HUE_START = 0.02
HUE_SPAN = 0.08
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PartSpec:
    part_id: int
    shape: str
    color: tuple[float, float, float]
    color_jitter: float
    size_range: tuple[float, float]
    region: tuple[int, int, int, int]  # x0, y0, x1, y1 bounds for the part's box
    shared: bool
    owner: int | None = None  # class index for class-specific parts

    def __post_init__(self):
        x0, y0, x1, y1 = self.region
        if not (0 <= x0 < x1 <= CANVAS and 0 <= y0 < y1 <= CANVAS):
            raise ValueError(f"region {self.region} outside canvas")
        if self.size_range[0] <= 0 or self.size_range[1] < self.size_range[0]:
            raise ValueError(f"bad size range {self.size_range}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape}")


# -- primitives ------------------------------------------------------------

_SIZE_RANGES = {"disk": (3.0, 5.0), "bar": (9.0, 13.0), "ring": (4.5, 6.5), "triangle": (8.0, 11.0)}
_BAR_WIDTH = (3.0, 4.0)
_RING_THICKNESS = 2.2


def _grid():
    c = np.arange(CANVAS) + 0.5
    return np.meshgrid(c, c, indexing="xy")  # xx[row, col] = col + .5


def rasterize(shape: str, cx: float, cy: float, size: float, aux: float = 0.0,
              flag: bool = False) -> np.ndarray:
    """Boolean CANVASxCANVAS mask by pixel-centre inclusion.

    ``size`` is the radius (disk), outer radius (ring), length (bar) or side
    (triangle); ``aux`` is the bar width; ``flag`` makes bars vertical and
    flips triangles upside down.
    """
    xx, yy = _grid()
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx * dx + dy * dy <= size * size
    if shape == "ring":
        d2 = dx * dx + dy * dy
        inner = size - _RING_THICKNESS
        return (d2 <= size * size) & (d2 >= inner * inner)
    if shape == "bar":
        length, width = size, aux
        if flag:
            dx, dy = dy, dx
        return (np.abs(dx) <= length / 2) & (np.abs(dy) <= width / 2)
    if shape == "triangle":
        # equilateral, centroid at (cx, cy)
        if flag:
            dy = -dy
        h = size * np.sqrt(3) / 2
        ok = dy <= h / 3
        ok &= np.sqrt(3) * dx - dy <= 2 * h / 3
        ok &= -np.sqrt(3) * dx - dy <= 2 * h / 3
        return ok
    raise ValueError(shape)


def analytic_area(shape: str, size: float, aux: float = 0.0) -> float:
    if shape == "disk":
        return np.pi * size ** 2
    if shape == "ring":
        return np.pi * (size ** 2 - (size - _RING_THICKNESS) ** 2)
    if shape == "bar":
        return size * aux
    if shape == "triangle":
        return np.sqrt(3) / 4 * size ** 2
    raise ValueError(shape)


def perimeter(shape: str, size: float, aux: float = 0.0) -> float:
    if shape == "disk":
        return 2 * np.pi * size
    if shape == "ring":
        return 2 * np.pi * (2 * size - _RING_THICKNESS)
    if shape == "bar":
        return 2 * (size + aux)
    if shape == "triangle":
        return 3 * size
    raise ValueError(shape)


def _half_extent(shape: str, size: float, aux: float, flag: bool) -> tuple[float, float]:
    if shape in ("disk", "ring"):
        return size, size
    if shape == "bar":
        return (aux / 2, size / 2) if flag else (size / 2, aux / 2)
    return size / 2, size / np.sqrt(3)


# -- catalogue -------------------------------------------------------------

def part_catalogue(num_classes: int) -> list[PartSpec]:
    """Two class-specific parts per class followed by the shared distractors."""
    parts = []
    n_specific = 2 * num_classes
    for p in range(n_specific):
        owner, t = divmod(p, 2)
        shape = SHAPES[(2 * owner + t) % len(SHAPES)]
        hue = HUE_START + HUE_SPAN * p / n_specific
        rgb = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
        parts.append(PartSpec(p, shape, tuple(round(c, 4) for c in rgb), 0.06,
                              _SIZE_RANGES[shape], (0, 0, CANVAS, CANVAS), False, owner))
    greys = ((0.95, 0.95, 0.95), (0.05, 0.05, 0.05), (0.2, 0.2, 0.2))
    shared_shapes = ("bar", "ring", "triangle")
    for s in range(NUM_SHARED):
        shape = shared_shapes[s % len(shared_shapes)]
        parts.append(PartSpec(n_specific + s, shape, greys[s % len(greys)], 0.04,
                              _SIZE_RANGES[shape], (0, 0, CANVAS, CANVAS), True))
    return parts


# -- rendering -------------------------------------------------------------

def _background(rng: np.random.Generator) -> np.ndarray:
    xx, yy = _grid()
    base = rng.uniform(0.35, 0.65) + rng.uniform(-0.05, 0.05, size=3)
    img = np.broadcast_to(base, (CANVAS, CANVAS, 3)).copy()
    for _ in range(3):
        fx, fy = rng.uniform(-0.5, 0.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.04 * np.sin(fx * xx + fy * yy + phase)
        img += wave[..., None] * rng.uniform(0.5, 1.0, size=3)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _layout(rng: np.random.Generator, chosen: list[PartSpec], tries: int) -> dict:
    """Non-overlapping placements (cx, cy, size, aux, flag) keyed by part id."""
    boxes: list[tuple[float, float, float, float]] = []
    out = {}
    for part in chosen:
        size = rng.uniform(*part.size_range)
        aux = rng.uniform(*_BAR_WIDTH) if part.shape == "bar" else 0.0
        flag = bool(rng.integers(2))
        hx, hy = _half_extent(part.shape, size, aux, flag)
        x0, y0, x1, y1 = part.region
        for _ in range(tries):
            cx = rng.uniform(x0 + hx + 0.5, x1 - hx - 0.5)
            cy = rng.uniform(y0 + hy + 0.5, y1 - hy - 0.5)
            box = (cx - hx - 1, cy - hy - 1, cx + hx + 1, cy + hy + 1)
            if all(box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1]
                   for b in boxes):
                boxes.append(box)
                out[part.part_id] = (cx, cy, size, aux, flag)
                break
    return out


def render_sample(seed: int, label: int, index: int, parts: list[PartSpec],
                  max_tries: int = 200):
    """Render one image of class ``label``.

    Returns ``(image, masks, background)`` where ``masks`` maps part id to a
    boolean mask and ``background`` is the quantised part-free canvas.
    """
    rng = np.random.default_rng([seed, label, index])
    bg = _background(rng)
    specific = [p for p in parts if p.owner == label]
    shared = [p for p in parts if p.shared]
    n_shared = int(rng.integers(1, 3))
    chosen = specific + [shared[i] for i in sorted(rng.choice(len(shared), n_shared,
                                                                replace=False))]
    # sample geometry first; retry the whole layout if a class-specific part does not fit
    for _ in range(max_tries):
        layout = _layout(rng, chosen, max_tries)
        if all(p.part_id in layout for p in specific):
            break
    img = bg.copy()
    masks: dict[int, np.ndarray] = {}
    for part in chosen:
        if part.part_id not in layout:
            continue
        mask = rasterize(part.shape, *layout[part.part_id])
        color = np.clip(np.asarray(part.color) + rng.uniform(-part.color_jitter,
                                                              part.color_jitter, 3), 0, 1)
        shade = color + rng.normal(0.0, 0.015, size=(int(mask.sum()), 3))
        img[mask] = shade
        masks[part.part_id] = mask
    return _quantize(img), masks, _quantize(bg)


# -- dataset ---------------------------------------------------------------

@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, 32, 32, 3) in [0, 1]
    labels: np.ndarray  # (N,)
    part_masks: list[dict[int, np.ndarray]]
    split: np.ndarray  # (N,) of "train" / "val" / "test"
    num_classes: int
    parts: list[PartSpec] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.labels) == len(self.part_masks) == len(self.split) == n):
            raise ValueError("images, labels, masks and split tags differ in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, tag: str) -> "LabeledDataset":
        idx = np.flatnonzero(self.split == tag)
        return LabeledDataset(self.images[idx], self.labels[idx],
                              [self.part_masks[i] for i in idx], self.split[idx],
                              self.num_classes, self.parts)


def generate(seed: int, num_classes: int = 4, images_per_class: int = 500) -> LabeledDataset:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if images_per_class < 1:
        raise ValueError("need at least one image per class")
    parts = part_catalogue(num_classes)
    images, labels, masks = [], [], []
    for label in range(num_classes):
        for i in range(images_per_class):
            img, m, _ = render_sample(seed, label, i, parts)
            images.append(img)
            labels.append(label)
            masks.append(m)
    labels = np.asarray(labels)
    split = np.empty(len(labels), dtype="<U5")
    rng = np.random.default_rng([seed, 0x5b11])
    n_train = round(0.8 * images_per_class)
    n_val = round(0.1 * images_per_class)
    for label in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == label))
        split[idx[:n_train]] = "train"
        split[idx[n_train:n_train + n_val]] = "val"
        split[idx[n_train + n_val:]] = "test"
    return LabeledDataset(np.stack(images), labels, masks, split, num_classes, parts)


def part_mask(dataset: LabeledDataset, image_index: int, part_id: int) -> np.ndarray:
    """Binary 32x32 mask; all zeros if the part is absent from the image."""
    if not 0 <= image_index < len(dataset):
        raise IndexError(f"image index {image_index} out of range")
    if dataset.parts and not 0 <= part_id < len(dataset.parts):
        raise IndexError(f"part id {part_id} out of range")
    m = dataset.part_masks[image_index].get(part_id)
    if m is None:
        return np.zeros((CANVAS, CANVAS), dtype=np.uint8)
    return m.astype(np.uint8)


def save_dataset(dataset: LabeledDataset, directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, masks) in enumerate(zip(dataset.images, dataset.part_masks)):
        name = f"images/{i:05d}.ppm"
        pnm.write_ppm(root / name, img)
        mask_files = {}
        for pid in sorted(masks):
            mname = f"masks/{i:05d}_p{pid:02d}.pgm"
            pnm.write_pgm(root / mname, masks[pid].astype(np.uint8) * 255)
            mask_files[str(pid)] = mname
        records.append({"image": name, "label": int(dataset.labels[i]), "masks": mask_files})
    meta = {
        "num_classes": dataset.num_classes,
        "parts": [asdict(p) for p in dataset.parts],
        "splits": {tag: np.flatnonzero(dataset.split == tag).tolist() for tag in SPLITS},
        "records": records,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1))


def load_dataset(directory) -> LabeledDataset:
    root = Path(directory)
    meta = json.loads((root / "meta.json").read_text())
    records = meta["records"]
    images = np.stack([pnm.read_ppm(root / r["image"]) for r in records])
    labels = np.array([r["label"] for r in records])
    masks = [{int(pid): pnm.read_pgm(root / f) > 0 for pid, f in r["masks"].items()}
             for r in records]
    split = np.empty(len(records), dtype="<U5")
    for tag, idx in meta["splits"].items():
        split[idx] = tag
    parts = [PartSpec(p["part_id"], p["shape"], tuple(p["color"]), p["color_jitter"],
                      tuple(p["size_range"]), tuple(p["region"]), p["shared"], p["owner"])
             for p in meta["parts"]]
    return LabeledDataset(images, labels, masks, split, meta["num_classes"], parts)
