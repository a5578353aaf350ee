"""PCB defect dataset: VOC XML ingestion, 600x600 crop augmentation, splits."""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fusion import CLASS_NAMES

# image and defect totals of the public release
SOURCE_IMAGE_COUNT = 693
SOURCE_DEFECT_COUNT = 2953


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class GtBox:
    cls: str
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class AnnotatedImage:
    path: str
    width: int
    height: int
    boxes: list[GtBox] = field(default_factory=list)
    # id of the original full-size image; crops inherit it so splits never leak
    source: str = ""
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not self.source:
            self.source = Path(self.path).stem


@dataclass
class DatasetManifest:
    images: list[AnnotatedImage]
    split: str = "all"

    def class_counts(self) -> Counter:
        return Counter(b.cls for img in self.images for b in img.boxes)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "images": [{
                "path": img.path, "w": img.width, "h": img.height, "source": img.source,
                "boxes": [{"class": b.cls, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
                          for b in img.boxes],
            } for img in self.images],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        images = []
        for entry in d["images"]:
            boxes = [GtBox(normalize_class(b["class"]), b["x1"], b["y1"], b["x2"], b["y2"])
                     for b in entry["boxes"]]
            images.append(AnnotatedImage(entry["path"], entry["w"], entry["h"], boxes,
                                         source=entry.get("source", "")))
        return cls(images, d.get("split", "all"))

    def save(self, path) -> None:
        from .imaging import atomic_write
        atomic_write(Path(path), json.dumps(self.to_dict(), indent=1).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def normalize_class(name: str) -> str:
    key = name.strip().lower().replace(" ", "_").replace("-", "_")
    if key not in CLASS_NAMES:
        raise AnnotationError(f"unknown defect class {name!r}")
    return key


def parse_voc_xml(path) -> AnnotatedImage:
    """Read one VOC annotation (object/name + bndbox/xmin..ymax)."""
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise AnnotationError(f"{path}: malformed XML ({exc})") from None

    def num(node, tag):
        el = node.find(tag)
        if el is None or el.text is None:
            raise AnnotationError(f"{path}: missing <{tag}>")
        try:
            return float(el.text)
        except ValueError:
            raise AnnotationError(f"{path}: <{tag}> is not a number") from None

    size = root.find("size")
    width = int(num(size, "width")) if size is not None else 0
    height = int(num(size, "height")) if size is not None else 0
    filename = root.findtext("filename") or path.with_suffix(".jpg").name

    boxes = []
    for obj in root.findall("object"):
        name = obj.findtext("name")
        if name is None:
            raise AnnotationError(f"{path}: object without <name>")
        bb = obj.find("bndbox")
        if bb is None:
            raise AnnotationError(f"{path}: object without <bndbox>")
        x1, y1, x2, y2 = (num(bb, t) for t in ("xmin", "ymin", "xmax", "ymax"))
        if x2 <= x1 or y2 <= y1:
            raise AnnotationError(f"{path}: inverted box {(x1, y1, x2, y2)}")
        if width and height and (x1 < 0 or y1 < 0 or x2 > width or y2 > height):
            raise AnnotationError(f"{path}: box {(x1, y1, x2, y2)} outside {width}x{height}")
        boxes.append(GtBox(normalize_class(name), x1, y1, x2, y2))
    return AnnotatedImage(str(path.parent / filename), width, height, boxes, source=path.stem)


def load_voc_dir(directory) -> DatasetManifest:
    """Parse every ``*.xml`` below ``directory`` (sorted for determinism)."""
    files = sorted(Path(directory).rglob("*.xml"))
    return DatasetManifest([parse_voc_xml(f) for f in files])


def _window_starts(extent: int, crop: int, stride: int) -> list[int]:
    starts = list(range(0, extent - crop + 1, stride))
    if starts[-1] != extent - crop:
        starts.append(extent - crop)  # flush with the far edge so nothing is left uncovered
    return starts


def crop_origins(img: AnnotatedImage, crop: int = 600, stride: int = 600,
                 defect_centered: bool = True) -> list[tuple[int, int]]:
    if crop > img.width or crop > img.height:
        raise ValueError(f"crop {crop} larger than image {img.width}x{img.height}")
    origins = [(x, y) for y in _window_starts(img.height, crop, stride)
               for x in _window_starts(img.width, crop, stride)]
    if defect_centered:
        for b in img.boxes:
            cx, cy = (b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2
            x = int(np.clip(round(cx - crop / 2), 0, img.width - crop))
            y = int(np.clip(round(cy - crop / 2), 0, img.height - crop))
            if (x, y) not in origins:
                origins.append((x, y))
    return origins


def clip_box(b: GtBox, x0: int, y0: int, crop: int) -> GtBox | None:
    x1, y1 = max(b.x1, x0), max(b.y1, y0)
    x2, y2 = min(b.x2, x0 + crop), min(b.y2, y0 + crop)
    if x2 <= x1 or y2 <= y1:
        return None
    return GtBox(b.cls, x1 - x0, y1 - y0, x2 - x0, y2 - y0)


def crop_augment(img: AnnotatedImage, crop: int = 600, stride: int = 600,
                 min_box_frac: float = 0.25, defect_centered: bool = True) -> list[AnnotatedImage]:
    """Cut ``crop x crop`` windows and carry over the boxes that survive.

    Windows: a regular grid with ``stride`` plus (optionally) one window
    centred on each defect. A box is clipped to the window and kept when the
    retained area is at least ``min_box_frac`` of the original; windows left
    with no boxes are discarded. Output coordinates are window-relative.
    """
    out = []
    stem = Path(img.path).stem
    suffix = Path(img.path).suffix or ".png"
    for x0, y0 in crop_origins(img, crop, stride, defect_centered):
        kept = []
        for b in img.boxes:
            c = clip_box(b, x0, y0, crop)
            if c is not None and c.area >= min_box_frac * b.area:
                kept.append(c)
        if kept:
            out.append(AnnotatedImage(f"{stem}_x{x0}_y{y0}{suffix}", crop, crop, kept,
                                      source=img.source, origin=(x0, y0)))
    return out


def split_manifest(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1),
                   seed: int = 0) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Seeded train/val/test split at the source-image level."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    sources = sorted({img.source for img in manifest.images})
    order = np.random.default_rng(seed).permutation(len(sources))
    shuffled = [sources[i] for i in order]
    n = len(shuffled)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    assignment = {}
    for k, s in enumerate(shuffled):
        assignment[s] = 0 if k < n_train else 1 if k < n_train + n_val else 2
    parts = [[], [], []]
    for img in manifest.images:
        parts[assignment[img.source]].append(img)
    names = ("train", "val", "test")
    return tuple(DatasetManifest(p, names[i]) for i, p in enumerate(parts))


def defect_type(img: AnnotatedImage) -> str | None:
    """Dominant defect class of an image (most boxes; ties by class order)."""
    if not img.boxes:
        return None
    counts = Counter(b.cls for b in img.boxes)
    return max(CLASS_NAMES, key=lambda c: (counts.get(c, 0), -CLASS_NAMES.index(c)))


def with_path(img: AnnotatedImage, path: str) -> AnnotatedImage:
    return replace(img, path=path)
