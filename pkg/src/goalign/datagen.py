"""Synthetic scenes with templated long captions and known object/sentence links.

Each scene is a plain background with a handful of flat colored shapes. The
caption is one scene-summary sentence followed by one sentence per object, in
object order, so the ground-truth (box, sentence) pairs are known exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ManifestError, PlacementError, VersionError

MANIFEST_VERSION = "glit-toy/1"
MANIFEST_NAME = "manifest.jsonl"

# 8-bit palette so that PNG storage is lossless.
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 210, 40),
    "purple": (140, 60, 190),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "pink": (240, 120, 180),
    "brown": (130, 80, 30),
    "white": (250, 250, 250),
    "black": (15, 15, 15),
    "lime": (160, 230, 60),
    "navy": (20, 30, 110),
    "teal": (20, 120, 120),
    "maroon": (120, 20, 50),
    "magenta": (220, 40, 220),
}
BACKGROUND: tuple[int, int, int] = (128, 128, 128)
SHAPES: tuple[str, ...] = ("circle", "square", "triangle", "diamond")

_NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six")
_TERMINATORS = ".!?"


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    n_objects: int = 4
    shape_vocab: tuple[str, ...] = SHAPES
    color_vocab: tuple[str, ...] = tuple(PALETTE)
    seed: int = 0
    patch_size: int = 8
    verbosity: int = 0
    min_frac: float = 0.22
    max_frac: float = 0.38
    max_tries: int = 200

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.n_objects <= 6:
            raise ValueError(f"n_objects must be in [1, 6], got {self.n_objects}")
        if not self.shape_vocab or not self.color_vocab:
            raise ValueError("shape and color vocabularies must be non-empty")
        if self.n_objects > len(self.color_vocab):
            raise ValueError("need at least as many colors as objects (colors are unique per scene)")
        unknown = set(self.color_vocab) - set(PALETTE)
        if unknown:
            raise ValueError(f"colors without a palette entry: {sorted(unknown)}")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]
    sentence_index: int


@dataclass(frozen=True)
class Sentence:
    text: str
    start: int
    end: int


@dataclass
class SceneRecord:
    id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    caption: str
    objects: list[SceneObject]
    sentences: list[Sentence]
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def image_size(self) -> int:
        return int(self.image.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.caption == other.caption
            and self.objects == other.objects
            and self.sentences == other.sentences
            and self.seed == other.seed
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
        )


def derive_seed(master_seed: int, index: int) -> int:
    """Per-record seed from a master seed and a record counter."""
    ss = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def location_phrase(bbox: Sequence[int], image_size: int) -> str:
    cx = (bbox[0] + bbox[2]) / 2 / image_size
    cy = (bbox[1] + bbox[3]) / 2 / image_size
    vert = "top" if cy < 1 / 3 else ("bottom" if cy >= 2 / 3 else "")
    horiz = "left" if cx < 1 / 3 else ("right" if cx >= 2 / 3 else "")
    return " ".join(p for p in (vert, horiz) if p) or "center"


def shape_mask(shape: str, width: int, height: int) -> np.ndarray:
    """Boolean mask of `shape` inscribed in a width x height box (pixel centers)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (xs + 0.5) / width * 2 - 1  # [-1, 1]
    v = (ys + 0.5) / height * 2 - 1
    if shape == "square":
        return np.ones((height, width), dtype=bool)
    if shape == "circle":
        return u**2 + v**2 <= 1.0
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "triangle":
        # apex at top center, base along the bottom edge
        return np.abs(u) <= (v + 1) / 2
    raise ValueError(f"unknown shape {shape!r}")


def _place_boxes(rng: np.random.Generator, spec: SceneSpec, restarts: int = 8) -> list[tuple[int, int, int, int]]:
    """Greedy rejection sampling of disjoint boxes.

    A dead end restarts the whole layout with a smaller maximum side, so
    crowded scenes still resolve without ever allowing overlap.
    """
    size = spec.image_size
    lo = max(4, int(round(spec.min_frac * size)))
    hi0 = max(lo + 1, int(round(spec.max_frac * size)))
    for r in range(restarts):
        hi = hi0 - (hi0 - lo) * r // restarts
        boxes: list[tuple[int, int, int, int]] = []
        for _ in range(spec.n_objects):
            for _attempt in range(spec.max_tries):
                w = int(rng.integers(lo, hi + 1))
                h = int(rng.integers(lo, hi + 1))
                x1 = int(rng.integers(0, size - w + 1))
                y1 = int(rng.integers(0, size - h + 1))
                cand = (x1, y1, x1 + w, y1 + h)
                # Disjoint boxes keep every crop free of other objects' pixels.
                if all(
                    cand[2] <= b[0] or b[2] <= cand[0] or cand[3] <= b[1] or b[3] <= cand[1]
                    for b in boxes
                ):
                    boxes.append(cand)
                    break
            else:
                break
        if len(boxes) == spec.n_objects:
            return boxes
    raise PlacementError(
        f"could not place {spec.n_objects} objects in a {size}px image "
        f"after {restarts} layouts of {spec.max_tries} tries per object"
    )


def _summary_sentence(n: int, verbosity: int) -> str:
    noun = "shape" if n == 1 else "shapes"
    text = (
        f"This synthetic picture shows {_NUMBER_WORDS[n]} simple flat {noun} "
        f"placed on a plain gray background with nothing else in view."
    )
    if verbosity > 0:
        text = text[:-1] + ", and every shape is drawn with a single solid color and sharp edges."
    return text


def _object_sentence(obj_color: str, obj_shape: str, bbox, image_size: int, verbosity: int) -> str:
    side = max(bbox[2] - bbox[0], bbox[3] - bbox[1]) / image_size
    size_word = "small" if side < 0.3 else "large"
    where = location_phrase(bbox, image_size)
    text = f"There is a {size_word} {obj_color} {obj_shape} near the {where} of the picture."
    for _ in range(verbosity):
        text = text[:-1] + f", and the {obj_color} {obj_shape} stands out clearly against the gray."
    return text


def split_sentences(caption: str) -> list[tuple[str, int, int]]:
    """Split on '.', '!' or '?' followed by whitespace or end of text.

    Returns (sentence, start, end) with `end` exclusive. Runs of terminators
    ("?!") stay with their sentence; whitespace between sentences is dropped.
    """
    if not caption:
        raise ValueError("caption must be non-empty")
    spans: list[tuple[str, int, int]] = []
    n = len(caption)
    i = 0
    while i < n:
        while i < n and caption[i].isspace():
            i += 1
        if i >= n:
            break
        start = i
        end = None
        while i < n:
            if caption[i] in _TERMINATORS:
                j = i
                while j + 1 < n and caption[j + 1] in _TERMINATORS:
                    j += 1
                if j + 1 == n or caption[j + 1].isspace():
                    end = j + 1
                    i = j + 1
                    break
                i = j + 1
            else:
                i += 1
        if end is None:
            end = len(caption[start:].rstrip()) + start
        spans.append((caption[start:end], start, end))
    if not spans:
        # whitespace-only caption: a single (empty-content) span
        spans.append((caption, 0, n))
    return spans


def generate_scene(spec: SceneSpec, record_id: str | None = None) -> SceneRecord:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    boxes = _place_boxes(rng, spec)
    colors = [spec.color_vocab[i] for i in rng.choice(len(spec.color_vocab), spec.n_objects, replace=False)]
    shapes = [spec.shape_vocab[i] for i in rng.integers(0, len(spec.shape_vocab), spec.n_objects)]

    canvas = np.empty((spec.image_size, spec.image_size, 3), dtype=np.uint8)
    canvas[...] = BACKGROUND
    parts = [_summary_sentence(spec.n_objects, spec.verbosity)]
    objects = []
    for k, (box, color, shape) in enumerate(zip(boxes, colors, shapes)):
        x1, y1, x2, y2 = box
        mask = shape_mask(shape, x2 - x1, y2 - y1)
        canvas[y1:y2, x1:x2][mask] = PALETTE[color]
        parts.append(_object_sentence(color, shape, box, spec.image_size, spec.verbosity))
        objects.append(SceneObject(shape=shape, color=color, bbox=box, sentence_index=k + 1))

    caption = " ".join(parts)
    sentences = [Sentence(t, s, e) for t, s, e in split_sentences(caption)]
    assert len(sentences) == len(parts)
    return SceneRecord(
        id=record_id if record_id is not None else f"scene-{spec.seed:x}",
        image=canvas.astype(np.float32) / 255.0,
        caption=caption,
        objects=objects,
        sentences=sentences,
        seed=spec.seed,
    )


def generate_dataset(
    n: int,
    seed: int,
    n_objects: int = 4,
    image_size: int = 64,
    verbosity: int = 0,
    **spec_kwargs,
) -> list[SceneRecord]:
    records = []
    for i in range(n):
        spec = SceneSpec(
            image_size=image_size,
            n_objects=n_objects,
            seed=derive_seed(seed, i),
            verbosity=verbosity,
            **spec_kwargs,
        )
        records.append(generate_scene(spec, record_id=f"{i:06d}"))
    return records


# --- manifest I/O -----------------------------------------------------------


def record_to_row(rec: SceneRecord, image_path: str) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "id": rec.id,
        "seed": rec.seed,
        "image_path": image_path,
        "caption": rec.caption,
        "sentences": [{"text": s.text, "start": s.start, "end": s.end} for s in rec.sentences],
        "objects": [
            {"shape": o.shape, "color": o.color, "bbox": list(o.bbox), "sentence_index": o.sentence_index}
            for o in rec.objects
        ],
        **rec.extra,
    }


def row_to_record(row: dict, root: Path, expected_version: str = MANIFEST_VERSION) -> SceneRecord:
    version = row.get("version")
    if version != expected_version:
        raise VersionError(f"unsupported manifest version {version!r} (expected {expected_version!r})")
    try:
        img_file = root / row["image_path"]
        with Image.open(img_file) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        known = {"version", "id", "seed", "image_path", "caption", "sentences", "objects"}
        return SceneRecord(
            id=str(row["id"]),
            image=pixels.astype(np.float32) / 255.0,
            caption=row["caption"],
            objects=[
                SceneObject(o["shape"], o["color"], tuple(int(v) for v in o["bbox"]), int(o["sentence_index"]))
                for o in row["objects"]
            ],
            sentences=[Sentence(s["text"], int(s["start"]), int(s["end"])) for s in row["sentences"]],
            seed=int(row.get("seed", 0)),
            extra={k: v for k, v in row.items() if k not in known},
        )
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ManifestError(f"malformed manifest row {row.get('id')!r}: {exc}") from exc


def _manifest_file(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() or p.suffix != ".jsonl" else p


def write_manifest(records: Iterable[SceneRecord], path: str | os.PathLike, rows_extra: Sequence[dict] | None = None) -> Path:
    """Write records as JSON lines plus one PNG per image under ``images/``.

    `path` is either a directory (the manifest goes to ``manifest.jsonl``) or
    an explicit ``.jsonl`` file.
    """
    p = Path(path)
    if p.suffix != ".jsonl":
        p.mkdir(parents=True, exist_ok=True)
        p = p / MANIFEST_NAME
    root = p.parent
    (root / "images").mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for k, rec in enumerate(records):
            rel = f"images/{rec.id}.png"
            pixels = np.round(rec.image * 255.0).astype(np.uint8)
            Image.fromarray(pixels, mode="RGB").save(root / rel, format="PNG")
            row = record_to_row(rec, rel)
            if rows_extra is not None:
                row.update(rows_extra[k])
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    os.replace(tmp, p)
    return p


def read_rows(path: str | os.PathLike) -> tuple[list[dict], Path]:
    p = _manifest_file(path)
    if not p.exists():
        raise ManifestError(f"manifest not found: {p}")
    rows = []
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{p}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows, p.parent


def read_manifest(path: str | os.PathLike, expected_version: str = MANIFEST_VERSION) -> list[SceneRecord]:
    rows, root = read_rows(path)
    return [row_to_record(r, root, expected_version) for r in rows]
