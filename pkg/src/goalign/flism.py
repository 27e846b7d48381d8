"""Local image-region / sentence matching.

Regions are the supplied detections plus four quadrants and a center box.
Every sentence is matched to its most similar region by cosine similarity of
class embeddings, then the best (sentence, region) pair(s) are kept.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import PALETTE, SceneRecord, read_rows
from .errors import DataError, ManifestError, NumericError, VersionError

FLISM_VERSION = "flism/1"
FLISM_NAME = "flism.jsonl"
STRATEGIES = ("top1", "top3_uniform", "top3_weighted")
_ALIASES = {"top3u": "top3_uniform", "top3w": "top3_weighted"}


def canonical_strategy(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise ValueError(f"unknown matching strategy {name!r}; choose from {STRATEGIES}")
    return name


@dataclass(frozen=True)
class RegionCandidate:
    bbox: tuple[int, int, int, int]
    source: str  # detected | quadrant | center


@dataclass
class MatchResult:
    sim_matrix: np.ndarray  # (M sentences, N regions)
    per_text_best: list[tuple[int, float]]
    selected: list[tuple[int, int, float, float]]  # (sentence, region, score, weight)


@dataclass(frozen=True)
class LocalPair:
    bbox: tuple[int, int, int, int]
    sentence_index: int
    span: tuple[int, int]
    score: float
    weight: float
    source: str = "detected"

    def to_json(self) -> dict:
        return {
            "bbox": list(self.bbox),
            "sentence_index": self.sentence_index,
            "start": self.span[0],
            "end": self.span[1],
            "score": self.score,
            "weight": self.weight,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "LocalPair":
        return cls(
            bbox=tuple(int(v) for v in d["bbox"]),
            sentence_index=int(d["sentence_index"]),
            span=(int(d["start"]), int(d["end"])),
            score=float(d["score"]),
            weight=float(d["weight"]),
            source=d.get("source", "detected"),
        )


# --- regions -------------------------------------------------------------------------


def _size(image_size) -> tuple[int, int]:
    if isinstance(image_size, int):
        return image_size, image_size
    w, h = image_size
    return int(w), int(h)


def propose_regions(image_size, detections: Iterable[Sequence[float]] = (), use_partitions: bool = True) -> list[RegionCandidate]:
    """Detections (clipped to the image) followed by TL, TR, BL, BR quadrants and the center box.

    Exact duplicates are dropped, keeping the first occurrence.
    """
    W, H = _size(image_size)
    out: list[RegionCandidate] = []
    seen: set[tuple[int, int, int, int]] = set()

    def add(box, source):
        x1, y1, x2, y2 = (int(round(v)) for v in box)
        x1, x2 = max(0, min(x1, W)), max(0, min(x2, W))
        y1, y2 = max(0, min(y1, H)), max(0, min(y2, H))
        if x2 <= x1 or y2 <= y1:
            return
        key = (x1, y1, x2, y2)
        if key not in seen:
            seen.add(key)
            out.append(RegionCandidate(key, source))

    for box in detections:
        add(box, "detected")
    if use_partitions:
        hw, hh = W // 2, H // 2
        for box in ((0, 0, hw, hh), (hw, 0, W, hh), (0, hh, hw, H), (hw, hh, W, H)):
            add(box, "quadrant")
        add((W // 4, H // 4, (3 * W) // 4, (3 * H) // 4), "center")
    return out


def crop(image: np.ndarray, bbox: Sequence[int], out_size: int | None = None) -> np.ndarray:
    """Pixel-exact crop, then bilinear resize to ``out_size`` x ``out_size`` if given."""
    H, W = image.shape[:2]
    x1, y1, x2, y2 = (int(v) for v in bbox)
    if not (0 <= x1 < x2 <= W and 0 <= y1 < y2 <= H):
        raise DataError(f"bbox {tuple(bbox)} outside a {W}x{H} image or empty")
    if x2 - x1 < 2 or y2 - y1 < 2:
        raise DataError(f"bbox {tuple(bbox)} is degenerate (min side 2 px)")
    sub = np.ascontiguousarray(image[y1:y2, x1:x2])
    if out_size is None or sub.shape[:2] == (out_size, out_size):
        return sub
    t = torch.from_numpy(sub).permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).contiguous().numpy()


# --- embedders -------------------------------------------------------------------------


class Embedder(Protocol):
    def embed_regions(self, crops: Sequence[np.ndarray]) -> np.ndarray: ...

    def embed_sentences(self, sentences: Sequence[str]) -> np.ndarray: ...


class PaletteEmbedder:
    """Planted embedding: color histograms for crops, color-word indicators for sentences.

    Stands in for a pre-trained encoder during preprocessing. The last
    dimension flags "background only" crops, which no sentence uses, so
    empty regions score zero against every sentence.
    """

    def __init__(self, palette: Mapping[str, tuple[int, int, int]] = PALETTE, tol: float = 0.03):
        self.names = list(palette)
        self.colors = np.array([palette[n] for n in self.names], dtype=np.float64) / 255.0
        self.tol = tol

    @property
    def dim(self) -> int:
        return len(self.names) + 1

    def embed_regions(self, crops):
        out = np.zeros((len(crops), self.dim))
        for i, img in enumerate(crops):
            px = np.asarray(img, dtype=np.float64).reshape(-1, 3)
            dist = np.abs(px[:, None, :] - self.colors[None]).max(axis=-1)
            hit = dist <= self.tol
            counts = hit.sum(axis=0).astype(np.float64)
            if counts.sum() == 0:
                out[i, -1] = 1.0
            else:
                out[i, :-1] = counts / counts.sum()
        return out

    def embed_sentences(self, sentences):
        out = np.zeros((len(sentences), self.dim))
        for i, s in enumerate(sentences):
            words = set(s.lower().replace(".", " ").replace(",", " ").split())
            hits = [k for k, n in enumerate(self.names) if n in words]
            if hits:
                out[i, hits] = 1.0
            else:
                out[i, :-1] = 1.0
        return out


class ModelEmbedder:
    """Class-token embeddings from a trained dual encoder."""

    def __init__(self, model, tokenizer):
        self.model = model
        self.tokenizer = tokenizer

    @torch.no_grad()
    def embed_regions(self, crops):
        from .encoders import encode_image

        return encode_image(np.stack(crops), self.model).cls.double().numpy()

    @torch.no_grad()
    def embed_sentences(self, sentences):
        from .encoders import encode_text

        toks = [self.tokenizer.encode(s) for s in sentences]
        return encode_text(toks, self.model).cls.double().numpy()


# --- matching ----------------------------------------------------------------------------


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise NumericError(f"zero-norm {what} embedding")
    return x / norms


def _rank(per_text_best: Sequence[tuple[int, float]], strategy: str) -> list[tuple[int, int, float, float]]:
    strategy = canonical_strategy(strategy)
    # Stable sort: equal scores keep the lower sentence index first.
    order = sorted(range(len(per_text_best)), key=lambda i: -per_text_best[i][1])
    if strategy == "top1":
        i = order[0]
        return [(i, per_text_best[i][0], per_text_best[i][1], 1.0)]
    chosen = order[:3]
    if strategy == "top3_uniform":
        w = [1.0 / len(chosen)] * len(chosen)
    else:
        shifted = [per_text_best[i][1] + 1.0 for i in chosen]
        total = sum(shifted)
        w = [s / total for s in shifted] if total > 0 else [1.0 / len(chosen)] * len(chosen)
    return [(i, per_text_best[i][0], per_text_best[i][1], wi) for i, wi in zip(chosen, w)]


def match_local_pairs(text_cls, region_cls, strategy: str = "top1") -> MatchResult:
    t = _unit_rows(text_cls, "sentence")
    r = _unit_rows(region_cls, "region")
    if len(t) < 1 or len(r) < 1:
        raise ValueError("need at least one sentence and one region")
    sim = np.clip(t @ r.T, -1.0, 1.0)
    best = np.argmax(sim, axis=1)  # first maximum = lowest region index
    per_text_best = [(int(j), float(sim[i, j])) for i, j in enumerate(best)]
    return MatchResult(sim_matrix=sim, per_text_best=per_text_best, selected=_rank(per_text_best, strategy))


def select_pairs(
    match: MatchResult,
    strategy: str,
    regions: Sequence[RegionCandidate],
    spans: Sequence[tuple[int, int]],
) -> list[LocalPair]:
    return [
        LocalPair(regions[j].bbox, i, tuple(spans[i]), score, weight, regions[j].source)
        for i, j, score, weight in _rank(match.per_text_best, strategy)
    ]


def run_flism(
    record: SceneRecord,
    embedder: Embedder,
    strategy: str = "top1",
    use_partitions: bool = True,
    detections: Sequence[Sequence[int]] | None = None,
    input_size: int | None = None,
) -> tuple[list[LocalPair], MatchResult, list[RegionCandidate]]:
    """Full matching for one record. Detections default to the record's object boxes."""
    if detections is None:
        detections = [o.bbox for o in record.objects]
    size = record.image_size
    regions = [r for r in propose_regions(size, detections, use_partitions) if min(r.bbox[2] - r.bbox[0], r.bbox[3] - r.bbox[1]) >= 2]
    if not regions:
        raise DataError(f"record {record.id}: no usable regions")
    crops = [crop(record.image, r.bbox, input_size or size) for r in regions]
    sentences = [s.text for s in record.sentences]
    match = match_local_pairs(embedder.embed_sentences(sentences), embedder.embed_regions(crops), strategy)
    spans = [(s.start, s.end) for s in record.sentences]
    return select_pairs(match, strategy, regions, spans), match, regions


# --- files ---------------------------------------------------------------------------------


def read_detections(path: str | os.PathLike) -> dict[str, list[list[int]]]:
    p = Path(path)
    if not p.exists():
        raise ManifestError(f"detections file not found: {p}")
    out: dict[str, list[list[int]]] = {}
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                boxes = [[int(round(v)) for v in b] for b in row["boxes"]]
                if any(len(b) != 4 for b in boxes):
                    raise ValueError("boxes must have 4 coordinates")
                out[str(row["record_id"])] = boxes
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{p}:{lineno}: bad detections row ({exc})") from exc
    return out


def write_detections(path: str | os.PathLike, detections: Mapping[str, Sequence[Sequence[int]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, boxes in detections.items():
            fh.write(json.dumps({"record_id": rid, "boxes": [list(map(int, b)) for b in boxes]}) + "\n")


def flism_dataset(
    data_dir: str | os.PathLike,
    embedder: Embedder | None = None,
    strategy: str = "top1",
    use_partitions: bool = True,
    detections: Mapping[str, Sequence[Sequence[int]]] | None = None,
    input_size: int | None = None,
    out_path: str | os.PathLike | None = None,
) -> Path:
    """Annotate every manifest row with its selected local pairs and write ``flism.jsonl``."""
    from .datagen import row_to_record

    embedder = embedder or PaletteEmbedder()
    strategy = canonical_strategy(strategy)
    rows, root = read_rows(data_dir)
    out_path = Path(out_path) if out_path else root / FLISM_NAME
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            rec = row_to_record(row, root)
            boxes = None
            if detections is not None:
                boxes = detections.get(rec.id, [])
            pairs, _, _ = run_flism(rec, embedder, strategy, use_partitions, boxes, input_size)
            out = dict(row)
            out["version"] = FLISM_VERSION
            out["strategy"] = strategy
            out["local_pairs"] = [p.to_json() for p in pairs]
            fh.write(json.dumps(out, sort_keys=True) + "\n")
    os.replace(tmp, out_path)
    return out_path


def read_flism(path: str | os.PathLike) -> list[SceneRecord]:
    """Read a ``flism/1`` manifest; each record's ``extra['local_pairs']`` holds LocalPairs."""
    from .datagen import row_to_record

    p = Path(path)
    if p.is_dir():
        p = p / FLISM_NAME
    rows, root = read_rows(p)
    records = []
    for row in rows:
        if row.get("version") != FLISM_VERSION:
            raise VersionError(f"expected {FLISM_VERSION!r} rows in {p}, got {row.get('version')!r}")
        rec = row_to_record(row, root, expected_version=FLISM_VERSION)
        try:
            rec.extra["local_pairs"] = [LocalPair.from_json(d) for d in row["local_pairs"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"record {rec.id}: bad local_pairs ({exc})") from exc
        records.append(rec)
    return records
