"""Recall@K retrieval evaluation and PCA attention maps."""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .datagen import SceneRecord
from .encoders import DualEncoder, Tokenizer, attention_pca, encode_image, encode_text

REPORT_VERSION = "goalign-report/1"
DEFAULT_KS = (1, 5, 10, 15, 25, 50)


def true_ranks(sim: np.ndarray, ground_truth: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's true item; ties go to the lower gallery index."""
    sim = np.asarray(sim, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    q = np.arange(sim.shape[0])
    true_score = sim[q, gt][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > true_score) | ((sim == true_score) & (cols < gt[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(sim: np.ndarray, ground_truth: Sequence[int], k: int) -> float:
    """Fraction of queries whose true gallery item ranks within the top k. k > G clamps to G."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, np.asarray(sim).shape[1])
    return float(np.mean(true_ranks(sim, ground_truth) < k))


@dataclass
class RetrievalReport:
    ks: list[int]
    t2i: dict[int, float]
    i2t: dict[int, float]
    n_queries: int
    model_id: str = ""
    dataset_id: str = ""
    version: str = REPORT_VERSION

    def to_json(self) -> dict:
        d = asdict(self)
        d["t2i"] = {str(k): v for k, v in self.t2i.items()}
        d["i2t"] = {str(k): v for k, v in self.i2t.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RetrievalReport":
        return cls(
            ks=[int(k) for k in d["ks"]],
            t2i={int(k): float(v) for k, v in d["t2i"].items()},
            i2t={int(k): float(v) for k, v in d["i2t"].items()},
            n_queries=int(d["n_queries"]),
            model_id=d.get("model_id", ""),
            dataset_id=d.get("dataset_id", ""),
            version=d.get("version", REPORT_VERSION),
        )

    def to_tsv(self) -> str:
        lines = ["k\tt2i\ti2t"]
        lines += [f"{k}\t{self.t2i[k]:.6f}\t{self.i2t[k]:.6f}" for k in self.ks]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


@torch.no_grad()
def embed_dataset(model: DualEncoder, tokenizer: Tokenizer, records: Sequence[SceneRecord], batch_size: int = 64):
    """L2-normalized class embeddings for all images and captions."""
    model.eval()
    imgs, txts = [], []
    for s in range(0, len(records), batch_size):
        chunk = records[s : s + batch_size]
        imgs.append(encode_image(np.stack([r.image for r in chunk]), model).cls)
        txts.append(encode_text([tokenizer.encode(r.caption) for r in chunk], model).cls)
    v = torch.cat(imgs).double()
    t = torch.cat(txts).double()
    v = v / v.norm(dim=1, keepdim=True)
    t = t / t.norm(dim=1, keepdim=True)
    return v.numpy(), t.numpy()


def evaluate(
    model: DualEncoder,
    tokenizer: Tokenizer,
    records: Sequence[SceneRecord],
    ks: Sequence[int] = DEFAULT_KS,
    model_id: str = "",
    dataset_id: str = "",
) -> RetrievalReport:
    if not records:
        raise ValueError("evaluation dataset is empty")
    v, t = embed_dataset(model, tokenizer, records)
    sim_t2i = t @ v.T  # queries are captions, gallery is images
    gt = np.arange(len(records))
    ks = [int(k) for k in ks]
    return RetrievalReport(
        ks=ks,
        t2i={k: recall_at_k(sim_t2i, gt, k) for k in ks},
        i2t={k: recall_at_k(sim_t2i.T, gt, k) for k in ks},
        n_queries=len(records),
        model_id=model_id,
        dataset_id=dataset_id,
    )


def parameter_checksum(model: torch.nn.Module) -> int:
    crc = 0
    for name, p in sorted(model.state_dict().items()):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(p.detach().cpu().numpy().tobytes(), crc)
    return crc


# --- attention heat maps ------------------------------------------------------------------


@dataclass
class HeatmapArtifact:
    grid: np.ndarray  # (rows, cols, 3) in [0, 1]
    overlay: np.ndarray  # (H, W, 3) in [0, 1]
    energies: np.ndarray  # explained-variance fraction per component
    degenerate: bool
    paths: dict[str, str] = field(default_factory=dict)


def _to_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")


@torch.no_grad()
def attention_heatmap(image: np.ndarray, model: DualEncoder, alpha: float = 0.5) -> HeatmapArtifact:
    """Top-3 principal components of the final-layer patch tokens as an RGB grid."""
    model.eval()
    out = encode_image(image, model)
    g = model.configs["vision"].grid
    image = np.asarray(image, dtype=np.float64)
    if np.ptp(image) == 0:
        # No image content: nothing to attribute.
        grid = np.zeros((g, g, 3))
        energies, degenerate = np.zeros(3), True
    else:
        pca = attention_pca(out.tokens.double().numpy(), k=3)
        grid = pca.maps.reshape(g, g, 3)
        energies, degenerate = pca.explained, pca.degenerate
    scale = image.shape[0] // g
    upsampled = np.kron(grid, np.ones((scale, scale, 1)))
    overlay = (1 - alpha) * image + alpha * upsampled
    return HeatmapArtifact(grid=grid, overlay=overlay, energies=energies, degenerate=degenerate)


def export_attention(image: np.ndarray, model: DualEncoder, out_path: str | os.PathLike, alpha: float = 0.5) -> HeatmapArtifact:
    """Write ``<stem>_grid.png`` (one pixel per patch) and ``<stem>_overlay.png``."""
    art = attention_heatmap(image, model, alpha)
    p = Path(out_path)
    p.parent.mkdir(parents=True, exist_ok=True)
    stem = p.with_suffix("")
    grid_path = Path(f"{stem}_grid.png")
    overlay_path = Path(f"{stem}_overlay.png")
    try:
        _to_png(art.grid, grid_path)
        _to_png(art.overlay, overlay_path)
    except OSError as exc:
        raise OSError(f"could not write heat map to {p.parent}: {exc}") from exc
    art.paths = {"grid": str(grid_path), "overlay": str(overlay_path)}
    return art
