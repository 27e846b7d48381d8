"""A miniature CLIP-style dual encoder.

Both towers are pre-norm transformers. The vision tower returns a class token
and one token per image patch; the text tower is causally masked and reads
its class embedding at the ``<eos>`` position. The text positional table is
built at a short base length and stretched with :func:`interpolate_positional`.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .alignment import Projection
from .errors import DataError, ManifestError, NumericError, VersionError

CHECKPOINT_VERSION = "goalign-ckpt/1"

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
_WORD = re.compile(r"[A-Za-z0-9]+")


# --- configs ----------------------------------------------------------------


@dataclass
class VisionEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    channels: int = 3
    pixel_mean: float = 0.5  # inputs are standardized before patch embedding
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be a multiple of heads")
        if not self.pixel_std > 0:
            raise ValueError("pixel_std must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    max_len: int = 128
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    pe_base_len: int = 32
    pe_keep: int = 20

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be a multiple of heads")
        if self.max_len < self.pe_base_len:
            raise ValueError("max_len must be >= pe_base_len")
        if not 0 <= self.pe_keep < self.pe_base_len:
            raise ValueError("pe_keep must be < pe_base_len")


@dataclass
class ProjectionConfig:
    hidden_layers: int = 0  # 0 = single affine map; 1 = two-layer MLP


# --- tokenizer --------------------------------------------------------------


@dataclass
class Tokenization:
    ids: list[int]
    spans: list[tuple[int, int] | None]  # source characters per id; None for <bos>/<eos>
    truncated: bool
    text_length: int

    @property
    def char_to_token(self) -> dict[int, int]:
        return {c: t for t, span in enumerate(self.spans) if span is not None for c in range(*span)}

    @property
    def eos_index(self) -> int:
        return len(self.ids) - 1

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    """Lowercased word-level tokenizer over a fixed vocabulary."""

    def __init__(self, words: Iterable[str], max_len: int = 128):
        if max_len < 3:
            raise ValueError("max_len must leave room for at least one word")
        self.max_len = max_len
        self.itos = list(SPECIALS) + sorted({w.lower() for w in words} - set(SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts: Iterable[str], max_len: int = 128) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(m.group(0).lower() for m in _WORD.finditer(t))
        return cls(words, max_len=max_len)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    def encode(self, text: str) -> Tokenization:
        words = list(_WORD.finditer(text))
        if not words:
            raise ValueError("text has no words after normalization")
        room = self.max_len - 2
        truncated = len(words) > room
        words = words[:room]
        unk = self.stoi[UNK]
        ids = [self.stoi[BOS]] + [self.stoi.get(m.group(0).lower(), unk) for m in words] + [self.stoi[EOS]]
        spans: list[tuple[int, int] | None] = [None] + [m.span() for m in words] + [None]
        return Tokenization(ids=ids, spans=spans, truncated=truncated, text_length=len(text))

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def tokenize(text: str, tokenizer: Tokenizer) -> Tokenization:
    return tokenizer.encode(text)


def pad_ids(tokenizations: Sequence[Tokenization], pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad id lists into a (B, L) tensor; also return the <eos> positions."""
    width = max(len(t) for t in tokenizations)
    ids = torch.full((len(tokenizations), width), pad_id, dtype=torch.long)
    for b, t in enumerate(tokenizations):
        ids[b, : len(t)] = torch.tensor(t.ids, dtype=torch.long)
    eos = torch.tensor([t.eos_index for t in tokenizations], dtype=torch.long)
    return ids, eos


# --- positional interpolation -------------------------------------------------


def interpolate_positional(pe, new_len: int, keep: int):
    """Stretch an (L_old, d) positional table to `new_len` rows.

    Rows below `keep` are copied unchanged. The remaining output rows sample
    input rows ``[keep, L_old)`` by linear interpolation, with the first and
    last output rows landing exactly on input rows ``keep`` and ``L_old - 1``.
    Accepts a numpy array or a torch tensor and returns the same kind.
    """
    is_numpy = isinstance(pe, np.ndarray)
    src = torch.from_numpy(pe) if is_numpy else pe
    old_len = src.shape[0]
    if keep >= old_len:
        raise ValueError(f"keep ({keep}) must be < table length ({old_len})")
    if new_len < old_len:
        raise ValueError(f"new_len ({new_len}) must be >= table length ({old_len})")

    rows = [src[:keep]]
    num = old_len - 1 - keep
    den = new_len - 1 - keep
    stretched = []
    for j in range(keep, new_len):
        if den == 0:
            stretched.append(src[keep])
            continue
        q, r = divmod((j - keep) * num, den)
        lo = keep + q
        if r == 0:
            stretched.append(src[lo])
        else:
            frac = r / den
            stretched.append((1.0 - frac) * src[lo] + frac * src[lo + 1])
    rows.append(torch.stack(stretched))
    out = torch.cat(rows, dim=0)
    return out.numpy() if is_numpy else out


# --- transformer ---------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, causal: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, D = x.shape
        q, k, v = self.qkv(x).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // self.heads)
        if causal:
            mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, causal=False):
        h, attn = self.attn(self.ln1(x), causal=causal)
        x = x + h
        x = x + self.mlp(self.ln2(x))
        return x, attn


@dataclass
class EncoderOutput:
    cls: torch.Tensor  # (B, d)
    tokens: torch.Tensor  # (B, T, d): patch tokens or sequence tokens
    attn_last: torch.Tensor  # (B, heads, T', T')
    lengths: torch.Tensor | None = None  # valid sequence length per row (text only)

    def check_finite(self) -> "EncoderOutput":
        for name in ("cls", "tokens"):
            if not torch.isfinite(getattr(self, name)).all():
                raise NumericError(f"non-finite values in encoder {name}")
        return self


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(p * p * cfg.channels, cfg.dim)
        self.cls_token = nn.Parameter(torch.zeros(cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches + 1, cfg.dim))
        self.ln_pre = nn.LayerNorm(cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(cfg.dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, N, p*p*C) in row-major patch order."""
        B, H, W, C = images.shape
        p, g = self.cfg.patch_size, self.cfg.grid
        x = images.reshape(B, g, p, g, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * C)

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        cfg = self.cfg
        if images.ndim != 4 or tuple(images.shape[1:]) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DataError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), "
                f"got {tuple(images.shape)}"
            )
        x = (images - cfg.pixel_mean) / cfg.pixel_std
        x = self.patch_embed(self.patchify(x))
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        x = self.ln_pre(x)
        attn = None
        for blk in self.blocks:
            x, attn = blk(x)
        x = self.ln_post(x)
        return EncoderOutput(cls=x[:, 0], tokens=x[:, 1:], attn_last=attn)


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        base = torch.randn(cfg.pe_base_len, cfg.dim) * 0.02
        self.pos_embed = nn.Parameter(interpolate_positional(base, cfg.max_len, cfg.pe_keep).clone())
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.dim)

    def forward(self, ids: torch.Tensor, eos_index: torch.Tensor) -> EncoderOutput:
        B, L = ids.shape
        if L > self.cfg.max_len:
            raise DataError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        x = self.token_embed(ids) + self.pos_embed[:L]
        attn = None
        for blk in self.blocks:
            x, attn = blk(x, causal=True)
        x = self.ln_final(x)
        cls = x[torch.arange(B), eos_index]
        return EncoderOutput(cls=cls, tokens=x, attn_last=attn, lengths=eos_index + 1)


class DualEncoder(nn.Module):
    """Vision tower, text tower, the two token projections and a learnable temperature."""

    def __init__(
        self,
        vision: VisionEncoderConfig,
        text: TextEncoderConfig,
        projection: ProjectionConfig | None = None,
        init_temperature: float = 0.07,
    ):
        super().__init__()
        if vision.dim != text.dim:
            raise ValueError("vision and text widths must match")
        projection = projection or ProjectionConfig()
        self.configs = {"vision": vision, "text": text, "projection": projection}
        self.vision = VisionEncoder(vision)
        self.text = TextEncoder(text)
        self.vision_proj = Projection(vision.dim, projection.hidden_layers)
        self.text_proj = Projection(text.dim, projection.hidden_layers)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / init_temperature)))
        self._init_weights()

    def _init_weights(self):
        # Linear layers keep torch's fan-in init; a small-std init collapses the
        # image class token when training from scratch.
        nn.init.normal_(self.vision.cls_token, std=0.02)
        nn.init.normal_(self.vision.pos_embed, std=0.02)
        for proj in (self.vision_proj, self.text_proj):
            proj.reset_identity()

    @property
    def temperature(self) -> torch.Tensor:
        return 1.0 / self.logit_scale.clamp(max=math.log(100.0)).exp()

    def encode_image(self, images: torch.Tensor) -> EncoderOutput:
        return self.vision(images)

    def encode_text(self, ids: torch.Tensor, eos_index: torch.Tensor) -> EncoderOutput:
        return self.text(ids, eos_index)


def build_model(
    vision: VisionEncoderConfig,
    text: TextEncoderConfig,
    projection: ProjectionConfig | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> DualEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DualEncoder(vision, text, projection)
    return model.to(dtype)


def _as_batch(images) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    single = x.ndim == 3
    return (x.unsqueeze(0) if single else x), single


def encode_image(image, model: DualEncoder) -> EncoderOutput:
    """Encode one (H, W, C) image or a (B, H, W, C) batch."""
    param = next(model.parameters())
    x, single = _as_batch(image)
    out = model.encode_image(x.to(param.dtype)).check_finite()
    if single:
        return EncoderOutput(out.cls[0], out.tokens[0], out.attn_last[0])
    return out


def encode_text(tokenization: Tokenization | Sequence[Tokenization], model: DualEncoder) -> EncoderOutput:
    """Encode one tokenization or a list of them (right-padded internally)."""
    single = isinstance(tokenization, Tokenization)
    toks = [tokenization] if single else list(tokenization)
    ids, eos = pad_ids(toks)
    out = model.encode_text(ids, eos).check_finite()
    if single:
        n = len(toks[0])
        return EncoderOutput(out.cls[0], out.tokens[0, :n], out.attn_last[0, :, :n, :n], out.lengths)
    return out


# --- PCA heat maps ----------------------------------------------------------------


@dataclass
class PCAResult:
    maps: np.ndarray  # (N, k), each column min-max scaled to [0, 1]
    explained: np.ndarray  # (k,) fraction of total variance per component
    degenerate: bool  # fewer than k non-trivial components


def attention_pca(tokens, k: int = 3) -> PCAResult:
    """Project mean-centered tokens onto their top-k principal components."""
    x = np.asarray(tokens.detach().cpu() if isinstance(tokens, torch.Tensor) else tokens, dtype=np.float64)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more tokens ({n}) than components ({k})")
    xc = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = (s.max() if s.size else 0.0) * max(n, d) * np.finfo(np.float64).eps
    rank = int((s > tol).sum()) if s.size and s.max() > 0 else 0
    maps = np.zeros((n, k))
    explained = np.zeros(k)
    total = float((s**2).sum())
    for c in range(min(k, rank)):
        comp = vt[c]
        # deterministic sign: the largest-magnitude loading is positive
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        proj = xc @ comp
        lo, hi = proj.min(), proj.max()
        maps[:, c] = (proj - lo) / (hi - lo) if hi > lo else 0.0
        explained[c] = s[c] ** 2 / total
    return PCAResult(maps=maps, explained=explained, degenerate=rank < k)


# --- checkpoints ------------------------------------------------------------------


def save_checkpoint(
    path: str | os.PathLike,
    model: DualEncoder,
    tokenizer: Tokenizer,
    meta: dict | None = None,
    arrays: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write a versioned .npz of named float arrays plus JSON metadata (atomic)."""
    path = Path(path)
    payload = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for k, v in (arrays or {}).items():
        payload[k] = np.asarray(v)
    header = {
        "format": CHECKPOINT_VERSION,
        "vision": asdict(model.configs["vision"]),
        "text": asdict(model.configs["text"]),
        "projection": asdict(model.configs["projection"]),
        "vocab": tokenizer.itos,
        "meta": meta or {},
    }
    payload["__header__"] = np.array(json.dumps(header, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    model: DualEncoder
    tokenizer: Tokenizer
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def load_checkpoint(path: str | os.PathLike, dtype: torch.dtype = torch.float32) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        header = json.loads(str(data.pop("__header__")))
    except (ValueError, KeyError, OSError) as exc:
        raise ManifestError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint format {header.get('format')!r}")
    text_cfg = TextEncoderConfig(**header["text"])
    with torch.random.fork_rng(devices=[]):
        model = DualEncoder(
            VisionEncoderConfig(**header["vision"]), text_cfg, ProjectionConfig(**header["projection"])
        )
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in data.items() if k.startswith("param/")}
    model.load_state_dict(state)
    tokenizer = Tokenizer([w for w in header["vocab"] if w not in SPECIALS], max_len=text_cfg.max_len)
    if tokenizer.itos != header["vocab"]:
        raise ManifestError("checkpoint vocabulary is not in canonical order")
    rest = {k: v for k, v in data.items() if not k.startswith("param/")}
    return Checkpoint(model.to(dtype), tokenizer, header["meta"], rest)
