"""Mini-batch fine-tuning over global pairs plus their matched local pairs."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .alignment import (
    BatchOutputs,
    LocalSlot,
    LossBreakdown,
    LossWeights,
    pool_masked,
    select_patch_indices,
    select_token_indices,
    total_loss,
)
from .datagen import SceneRecord, derive_seed
from .encoders import (
    DualEncoder,
    ProjectionConfig,
    TextEncoderConfig,
    Tokenization,
    Tokenizer,
    VisionEncoderConfig,
    build_model,
    load_checkpoint,
    pad_ids,
    save_checkpoint,
)
from .errors import DataError, ManifestError, NumericError, TruncationError, VersionError
from .flism import LocalPair, canonical_strategy, crop

log = logging.getLogger(__name__)

CONFIG_VERSION = "goalign-cfg/1"
LOSS_LOG_NAME = "losses.jsonl"


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    strategy: str = "top1"
    use_partitions: bool = True
    tsl_reduction: str = "full"
    stop_grad_targets: bool = True
    patch_rule: str = "center"
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.tsl_reduction not in ("full", "diagonal"):
            raise ValueError("tsl_reduction must be 'full' or 'diagonal'")
        self.strategy = canonical_strategy(self.strategy)
        return self

    @property
    def slots(self) -> int:
        return 1 if canonical_strategy(self.strategy) == "top1" else 3

    def to_dict(self) -> dict:
        d = asdict(self)
        w = d.pop("weights")
        d["weights"] = {"global": w["global_"], "local": w["local"], "tsl": w["tsl"], "temperature": w["temperature"]}
        d["version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise VersionError(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k == "weights":
                v = dict(v)
                bad = set(v) - {"global", "local", "tsl", "temperature"}
                if bad:
                    raise ValueError(f"unknown weight keys: {sorted(bad)}")
                if "global" in v:
                    v["global_"] = v.pop("global")
                kw[k] = LossWeights(**v)
            elif k in ("vision", "text", "projection"):
                sub = {"vision": VisionEncoderConfig, "text": TextEncoderConfig, "projection": ProjectionConfig}[k]
                try:
                    kw[k] = sub(**v)
                except TypeError as exc:
                    raise ValueError(f"bad {k} config: {exc}") from exc
            else:
                kw[k] = v
        return cls(**kw)


def load_config(path: str | os.PathLike) -> TrainConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"config not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"config {p} is not valid JSON: {exc.msg}") from exc
    return TrainConfig.from_dict(data)


# --- data preparation -----------------------------------------------------------------------


@dataclass
class PreparedPair:
    crop: np.ndarray
    sentence: Tokenization
    patch_mask: np.ndarray  # (N,) bool
    token_indices: tuple[int, ...]
    weight: float


@dataclass
class Example:
    index: int
    image: np.ndarray
    caption: Tokenization
    pairs: list[PreparedPair]


def local_pairs_of(record: SceneRecord) -> list[LocalPair]:
    pairs = record.extra.get("local_pairs")
    if not pairs:
        raise DataError(f"record {record.id} has no local pairs (run flism first)")
    return [p if isinstance(p, LocalPair) else LocalPair.from_json(p) for p in pairs]


def prepare_example(
    index: int,
    record: SceneRecord,
    tokenizer: Tokenizer,
    vision: VisionEncoderConfig,
    slots: int = 1,
    patch_rule: str = "center",
) -> Example:
    """Precompute crops, tokenizations and index sets for one record.

    Raises TruncationError when a selected sentence fell past the caption's
    truncation point.
    """
    caption = tokenizer.encode(record.caption)
    prepared = []
    for lp in local_pairs_of(record)[:slots]:
        tok_idx = select_token_indices(lp.span, caption).indices
        patches = select_patch_indices(lp.bbox, vision.image_size, vision.patch_size, patch_rule)
        sentence = record.caption[lp.span[0] : lp.span[1]]
        prepared.append(
            PreparedPair(
                crop=crop(record.image, lp.bbox, vision.image_size).astype(np.float32),
                sentence=tokenizer.encode(sentence),
                patch_mask=patches.mask(),
                token_indices=tok_idx,
                weight=lp.weight,
            )
        )
    # Pad missing slots with the best pair at zero weight.
    while len(prepared) < slots:
        first = prepared[0]
        prepared.append(PreparedPair(first.crop, first.sentence, first.patch_mask, first.token_indices, 0.0))
    if record.image.shape[0] != vision.image_size:
        raise DataError(f"record {record.id}: image size {record.image.shape[0]} != encoder size {vision.image_size}")
    return Example(index=index, image=record.image.astype(np.float32), caption=caption, pairs=prepared)


def prepare_dataset(
    records: Sequence[SceneRecord],
    tokenizer: Tokenizer,
    config: TrainConfig,
) -> list[Example | None]:
    """Prepared examples in record order; unusable records become None (with a warning)."""
    out: list[Example | None] = []
    for i, rec in enumerate(records):
        try:
            out.append(prepare_example(i, rec, tokenizer, config.vision, config.slots, config.patch_rule))
        except TruncationError as exc:
            log.warning("excluding record %s: %s", rec.id, exc)
            out.append(None)
    return out


@dataclass
class Batch:
    images: torch.Tensor  # (B, H, W, C)
    ids: torch.Tensor  # (B, L)
    eos: torch.Tensor  # (B,)
    local_images: torch.Tensor  # (k, B, H, W, C)
    local_ids: torch.Tensor  # (k, B, L')
    local_eos: torch.Tensor  # (k, B)
    patch_masks: torch.Tensor  # (k, B, N)
    token_masks: torch.Tensor  # (k, B, L)
    weights: torch.Tensor  # (k, B)
    indices: list[int]

    @property
    def size(self) -> int:
        return self.images.shape[0]


def make_batch(
    examples: Sequence[Example | None],
    indices: Iterable[int],
    batch_size: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Collate examples at `indices`, skipping unusable ones.

    With `batch_size`, indices are consumed until that many usable examples
    are collected, so a skipped record is replaced by the next candidate.
    """
    chosen: list[Example] = []
    for i in indices:
        ex = examples[i]
        if ex is None:
            log.warning("skipping record %d: no usable local pair", i)
            continue
        chosen.append(ex)
        if batch_size is not None and len(chosen) == batch_size:
            break
    if not chosen:
        raise DataError("batch has no usable records")
    k = len(chosen[0].pairs)
    ids, eos = pad_ids([ex.caption for ex in chosen])
    L = ids.shape[1]
    token_masks = torch.zeros(k, len(chosen), L, dtype=dtype)
    for j in range(k):
        for b, ex in enumerate(chosen):
            token_masks[j, b, list(ex.pairs[j].token_indices)] = 1.0
    local_ids, local_eos = [], []
    for j in range(k):
        li, le = pad_ids([ex.pairs[j].sentence for ex in chosen])
        local_ids.append(li)
        local_eos.append(le)
    width = max(t.shape[1] for t in local_ids)
    local_ids = [torch.nn.functional.pad(t, (0, width - t.shape[1])) for t in local_ids]
    return Batch(
        images=torch.from_numpy(np.stack([ex.image for ex in chosen])).to(dtype),
        ids=ids,
        eos=eos,
        local_images=torch.from_numpy(np.stack([[ex.pairs[j].crop for ex in chosen] for j in range(k)])).to(dtype),
        local_ids=torch.stack(local_ids),
        local_eos=torch.stack(local_eos),
        patch_masks=torch.from_numpy(np.stack([[ex.pairs[j].patch_mask for ex in chosen] for j in range(k)])).to(dtype),
        token_masks=token_masks,
        weights=torch.tensor([[ex.pairs[j].weight for ex in chosen] for j in range(k)], dtype=dtype),
        indices=[ex.index for ex in chosen],
    )


# --- forward / loss ---------------------------------------------------------------------------


def forward_batch(model: DualEncoder, batch: Batch) -> BatchOutputs:
    """Run global and local inputs through the same two encoders."""
    k, B = batch.weights.shape
    g_img = model.encode_image(batch.images)
    g_txt = model.encode_text(batch.ids, batch.eos)
    l_img = model.encode_image(batch.local_images.reshape(k * B, *batch.local_images.shape[2:]))
    l_txt = model.encode_text(batch.local_ids.reshape(k * B, -1), batch.local_eos.reshape(-1))
    v_l = l_img.cls.reshape(k, B, -1)
    t_l = l_txt.cls.reshape(k, B, -1)
    slots = []
    for j in range(k):
        p_hat = model.vision_proj(pool_masked(g_img.tokens, batch.patch_masks[j]))
        s_hat = model.text_proj(pool_masked(g_txt.tokens, batch.token_masks[j]))
        slots.append(LocalSlot(v_l[j], t_l[j], p_hat, s_hat, batch.weights[j]))
    return BatchOutputs(v_global=g_img.cls, t_global=g_txt.cls, slots=slots)


def compute_loss(model: DualEncoder, batch: Batch, config: TrainConfig) -> LossBreakdown:
    out = forward_batch(model, batch)
    return total_loss(
        out,
        config.weights,
        model.temperature,
        tsl_reduction=config.tsl_reduction,
        stop_grad=config.stop_grad_targets,
    )


# --- state ----------------------------------------------------------------------------------------


@dataclass
class TrainState:
    model: DualEncoder
    optimizer: torch.optim.Optimizer
    tokenizer: Tokenizer
    step: int = 0
    epoch: int = 0  # completed epochs
    history: list[dict] = field(default_factory=list)


def make_optimizer(model: DualEncoder, config: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.learning_rate,
    )


def init_state(config: TrainConfig, tokenizer: Tokenizer, dtype: torch.dtype = torch.float32) -> TrainState:
    text = TextEncoderConfig(**{**asdict(config.text), "vocab_size": tokenizer.vocab_size})
    config.text = text
    if tokenizer.max_len != text.max_len:
        raise ValueError("tokenizer max_len must equal the text encoder max_len")
    model = build_model(config.vision, text, config.projection, seed=config.seed, dtype=dtype)
    with torch.no_grad():
        model.logit_scale.fill_(math.log(1.0 / config.weights.temperature))
    return TrainState(model=model, optimizer=make_optimizer(model, config), tokenizer=tokenizer)


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> LossBreakdown:
    """One AdamW update on every encoder, projection and temperature parameter."""
    model, opt = state.model, state.optimizer
    model.train()
    opt.zero_grad(set_to_none=True)
    breakdown = compute_loss(model, batch, config)
    if not torch.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss at step {state.step}: {json.dumps(breakdown.as_dict())}")
    if breakdown.total.requires_grad:
        breakdown.total.backward()
        opt.step()
    state.step += 1
    return breakdown


def _optimizer_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            arrays[f"optim/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return arrays


def _restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, val in arrays.items():
        if not name.startswith("optim/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(val))
    sd["state"] = state
    opt.load_state_dict(sd)


def save_state(path: str | os.PathLike, state: TrainState, config: TrainConfig) -> Path:
    meta = {
        "config": config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "history": state.history,
    }
    return save_checkpoint(path, state.model, state.tokenizer, meta=meta, arrays=_optimizer_arrays(state.optimizer))


def load_state(path: str | os.PathLike, config: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    ck = load_checkpoint(path)
    config = config or TrainConfig.from_dict(ck.meta["config"])
    config.text = ck.model.configs["text"]
    opt = make_optimizer(ck.model, config)
    _restore_optimizer(opt, ck.arrays)
    state = TrainState(
        model=ck.model,
        optimizer=opt,
        tokenizer=ck.tokenizer,
        step=int(ck.meta.get("step", 0)),
        epoch=int(ck.meta.get("epoch", 0)),
        history=list(ck.meta.get("history", [])),
    )
    return state, config


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp, path)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, 1_000_000 + epoch)).permutation(n)


def fit(
    records: Sequence[SceneRecord],
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    tokenizer: Tokenizer | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainState:
    """Train for ``config.epochs`` epochs of ceil(n / batch_size) steps each.

    Writes ``ckpt_epochNNN.npz`` after every epoch, ``model.npz`` at the end
    and the per-step loss log ``losses.jsonl`` when `out_dir` is given.
    """
    config.validate()
    if resume is not None:
        state, _ = load_state(resume, config)
        tokenizer = state.tokenizer
    else:
        tokenizer = tokenizer or Tokenizer.from_texts((r.caption for r in records), max_len=config.text.max_len)
        state = init_state(config, tokenizer)
    examples = prepare_dataset(records, tokenizer, config)
    usable = [i for i, ex in enumerate(examples) if ex is not None]
    if len(usable) < 2:
        raise DataError("need at least two usable records to train")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(state.epoch, config.epochs):
        order = [usable[i] for i in epoch_order(len(usable), config.seed, epoch)]
        for start in range(0, len(order), config.batch_size):
            batch = make_batch(examples, order[start : start + config.batch_size])
            lb = train_step(state, batch, config)
            row = {
                "step": state.step,
                "epoch": epoch + 1,
                **{k: v for k, v in lb.as_dict().items() if not k.startswith("lambda")},
                "lr": state.optimizer.param_groups[0]["lr"],
                "temperature": float(state.model.temperature.detach()),
            }
            state.history.append(row)
            if on_step is not None:
                on_step(row)
        state.epoch = epoch + 1
        if out is not None:
            save_state(out / f"ckpt_epoch{state.epoch:03d}.npz", state, config)
            _write_jsonl(out / LOSS_LOG_NAME, state.history)
        log.info("epoch %d done: loss %.4f", state.epoch, state.history[-1]["total"])
    if out is not None:
        save_state(out / "model.npz", state, config)
    return state


# --- gradient verification --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]  # per parameter tensor: max relative error
    tolerance: float
    checked_entries: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get)

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing


def _loss_fn(model: DualEncoder, batch: Batch, config: TrainConfig) -> torch.Tensor:
    return compute_loss(model, batch, config).total


def analytic_gradients(model: DualEncoder, batch: Batch, config: TrainConfig) -> dict[str, np.ndarray]:
    model.zero_grad(set_to_none=True)
    loss = _loss_fn(model, batch, config)
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        grads[name] = g.detach().cpu().numpy().copy()
    model.zero_grad(set_to_none=True)
    return grads


@torch.no_grad()
def numeric_gradients(
    model: DualEncoder,
    batch: Batch,
    config: TrainConfig,
    step: float = 1e-5,
    entries: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences of the total loss, one parameter entry at a time.

    `entries` optionally restricts each tensor to the listed flat indices;
    unlisted entries are reported as NaN.
    """
    grads = {}
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        g = np.full(flat.numel(), np.nan)
        idx = range(flat.numel()) if entries is None else entries[name]
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            up = _loss_fn(model, batch, config).item()
            flat[i] = orig - step
            down = _loss_fn(model, batch, config).item()
            flat[i] = orig
            g[i] = (up - down) / (2 * step)
        grads[name] = g.reshape(p.shape)
    return grads


def compare_gradients(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Per-tensor max of |a - n| / max(|a|, |n|, floor) over checked entries."""
    errors = {}
    count = 0
    for name, a in analytic.items():
        n = numeric[name]
        ok = ~np.isnan(n)
        if not ok.any():
            continue
        a_, n_ = a[ok], n[ok]
        denom = np.maximum(np.maximum(np.abs(a_), np.abs(n_)), floor)
        errors[name] = float(np.max(np.abs(a_ - n_) / denom))
        count += int(ok.sum())
    return GradCheckReport(errors=errors, tolerance=tolerance, checked_entries=count)


def grad_check(
    model: DualEncoder,
    batch: Batch,
    config: TrainConfig,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd against central differences for every parameter tensor.

    With `max_entries`, larger tensors are spot-checked on a seeded sample
    that always includes the entry with the largest analytic gradient.
    Stop-gradient on the TSL targets is switched off here: with it on, the
    autograd result is deliberately not the derivative of the loss value.
    """
    config = replace(config, stop_grad_targets=False)
    if next(model.parameters()).dtype != torch.float64 or batch.images.dtype != torch.float64:
        raise NumericError("grad_check needs a float64 model and batch")
    analytic = analytic_gradients(model, batch, config)
    entries = None
    if max_entries is not None:
        rng = np.random.default_rng(seed)
        entries = {}
        for name, a in analytic.items():
            n = a.size
            if n <= max_entries:
                entries[name] = np.arange(n)
            else:
                pick = set(rng.choice(n, max_entries - 1, replace=False).tolist())
                pick.add(int(np.argmax(np.abs(a))))
                entries[name] = np.array(sorted(pick))
    numeric = numeric_gradients(model, batch, config, step=step, entries=entries)
    return compare_gradients(analytic, numeric, tolerance)


def tiny_gradcheck_setup(seed: int = 0, batch_size: int = 3, strategy: str = "top1") -> tuple[DualEncoder, Batch, TrainConfig]:
    """A float64 two-layer model on 16 px scenes with a batch of `batch_size` records."""
    from .datagen import generate_dataset
    from .flism import PaletteEmbedder, run_flism

    records = generate_dataset(batch_size, seed=seed, n_objects=2, image_size=16, patch_size=8, min_frac=0.3, max_frac=0.45)
    for rec in records:
        rec.extra["local_pairs"] = run_flism(rec, PaletteEmbedder(), strategy)[0]
    tokenizer = Tokenizer.from_texts((r.caption for r in records), max_len=48)
    config = TrainConfig(
        seed=seed,
        strategy=strategy,
        vision=VisionEncoderConfig(image_size=16, patch_size=8, depth=2, dim=8, heads=2, mlp_ratio=2),
        text=TextEncoderConfig(max_len=48, depth=2, dim=8, heads=2, mlp_ratio=2, pe_base_len=32, pe_keep=20),
    ).validate()
    state = init_state(config, tokenizer, dtype=torch.float64)
    examples = prepare_dataset(records, tokenizer, config)
    batch = make_batch(examples, range(len(records)), dtype=torch.float64)
    return state.model, batch, config
