"""Pairwise tri-modal contrastive training of the tactile encoder."""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import kernels
from .contact import estimate_background
from .data import DatasetIndex, SamplePair
from .embed import (
    LabelTextComposer,
    TactileEncoder,
    TactileEncoderConfig,
    compose_label_text,
    save_checkpoint,
    to_tensor,
)
from .preprocess import (
    RGB_STATS,
    AugmentConfig,
    augment_train,
    normalize,
    preprocess_tactile,
    preprocess_vision,
)

log = logging.getLogger(__name__)

PAIRS = ("tv", "tl", "vl")
TAU_MIN, TAU_MAX = 1e-3, 1.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    tau: float = 0.07
    learnable_tau: bool = True
    gamma: float = 0.10
    pair_tv: bool = True
    pair_tl: bool = True
    pair_vl: bool = True
    base_lr: float = 1.5e-4
    warmup_epochs: float = 10
    total_epochs: int = 200
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 256
    seed: int = 0
    encoder_size: str = "tiny"
    toy: bool = False
    output_dim: int | None = None
    augment: bool = True
    background_subtract: bool = False
    background_window: int = 1
    shuffle_labels: bool = True
    subset_min: int = 1
    subset_max: int = 5
    prompt_template: str | None = None
    val_batch_size: int | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs]")

    @property
    def switches(self) -> dict[str, bool]:
        return {"tv": self.pair_tv, "tl": self.pair_tl, "vl": self.pair_vl}

    @property
    def trains_tactile(self) -> bool:
        return self.pair_tv or self.pair_tl

    @property
    def composer(self) -> LabelTextComposer:
        return LabelTextComposer(self.shuffle_labels, self.subset_min, self.subset_max, self.prompt_template)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------- losses


def _check_unit_rows(x: torch.Tensor, name: str, tol: float = 1e-4) -> None:
    norms = x.detach().norm(dim=1)
    if torch.any((norms - 1).abs() > tol):
        raise ValueError(f"{name} rows must be unit-norm (tolerance {tol})")


def info_nce(queries: torch.Tensor, keys: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE: mean of the query->key and key->query cross-entropies.

    Row i of ``queries`` is the positive for row i of ``keys``; every other row
    in the batch is a negative.
    """
    tau_t = torch.as_tensor(tau, dtype=queries.dtype)
    if torch.any(tau_t <= 0):
        raise ValueError("tau must be positive")
    if queries.shape != keys.shape or queries.ndim != 2:
        raise ValueError(f"shape mismatch: {tuple(queries.shape)} vs {tuple(keys.shape)}")
    if queries.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    _check_unit_rows(queries, "queries")
    _check_unit_rows(keys, "keys")
    logits = queries @ keys.T / tau_t
    targets = torch.arange(queries.shape[0])
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


@dataclass
class TriModalBatch:
    tactile_emb: torch.Tensor
    vision_emb: torch.Tensor
    text_emb: torch.Tensor
    is_background: torch.Tensor | None = None

    def __post_init__(self):
        shapes = {tuple(self.tactile_emb.shape), tuple(self.vision_emb.shape), tuple(self.text_emb.shape)}
        if len(shapes) != 1:
            raise ValueError(f"modalities disagree on (B, d): {shapes}")


def trimodal_loss(
    batch: TriModalBatch,
    switches: dict[str, bool] | TrainConfig,
    tau=0.07,
    training: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of InfoNCE over the enabled modality pairs, plus all three per-pair values.

    The vision-text term is computed from frozen embeddings with a detached
    temperature, so it never contributes a gradient.
    """
    if isinstance(switches, TrainConfig):
        switches = switches.switches
    if training and not (switches.get("tv") or switches.get("tl")):
        raise ValueError("at least one tactile pair must be enabled to train the encoder")
    tau_t = tau if isinstance(tau, torch.Tensor) else torch.tensor(float(tau), dtype=batch.tactile_emb.dtype)
    terms = {
        "tv": info_nce(batch.tactile_emb, batch.vision_emb, tau_t),
        "tl": info_nce(batch.tactile_emb, batch.text_emb, tau_t),
        "vl": info_nce(batch.vision_emb.detach(), batch.text_emb.detach(), tau_t.detach()),
    }
    enabled = [terms[k] for k in PAIRS if switches.get(k)]
    total = torch.stack(enabled).sum() if enabled else batch.tactile_emb.sum() * 0
    return total, {k: float(v.detach()) for k, v in terms.items()}


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class Sample:
    pair: SamplePair
    text: str
    background: bool


def training_pools(index: DatasetIndex) -> tuple[list[SamplePair], list[SamplePair]]:
    """Labeled in-contact and out-of-contact train pairs of non-excluded trajectories."""
    contact, background = [], []
    for traj in index.trajectories:
        if traj.excluded:
            continue
        for p in traj.pairs:
            if p.split != "train":
                continue
            if p.contact is True and p.labels:
                contact.append(p)
            elif p.contact is False:
                background.append(p)
    return contact, background


def _background_count(n_contact: int, gamma: float) -> int:
    return int(round(gamma * n_contact / (1.0 - gamma))) if gamma > 0 else 0


def sample_epoch(
    index: DatasetIndex | tuple[list[SamplePair], list[SamplePair]],
    gamma: float,
    rng: np.random.Generator,
    batch_size: int,
    composer: LabelTextComposer | None = None,
) -> list[list[Sample]]:
    """One epoch of batches in which a fraction ``gamma`` of samples is out of contact.

    Contact pairs are each used once per epoch in random order; background
    pairs are drawn without replacement (cycling only if the pool is too
    small). Background slots are spread evenly through the stream so every
    batch holds round(gamma * batch_size) of them, give or take one.
    Batches smaller than two samples are dropped.
    """
    composer = composer or LabelTextComposer()
    contact, background = training_pools(index) if isinstance(index, DatasetIndex) else index
    if not contact:
        raise ValueError("no labeled in-contact training pairs")
    n_bg = _background_count(len(contact), gamma)
    if n_bg and not background:
        raise ValueError("gamma > 0 but the index has no out-of-contact training pairs")
    c_order = rng.permutation(len(contact))
    b_order = np.concatenate(
        [rng.permutation(len(background)) for _ in range(math.ceil(n_bg / len(background)))]
    )[:n_bg] if n_bg else np.array([], dtype=int)
    total = len(contact) + n_bg
    slots = np.arange(total)
    is_bg = (slots + 1) * n_bg // total - slots * n_bg // total == 1
    ci = iter(c_order)
    bi = iter(b_order)
    stream = []
    for flag in is_bg:
        if flag:
            stream.append(Sample(background[next(bi)], compose_label_text([], composer, rng, background=True), True))
        else:
            pair = contact[next(ci)]
            stream.append(Sample(pair, compose_label_text(pair.labels, composer, rng), False))
    batches = []
    for start in range(0, total, batch_size):
        chunk = stream[start : start + batch_size]
        if len(chunk) < 2:
            continue
        batches.append([chunk[i] for i in rng.permutation(len(chunk))])
    return batches


# ---------------------------------------------------------------- schedule


def lr_at(step: float, base_lr: float, warmup_steps: float, total_steps: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_for_config(step: float, cfg: TrainConfig, steps_per_epoch: int) -> float:
    return lr_at(step, cfg.base_lr, cfg.warmup_epochs * steps_per_epoch, cfg.total_epochs * steps_per_epoch)


# ---------------------------------------------------------------- training


class MetricLog:
    """Append-only line-delimited metric log; safe to call from several threads."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")


@dataclass
class TrainResult:
    encoder: TactileEncoder
    metrics: list[dict]
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    best_val_loss: float = math.inf
    tau: float = 0.07

    def final(self, split: str) -> dict | None:
        rows = [r for r in self.metrics if r["split"] == split]
        return rows[-1] if rows else None


class _Data:
    """Preprocessed rasters and frozen embeddings, computed once per pair."""

    def __init__(self, index: DatasetIndex, cfg: TrainConfig, side: int, vision_provider, text_provider):
        self.index = index
        self.cfg = cfg
        self.side = side
        self.vision_provider = vision_provider
        self.text_provider = text_provider
        self._tactile: dict[tuple, np.ndarray] = {}
        self._vision_raw: dict[tuple, np.ndarray] = {}
        self._vision_emb: dict[tuple, np.ndarray] = {}
        self._backgrounds: dict[str, np.ndarray | None] = {}

    def _background(self, pair: SamplePair):
        tid = pair.trajectory_id
        if tid not in self._backgrounds:
            traj = self.index.trajectory(tid)
            try:
                bg = estimate_background(traj, self.cfg.background_window, self.index.root).image
            except ValueError:
                log.warning("trajectory %s too short for background subtraction; left as-is", tid)
                bg = None
            self._backgrounds[tid] = bg
        return self._backgrounds[tid]

    def tactile(self, pair: SamplePair) -> np.ndarray:
        x = self._tactile.get(pair.key)
        if x is None:
            image = pair.tactile_frame(self.index.root).image
            bg = self._background(pair) if self.cfg.background_subtract else None
            x = preprocess_tactile(image, self.side, background=bg)
            self._tactile[pair.key] = x
        return x

    def vision_raw(self, pair: SamplePair) -> np.ndarray:
        x = self._vision_raw.get(pair.key)
        if x is None:
            x = preprocess_vision(pair.vision_frame(self.index.root).image, pair.source, self.side)
            self._vision_raw[pair.key] = x
        return x

    def vision_embeddings(self, pairs: list[SamplePair], rng: np.random.Generator | None) -> np.ndarray:
        if rng is None:
            missing = [p for p in pairs if p.key not in self._vision_emb]
            if missing:
                embs = _embed_images(self.vision_provider, [normalize(self.vision_raw(p), RGB_STATS) for p in missing])
                for p, e in zip(missing, embs):
                    self._vision_emb[p.key] = e
            return np.stack([self._vision_emb[p.key] for p in pairs])
        images = [normalize(augment_train(self.vision_raw(p), rng, AugmentConfig()), RGB_STATS) for p in pairs]
        return _embed_images(self.vision_provider, images)

    def text_embeddings(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.text_provider.embed_text(t) for t in texts])


def _embed_images(provider, images: list[np.ndarray]) -> np.ndarray:
    if hasattr(provider, "embed_images"):
        return provider.embed_images(np.stack(images))
    return np.stack([provider.embed_image(x) for x in images])


def _param_groups(model: nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.ndim >= 2 and "pos" not in name and "cls_token" not in name else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def _retrieval_top1(tactile: np.ndarray, texts: list[str], text_emb: np.ndarray) -> tuple[int, int]:
    """In-batch tactile->text hits; any text string equal to the pair's own counts as correct."""
    sim = tactile @ text_emb.T
    arr = np.array(texts, dtype=object)
    correct = arr[:, None] == arr[None, :]
    hits = kernels.topk_hits(sim, correct, 1)
    return int(hits.sum()), len(texts)


def validation_pairs(index: DatasetIndex) -> list[SamplePair]:
    return [p for p in index.pairs() if p.split == "test" and p.contact is True and p.labels]


def canonical_text(pair: SamplePair, cfg: TrainConfig) -> str:
    text = pair.label_text
    return cfg.prompt_template.format(text) if cfg.prompt_template else text


def train(
    index: DatasetIndex,
    cfg: TrainConfig,
    vision_provider,
    text_provider,
    out_dir: str | os.PathLike | None = None,
    epochs: int | None = None,
    checkpoint_extra: dict | None = None,
) -> TrainResult:
    """Train a tactile encoder; ``epochs`` truncates the run without changing the schedule.

    ``checkpoint_extra`` is stored verbatim in every checkpoint (the CLI keeps
    the provider settings there so evaluation can rebuild them).
    """
    if not cfg.trains_tactile:
        raise ValueError("enable the tactile-vision or tactile-text pair to train the encoder")
    torch.manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir else None
    dim = cfg.output_dim or vision_provider.dim
    if text_provider.dim != vision_provider.dim:
        raise ValueError("vision and text providers must share a latent dimension")
    enc_cfg = TactileEncoderConfig.preset(cfg.encoder_size, toy=cfg.toy, output_dim=dim)
    encoder = TactileEncoder(enc_cfg)
    log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau)), requires_grad=cfg.learnable_tau)
    groups = _param_groups(encoder, cfg.weight_decay)
    if cfg.learnable_tau:
        groups.append({"params": [log_tau], "weight_decay": 0.0})
    optimizer = torch.optim.AdamW(groups, lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2))

    data = _Data(index, cfg, enc_cfg.input_size, vision_provider, text_provider)
    pools = training_pools(index)
    val = validation_pairs(index)
    val_bs = cfg.val_batch_size or cfg.batch_size
    val_batches = [val[i : i + val_bs] for i in range(0, len(val), val_bs)]
    val_batches = [b for b in val_batches if len(b) >= 2]

    metrics = MetricLog(out / "metrics.jsonl" if out else None)
    if out:
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    result = TrainResult(encoder, metrics.records)
    n_epochs = cfg.total_epochs if epochs is None else min(epochs, cfg.total_epochs)
    step = 0
    steps_per_epoch = None
    for epoch in range(n_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        batches = sample_epoch(pools, cfg.gamma, rng, cfg.batch_size, cfg.composer)
        if steps_per_epoch is None:
            steps_per_epoch = len(batches)
        total_steps = cfg.total_epochs * steps_per_epoch
        encoder.train()
        sums = dict.fromkeys(("total", *PAIRS), 0.0)
        hits = count = 0
        for batch in batches:
            pairs = [s.pair for s in batch]
            texts = [s.text for s in batch]
            tactile_in = to_tensor(np.stack([data.tactile(p) for p in pairs])).float()
            aug_rng = np.random.default_rng([cfg.seed, epoch, step]) if cfg.augment else None
            vision = torch.as_tensor(data.vision_embeddings(pairs, aug_rng), dtype=torch.float32)
            text = torch.as_tensor(data.text_embeddings(texts), dtype=torch.float32)
            tactile = encoder(tactile_in)
            tau = log_tau.exp().clamp(TAU_MIN, TAU_MAX)
            tb = TriModalBatch(tactile, vision, text, torch.tensor([s.background for s in batch]))
            loss, parts = trimodal_loss(tb, cfg, tau)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            lr = lr_for_config(min(step, total_steps), cfg, steps_per_epoch)
            for g in optimizer.param_groups:
                g["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            sums["total"] += float(loss.detach())
            for k in PAIRS:
                sums[k] += parts[k]
            h, n = _retrieval_top1(tactile.detach().double().numpy(), texts, text.double().numpy())
            hits += h
            count += n
        nb = max(len(batches), 1)
        tau_now = float(log_tau.detach().exp().clamp(TAU_MIN, TAU_MAX))
        metrics.append(_record(epoch, "train", {k: v / nb for k, v in sums.items()}, hits / max(count, 1), lr, tau_now))

        if val_batches:
            row = evaluate(encoder, val_batches, data, cfg, tau_now)
            metrics.append(_record(epoch, "val", row["losses"], row["retrieval_top1"], lr, tau_now))
            if out and row["losses"]["total"] < result.best_val_loss:
                result.best_checkpoint = _checkpoint(out / "best.pt", encoder, optimizer, epoch, cfg, log_tau, checkpoint_extra)
            result.best_val_loss = min(result.best_val_loss, row["losses"]["total"])
        result.tau = tau_now
    if out:
        result.last_checkpoint = _checkpoint(out / "last.pt", encoder, optimizer, n_epochs - 1, cfg, log_tau, checkpoint_extra)
    encoder.eval()
    return result


def _record(epoch, split, losses, retrieval, lr, tau) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "loss_total": losses["total"],
        "loss_tv": losses["tv"],
        "loss_tl": losses["tl"],
        "loss_vl": losses["vl"],
        "retrieval_top1": retrieval,
        "lr": lr,
        "tau": tau,
    }


def _checkpoint(path, encoder, optimizer, epoch, cfg, log_tau, extra=None) -> Path:
    return save_checkpoint(
        path,
        encoder,
        **(extra or {}),
        optimizer=optimizer.state_dict(),
        epoch=epoch,
        config=cfg.to_dict(),
        log_tau=float(log_tau.detach()),
        norm_stats="tactile_bgsub" if cfg.background_subtract else "tactile",
    )


@torch.no_grad()
def evaluate(encoder: TactileEncoder, batches: list[list[SamplePair]], data: _Data, cfg: TrainConfig, tau: float) -> dict:
    """Validation losses (float64 kernel path) and in-batch tactile->text top-1."""
    encoder.eval()
    sums = dict.fromkeys(("total", *PAIRS), 0.0)
    hits = count = 0
    for pairs in batches:
        texts = [canonical_text(p, cfg) for p in pairs]
        tactile = encoder(to_tensor(np.stack([data.tactile(p) for p in pairs])).float()).double().numpy()
        vision = data.vision_embeddings(pairs, None)
        text = data.text_embeddings(texts)
        parts = {
            "tv": kernels.info_nce_loss(tactile, vision, tau),
            "tl": kernels.info_nce_loss(tactile, text, tau),
            "vl": kernels.info_nce_loss(vision, text, tau),
        }
        for k in PAIRS:
            sums[k] += parts[k]
        sums["total"] += sum(parts[k] for k in PAIRS if cfg.switches[k])
        h, n = _retrieval_top1(tactile, texts, text)
        hits += h
        count += n
    nb = len(batches)
    return {"losses": {k: v / nb for k, v in sums.items()}, "retrieval_top1": hits / max(count, 1)}


def iter_records(path: str | os.PathLike) -> Iterator[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
