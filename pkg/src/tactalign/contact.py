"""Per-frame contact detection against an estimated out-of-contact background."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import TactileFrame, Trajectory


@dataclass(frozen=True)
class ContactConfig:
    threshold: float = 0.6
    background_window: int = 1

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [-1, 1]")
        if self.background_window < 1:
            raise ValueError("background_window must be >= 1")


@dataclass
class ContactMask:
    mask: np.ndarray
    contact_events: list[tuple[int, int]] = field(default_factory=list)
    scores: np.ndarray | None = None

    @classmethod
    def from_mask(cls, mask, scores=None) -> "ContactMask":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask, mask_to_events(mask), scores)

    @classmethod
    def from_events(cls, events: list[tuple[int, int]], length: int) -> "ContactMask":
        return cls(events_to_mask(events, length), list(events))


def mask_to_events(mask) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive (start, end) index pairs."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def events_to_mask(events, length: int) -> np.ndarray:
    mask = np.zeros(length, dtype=bool)
    for start, end in events:
        mask[start : end + 1] = True
    return mask


def estimate_background(
    trajectory: Trajectory | list[TactileFrame],
    window: int = 1,
    root: str | os.PathLike | None = None,
) -> TactileFrame:
    """Pixel-wise mean of the first and last ``window`` tactile frames.

    Accepts either a list of frames or a manifest trajectory, whose images are
    read relative to ``root``.
    """
    frames = _frames(trajectory, root)
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(frames) < 2 * window:
        raise ValueError(f"trajectory has {len(frames)} frames, needs at least {2 * window}")
    ends = frames[:window] + frames[-window:]
    image = np.mean([f.image for f in ends], axis=0)
    return TactileFrame(image, frames[0].timestamp)


def _frames(trajectory, root) -> list[TactileFrame]:
    if isinstance(trajectory, Trajectory):
        if root is None:
            raise ValueError("root is required to read frames of a manifest trajectory")
        return [p.tactile_frame(root) for p in trajectory.pairs]
    return list(trajectory)


def contact_score(frame_embedding, background_embedding) -> float:
    a = np.asarray(frame_embedding, dtype=np.float64).ravel()
    b = np.asarray(background_embedding, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class EmbeddingError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        super().__init__(f"embedding failed on frame {index}: {cause}")


def segment_trajectory(
    trajectory: Trajectory | list[TactileFrame],
    embed: Callable[[TactileFrame], np.ndarray],
    cfg: ContactConfig | None = None,
    root: str | os.PathLike | None = None,
) -> ContactMask:
    """Flag frames whose embedding is less similar to the background than ``cfg.threshold``.

    A frame is in contact iff its score is strictly below the threshold. When
    given a manifest trajectory the pairs' ``contact`` flags are updated in place.
    """
    cfg = cfg or ContactConfig()
    frames = _frames(trajectory, root)
    background = estimate_background(frames, cfg.background_window)
    try:
        bg_emb = embed(background)
    except Exception as exc:
        raise EmbeddingError(-1, exc) from exc
    scores = np.empty(len(frames))
    for i, frame in enumerate(frames):
        try:
            emb = embed(frame)
        except Exception as exc:
            raise EmbeddingError(i, exc) from exc
        scores[i] = contact_score(emb, bg_emb)
    result = ContactMask.from_mask(scores < cfg.threshold, scores)
    if isinstance(trajectory, Trajectory):
        for pair, flag in zip(trajectory.pairs, result.mask):
            pair.contact = bool(flag)
    return result
