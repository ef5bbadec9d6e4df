"""Pseudo-labeling of in-contact frames through an external vision-language model.

Frames the model cannot describe are backfilled from successful frames of
the same trajectory; a trajectory with no successful frame is excluded from
training.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np

from .clients import ChatClient, RateLimiter, RetryPolicy, TransportError, with_retries
from .data import DatasetIndex, SamplePair, Trajectory, validate_label
from .preprocess import apply_crop, center_square_side, crop_policy_for

log = logging.getLogger(__name__)

MAX_ADJECTIVES = 5
MAX_WORDS_PER_TOKEN = 3
SUCCESS_ORIGINS = ("human", "pseudo")


def _read_prompt(name: str) -> str:
    return resources.files("tactalign").joinpath("prompts", name).read_text(encoding="utf-8")


LABEL_PROMPT_TEMPLATE = _read_prompt("pseudo_label.txt")


@dataclass
class LabelRequest:
    pair: SamplePair
    full_image: np.ndarray
    cropped_image: np.ndarray
    surface_type: str | None = None

    @classmethod
    def from_pair(cls, pair: SamplePair, root, surface_type: str | None = None) -> "LabelRequest":
        full = pair.vision_frame(root).image
        crop = apply_crop(full, crop_policy_for(pair.source, center_square_side(full)))
        return cls(pair, full, crop, surface_type)

    @property
    def images(self) -> list[np.ndarray]:
        # The prompt describes the full image first and the crop second.
        return [self.full_image, self.cropped_image]


@dataclass
class LabelResponse:
    raw_text: str
    adjectives: list[str]
    status: str  # ok | refused | empty | transport_error

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def build_label_prompt(req: LabelRequest) -> str:
    lines = LABEL_PROMPT_TEMPLATE.split("\n")
    if req.surface_type:
        lines[0] = f"Surface Type: {req.surface_type}"
    else:
        lines = lines[1:]
    return "\n".join(lines)


def parse_adjectives(raw_text: str | None) -> LabelResponse:
    """Comma-split, trim, lowercase, drop empties and keep at most five tokens.

    A token longer than three words means the model answered with a sentence
    (usually a refusal), so the whole response is marked refused.
    """
    raw = raw_text or ""
    tokens = [t.strip().strip("\"'").strip().rstrip(".").strip().lower() for t in raw.split(",")]
    tokens = [t for t in tokens if t]
    if not tokens:
        return LabelResponse(raw, [], "empty")
    if any(len(t.split()) > MAX_WORDS_PER_TOKEN for t in tokens):
        return LabelResponse(raw, [], "refused")
    return LabelResponse(raw, tokens[:MAX_ADJECTIVES], "ok")


class VlmClient(Protocol):
    def describe(self, prompt: str, request: LabelRequest) -> str: ...


class FakeVlmClient:
    """Offline client answering from a fixtures file.

    Responses are looked up by pair reference (``trajectory@t``), then
    trajectory id, then ``default``; a ``null`` value simulates a transport
    failure.
    """

    def __init__(self, fixtures: dict | str | os.PathLike):
        if not isinstance(fixtures, dict):
            fixtures = json.loads(Path(fixtures).read_text(encoding="utf-8"))
        self.by_pair = fixtures.get("by_pair", {})
        self.by_trajectory = fixtures.get("by_trajectory", {})
        self.default = fixtures.get("default")
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def describe(self, prompt: str, request: LabelRequest) -> str:
        pair = request.pair
        with self._lock:
            self.calls.append(pair.ref)
        if pair.ref in self.by_pair:
            text = self.by_pair[pair.ref]
        elif pair.trajectory_id in self.by_trajectory:
            text = self.by_trajectory[pair.trajectory_id]
        else:
            text = self.default
        if text is None:
            raise TransportError(f"simulated transport failure for {pair.ref}")
        return text


class HttpVlmClient:
    def __init__(self, chat: ChatClient | None = None):
        self.chat = chat or ChatClient()

    def describe(self, prompt: str, request: LabelRequest) -> str:
        return self.chat.complete(prompt, request.images)


class AuditLog:
    """Append-only JSONL archive of every raw response."""

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, prompt: str, request: LabelRequest, response: LabelResponse) -> None:
        if self.path is None:
            return
        digest = hashlib.sha256(f"{request.pair.ref}\n{prompt}".encode("utf-8")).hexdigest()
        record = {
            "request_hash": digest,
            "pair": request.pair.ref,
            "timestamp": time.time(),
            "status": response.status,
            "raw_text": response.raw_text,
        }
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")


def request_label(
    client: VlmClient,
    request: LabelRequest,
    retry: RetryPolicy | None = None,
    limiter: RateLimiter | None = None,
    audit: AuditLog | None = None,
    sleep=time.sleep,
) -> LabelResponse:
    prompt = build_label_prompt(request)
    try:
        raw = with_retries(lambda: client.describe(prompt, request), retry or RetryPolicy(), limiter, sleep)
        response = parse_adjectives(raw)
        if response.ok and any(validate_label(a) for a in response.adjectives):
            response = LabelResponse(raw, [], "refused")
    except TransportError as exc:
        log.warning("labeling %s failed after retries: %s", request.pair.ref, exc)
        response = LabelResponse(str(exc), [], "transport_error")
    if audit is not None:
        audit.write(prompt, request, response)
    return response


def needs_label(pair: SamplePair) -> bool:
    return pair.contact is True and pair.split == "train" and pair.label_origin == "none"


def label_trajectory(
    traj: Trajectory,
    client: VlmClient,
    root,
    rng: np.random.Generator,
    *,
    retry: RetryPolicy | None = None,
    limiter: RateLimiter | None = None,
    audit: AuditLog | None = None,
    word_pool: bool = False,
    surface_type: str | None = None,
    sleep=time.sleep,
) -> Trajectory:
    """Label the unlabeled in-contact training frames of ``traj`` in place.

    Failed frames copy the adjective set of a uniformly drawn successful frame
    (``word_pool=True`` instead samples words from the union of successful
    sets). Returns ``traj``.
    """
    pending = [p for p in traj.pairs if needs_label(p)]
    if not pending:
        return traj
    failed: list[SamplePair] = []
    for pair in pending:
        req = LabelRequest.from_pair(pair, root, surface_type)
        resp = request_label(client, req, retry, limiter, audit, sleep)
        if resp.ok:
            pair.labels = resp.adjectives
            pair.label_origin = "pseudo"
        else:
            failed.append(pair)

    sources = [
        p.labels
        for p in traj.pairs
        if p.contact is True and p.split == "train" and p.labels and p.label_origin in SUCCESS_ORIGINS
    ]
    if not sources:
        traj.excluded = True
        return traj
    traj.excluded = False
    pool = sorted({w for labels in sources for w in labels})
    for pair in failed:
        if word_pool:
            size = len(sources[int(rng.integers(len(sources)))])
            picks = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
            pair.labels = [pool[i] for i in sorted(picks)]
        else:
            pair.labels = list(sources[int(rng.integers(len(sources)))])
        pair.label_origin = "backfilled"
    return traj


def label_index(
    index: DatasetIndex,
    client: VlmClient,
    seed: int = 0,
    **kwargs,
) -> DatasetIndex:
    """Label every trajectory of a copy of ``index``; the input is left untouched."""
    out = index.copy()
    for i, traj in enumerate(out.trajectories):
        label_trajectory(traj, client, out.root, np.random.default_rng([seed, i]), **kwargs)
    out.invalidate()
    return out
