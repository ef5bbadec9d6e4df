"""Open-vocabulary tactile classification metrics and the judged description benchmark."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, NamedTuple, Protocol, Sequence

import numpy as np
from scipy import special

from . import kernels
from .clients import ChatClient, TransportError
from .data import SamplePair
from .embed import unit
from .preprocess import apply_crop, center_square_side, crop_policy_for

log = logging.getLogger(__name__)


def _read(name: str) -> str:
    return resources.files("tactalign").joinpath(name).read_text(encoding="utf-8")


GENERATION_PROMPTS: tuple[str, ...] = tuple(_read("prompts/generation_prompts.txt").split("\n")[:-1])
JUDGE_TEMPLATE = _read("prompts/judge.txt")

TextEmbed = Callable[[str], np.ndarray]


def _embedder(text_embed) -> TextEmbed:
    return text_embed.embed_text if hasattr(text_embed, "embed_text") else text_embed


def _embed_all(texts: Sequence[str], text_embed) -> np.ndarray:
    fn = _embedder(text_embed)
    return unit(np.stack([np.asarray(fn(t), dtype=np.float64) for t in texts]))


# ---------------------------------------------------------------- synonym threshold


class SynonymProvider(Protocol):
    def synonyms(self, descriptor: str) -> list[str]: ...


class FixtureSynonymProvider:
    def __init__(self, table: dict[str, list[str]]):
        self.table = table

    def synonyms(self, descriptor: str) -> list[str]:
        if descriptor not in self.table:
            raise LookupError(f"no synonyms for {descriptor!r}")
        return list(self.table[descriptor])


@dataclass
class SynonymTable:
    entries: dict[str, list[str]] = field(default_factory=dict)
    similarities: dict[str, list[float]] = field(default_factory=dict)

    def pooled(self) -> np.ndarray:
        return np.array([s for d in self.entries for s in self.similarities[d]], dtype=np.float64)

    @property
    def universe(self) -> set[str]:
        words = set(self.entries)
        for syns in self.entries.values():
            words.update(syns)
        return words


@dataclass
class ThresholdSpec:
    mode: str
    value: float
    percentile: float | None = None
    table: SynonymTable | None = None
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("min", "percentile"):
            raise ValueError("mode must be 'min' or 'percentile'")
        if self.mode == "percentile" and self.percentile is None:
            raise ValueError("percentile mode needs a percentile")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "percentile": self.percentile,
            "value": self.value,
            "universe_size": len(self.table.universe) if self.table else None,
            "skipped": list(self.skipped),
        }


def compute_threshold(
    descriptors: Iterable[str],
    synonym_provider: SynonymProvider,
    text_embed,
    mode: str = "min",
    percentile: float | None = None,
) -> ThresholdSpec:
    """Cosine similarity cutoff from descriptor-to-synonym similarities.

    ``min`` takes the smallest pooled similarity; ``percentile`` takes that
    percentile (linear interpolation) of all descriptor-synonym pairs pooled
    together. Descriptors whose synonyms cannot be fetched are skipped and listed.
    """
    descriptors = list(descriptors)
    if not descriptors:
        raise ValueError("descriptors must be nonempty")
    embed = _embedder(text_embed)
    table = SynonymTable()
    skipped = []
    for d in descriptors:
        try:
            syns = [s for s in synonym_provider.synonyms(d) if s]
        except Exception as exc:  # provider failures are per-descriptor
            log.warning("synonym lookup failed for %r: %s", d, exc)
            skipped.append(d)
            continue
        if not syns:
            skipped.append(d)
            continue
        base = unit(embed(d))
        table.entries[d] = syns
        table.similarities[d] = [float(np.clip(base @ unit(embed(s)), -1, 1)) for s in syns]
    pooled = table.pooled()
    if pooled.size == 0:
        raise ValueError("no descriptor produced synonyms")
    if mode == "min":
        value = float(pooled.min())
    elif mode == "percentile":
        if percentile is None:
            raise ValueError("percentile mode needs a percentile")
        value = float(np.percentile(pooled, percentile))
    else:
        raise ValueError("mode must be 'min' or 'percentile'")
    return ThresholdSpec(mode, value, percentile, table, skipped)


# ---------------------------------------------------------------- classification


def semantic_label_set(query_label: str, candidate_labels: Sequence[str], phi: float, text_embed) -> list[str]:
    """Candidates whose similarity with the query exceeds ``phi``; the query itself always counts."""
    if not candidate_labels:
        return []
    q = _embed_all([query_label], text_embed)[0]
    c = _embed_all(candidate_labels, text_embed)
    sims = c @ q
    return [lab for lab, s in zip(candidate_labels, sims) if s > phi or lab == query_label]


def semantic_matrix(queries: Sequence[str], candidates: Sequence[str], phi: float, text_embed) -> np.ndarray:
    """Boolean matrix: ``out[i, j]`` iff candidate j is in the semantic set of query i."""
    q = _embed_all(queries, text_embed)
    c = _embed_all(candidates, text_embed)
    out = (q @ c.T) > phi
    qa = np.array(queries, dtype=object)
    ca = np.array(candidates, dtype=object)
    return out | (qa[:, None] == ca[None, :])


def _unique(seq: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(seq))


def topk_tactile_text(
    tactile: np.ndarray,
    labels: Sequence[str],
    text_embed,
    phi: float,
    k: int,
    candidates: Sequence[str] | None = None,
) -> float:
    """Fraction of tactile embeddings whose k best-ranked label strings hit the semantic set.

    ``labels[i]`` is the ground-truth label string of row i; candidates default
    to the distinct test labels. Ties rank the lower candidate index first.
    """
    hits = topk_tactile_text_hits(tactile, labels, text_embed, phi, k, candidates)
    return float(hits.mean())


def topk_tactile_text_hits(tactile, labels, text_embed, phi, k, candidates=None) -> np.ndarray:
    cands = _unique(labels) if candidates is None else list(candidates)
    if k < 1 or k > len(cands):
        raise ValueError(f"k={k} must lie in [1, {len(cands)}] (number of distinct labels)")
    t = unit(np.asarray(tactile, dtype=np.float64))
    sim = t @ _embed_all(cands, text_embed).T
    correct = semantic_matrix(list(labels), cands, phi, text_embed)
    return kernels.topk_hits(sim, correct, k)


def topk_tactile_vision(tactile: np.ndarray, vision: np.ndarray, k: int) -> float:
    """Retrieval accuracy: each tactile row must rank its own vision row within the top k."""
    t = unit(np.asarray(tactile, dtype=np.float64))
    v = unit(np.asarray(vision, dtype=np.float64))
    n = t.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    return float(kernels.topk_hits(t @ v.T, np.eye(n, dtype=bool), k).mean())


# ---------------------------------------------------------------- statistics


class TTestResult(NamedTuple):
    t: float
    p: float
    dof: int
    degenerate: bool = False


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b`` with n - 1 degrees of freedom.

    Zero-variance differences are flagged as degenerate: t = 0, p = 1 when the
    mean difference is zero, otherwise t = +/-inf and p = 0.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score lists must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two paired scores")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, dof, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, dof, True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * special.stdtr(dof, -abs(t)))
    return TTestResult(float(t), min(p, 1.0), dof, False)


# ---------------------------------------------------------------- judged benchmark


def sample_generation_prompt(rng: np.random.Generator) -> str:
    return GENERATION_PROMPTS[int(rng.integers(len(GENERATION_PROMPTS)))]


def fill_judge_prompt(question: str, assistant_response: str, correct_response: str) -> str:
    return (
        JUDGE_TEMPLATE.replace("{prompt}", question)
        .replace("{assistant_response}", assistant_response)
        .replace("{correct_response}", correct_response)
    )


class JudgeClient(Protocol):
    def judge(self, prompt: str) -> str: ...


@dataclass
class JudgeResult:
    score: int | None
    explanation: str
    raw: str
    attempts: int

    @property
    def valid(self) -> bool:
        return self.score is not None


def parse_judgement(text: str) -> tuple[int, str] | None:
    lines = [ln.strip() for ln in (text or "").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        return None
    m = re.fullmatch(r"(?:score\s*[:=]\s*)?(\d+)(?:\s*/\s*10)?\.?", lines[0], flags=re.I)
    if not m:
        return None
    score = int(m.group(1))
    if not 1 <= score <= 10:
        return None
    return score, "\n".join(lines[1:])


def judge_score(judge_client: JudgeClient, question: str, assistant_response: str, correct_response: str) -> JudgeResult:
    """Score a response 1-10 with one retry on an unparseable reply; invalid results carry score None."""
    prompt = fill_judge_prompt(question, assistant_response, correct_response)
    raw = ""
    for attempt in (1, 2):
        raw = judge_client.judge(prompt)
        parsed = parse_judgement(raw)
        if parsed is not None:
            return JudgeResult(parsed[0], parsed[1], raw, attempt)
    return JudgeResult(None, "", raw, 2)


def _adjective_set(text: str) -> set[str]:
    return {t.strip().strip(".").lower() for t in re.split(r"[,\n]", text or "") if t.strip().strip(".")}


class OverlapJudge:
    """Offline judge: Jaccard overlap of adjective sets mapped onto 1-10."""

    _assistant = re.compile(r"^\[Assistant Response\]: (.*)$", re.M)
    _correct = re.compile(r"^\[Correct Response\]: (.*)$", re.M)

    def judge(self, prompt: str) -> str:
        got = _adjective_set(self._assistant.search(prompt).group(1))
        want = _adjective_set(self._correct.search(prompt).group(1))
        union = got | want
        jac = len(got & want) / len(union) if union else 0.0
        score = 1 + int(round(9 * jac))
        return f"{score}\nAdjective overlap {len(got & want)}/{len(union)} (Jaccard {jac:.2f})."


class ScriptedJudge:
    """Offline judge returning canned replies in order (the last one repeats)."""

    def __init__(self, replies: Sequence[str]):
        self.replies = list(replies)
        self.calls = 0

    def judge(self, prompt: str) -> str:
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        return reply


class HttpJudge:
    def __init__(self, chat: ChatClient | None = None):
        self.chat = chat or ChatClient()

    def judge(self, prompt: str) -> str:
        return self.chat.complete(prompt)


@dataclass
class GenerationRequest:
    pair: SamplePair
    full_image: np.ndarray | None = None
    cropped_image: np.ndarray | None = None
    tactile_image: np.ndarray | None = None

    @classmethod
    def from_pair(cls, pair: SamplePair, root) -> "GenerationRequest":
        full = pair.vision_frame(root).image
        crop = apply_crop(full, crop_policy_for(pair.source, center_square_side(full)))
        return cls(pair, full, crop, pair.tactile_frame(root).image)

    @property
    def images(self) -> list[np.ndarray]:
        return [x for x in (self.full_image, self.cropped_image, self.tactile_image) if x is not None]


class Generator(Protocol):
    def generate(self, prompt: str, request: GenerationRequest) -> str: ...


class EchoGenerator:
    """Answers with the pair's own labels: an upper-bound oracle for the harness."""

    def generate(self, prompt: str, request: GenerationRequest) -> str:
        return request.pair.label_text


class EmptyGenerator:
    def generate(self, prompt: str, request: GenerationRequest) -> str:
        return ""


class FixtureGenerator:
    """Answers from ``{pair_ref: text}``; a missing or null entry raises TransportError."""

    def __init__(self, table: dict[str, str | None]):
        self.table = table

    def generate(self, prompt: str, request: GenerationRequest) -> str:
        text = self.table.get(request.pair.ref)
        if text is None:
            raise TransportError(f"no generation for {request.pair.ref}")
        return text


class HttpGenerator:
    def __init__(self, chat: ChatClient | None = None):
        self.chat = chat or ChatClient()

    def generate(self, prompt: str, request: GenerationRequest) -> str:
        return self.chat.complete(prompt, request.images)


SUBSETS = ("ssvtp", "hct", "combined")


def _in_subset(source: str, subset: str) -> bool:
    return subset == "combined" or source == subset


def run_benchmark(
    test_pairs: Sequence[SamplePair],
    generator: Generator,
    judge_client: JudgeClient,
    rng: np.random.Generator,
    root=None,
    baseline: dict[str, float] | None = None,
) -> dict:
    """Generate, judge and aggregate descriptions for every test pair.

    Returns a report with per-record rows, mean score per source subset,
    excluded-record counts and, given ``baseline`` (pair ref -> score), a
    paired t-test per subset over pairs scored by both.
    """
    records = []
    excluded = {"generator_failures": 0, "judge_invalid": 0}
    for pair in test_pairs:
        prompt = sample_generation_prompt(rng)
        request = GenerationRequest.from_pair(pair, root) if root is not None else GenerationRequest(pair)
        row = {"pair": pair.ref, "source": pair.source, "prompt": prompt, "reference_labels": list(pair.labels)}
        try:
            candidate = generator.generate(prompt, request)
        except TransportError as exc:
            excluded["generator_failures"] += 1
            records.append({**row, "candidate_text": None, "judge_score": None, "judge_explanation": str(exc), "valid": False})
            continue
        try:
            result = judge_score(judge_client, prompt, candidate, pair.label_text)
        except TransportError as exc:
            result = JudgeResult(None, str(exc), "", 0)
        if not result.valid:
            excluded["judge_invalid"] += 1
        records.append(
            {
                **row,
                "candidate_text": candidate,
                "judge_score": result.score,
                "judge_explanation": result.explanation,
                "valid": result.valid,
            }
        )

    aggregates = {}
    comparison = {}
    for subset in SUBSETS:
        rows = [r for r in records if r["valid"] and _in_subset(r["source"], subset)]
        scores = [r["judge_score"] for r in rows]
        aggregates[subset] = {"n": len(scores), "mean": float(np.mean(scores)) if scores else None}
        if baseline is not None:
            both = [r for r in rows if r["pair"] in baseline]
            entry = {"n": len(both), "t": None, "p": None, "dof": None, "degenerate": None}
            if len(both) >= 2:
                res = paired_t_test([r["judge_score"] for r in both], [baseline[r["pair"]] for r in both])
                entry.update(t=_finite_or_str(res.t), p=res.p, dof=res.dof, degenerate=res.degenerate)
            comparison[subset] = entry
    return {
        "n_records": len(records),
        "aggregates": aggregates,
        "baseline_comparison": comparison if baseline is not None else None,
        "excluded": excluded,
        "records": records,
    }


def _finite_or_str(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def per_pair_scores(report: dict) -> dict[str, float]:
    """Pair ref -> score for valid records; the format ``--baseline`` files use."""
    return {r["pair"]: r["judge_score"] for r in report["records"] if r["valid"]}


def validate_report(report: dict, kind: str) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``report`` matches the ``kind`` schema."""
    import jsonschema

    schema = json.loads(_read(f"schemas/{kind}_report.json"))
    jsonschema.validate(report, schema)


# ---------------------------------------------------------------- classification driver


def classify_index(
    index,
    encoder,
    vision_provider,
    text_provider,
    phi: float,
    ks: Sequence[int],
    train_config: dict | None = None,
    candidates: Sequence[str] | None = None,
) -> dict:
    """Top-k tactile-text and tactile-vision accuracy over the labeled in-contact test pairs.

    Tactile and vision frames go through the same preprocessing the encoder was
    trained with (``train_config``). A k that exceeds the candidate count of a
    source subset reports ``None`` for that subset; for the combined set it is
    an error.
    """
    import torch

    from .embed import to_tensor
    from .train import TrainConfig, _Data, canonical_text, validation_pairs

    cfg = TrainConfig.from_dict(train_config or {})
    data = _Data(index, cfg, encoder.cfg.input_size, vision_provider, text_provider)
    pairs = validation_pairs(index)
    test = [p for p in index.pairs() if p.split == "test"]
    excluded = {"unlabeled_or_out_of_contact": len(test) - len(pairs)}
    tt: dict = {}
    tv: dict = {}
    rows: list[dict] = []
    if pairs:
        with torch.no_grad():
            dtype = next(encoder.parameters()).dtype
            x = to_tensor(np.stack([data.tactile(p) for p in pairs])).to(dtype)
            tactile = encoder(x).double().numpy()
        vision = data.vision_embeddings(pairs, None)
        labels = [canonical_text(p, cfg) for p in pairs]
        cands = _unique(labels) if candidates is None else list(candidates)
        sims = unit(tactile) @ _embed_all(cands, text_provider).T
        top = max(ks)
        for i, p in enumerate(pairs):
            order = np.argsort(-sims[i], kind="stable")[:top]
            rows.append({"pair": p.ref, "source": p.source, "label": labels[i], "top_text": [cands[j] for j in order]})
    for subset in SUBSETS:
        idx = [i for i, p in enumerate(pairs) if _in_subset(p.source, subset)]
        if not idx:
            tt[subset] = tv[subset] = None
            continue
        sub_labels = [labels[i] for i in idx]
        sub_cands = _unique(sub_labels) if candidates is None else cands
        tt[subset], tv[subset] = {}, {}
        for k in ks:
            if k > len(sub_cands) and subset != "combined":
                tt[subset][str(k)] = None
            else:
                tt[subset][str(k)] = topk_tactile_text(tactile[idx], sub_labels, text_provider, phi, k, sub_cands)
            tv[subset][str(k)] = topk_tactile_vision(tactile[idx], vision[idx], k) if k <= len(idx) else None
    return {
        "phi": {"mode": "fixed", "value": float(phi)},
        "k": [int(k) for k in ks],
        "n_test": len(pairs),
        "tactile_text": tt,
        "tactile_vision": tv,
        "excluded": excluded,
        "rows": rows,
    }
