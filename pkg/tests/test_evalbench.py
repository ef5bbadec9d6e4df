import json
import math

import numpy as np
import pytest

from helpers import pair, write_pairs
from tactalign.clients import TransportError
from tactalign.data import load_manifest
from tactalign.embed import HashTextProvider, LookupTextProvider, ProjectionImageProvider, TactileEncoder, TactileEncoderConfig
from tactalign.evalbench import (
    GENERATION_PROMPTS,
    JUDGE_TEMPLATE,
    EchoGenerator,
    EmptyGenerator,
    FixtureGenerator,
    FixtureSynonymProvider,
    OverlapJudge,
    ScriptedJudge,
    classify_index,
    compute_threshold,
    fill_judge_prompt,
    judge_score,
    paired_t_test,
    parse_judgement,
    per_pair_scores,
    run_benchmark,
    sample_generation_prompt,
    semantic_label_set,
    topk_tactile_text,
    topk_tactile_vision,
    validate_report,
)


def _cos_fixture(values):
    """Descriptor 'd' and synonyms s0.. with cos(d, s_i) = values[i]."""
    n = len(values) + 1
    table = {"d": np.eye(n)[0]}
    for i, c in enumerate(values):
        table[f"s{i}"] = c * np.eye(n)[0] + math.sqrt(1 - c * c) * np.eye(n)[i + 1]
    return LookupTextProvider(table), FixtureSynonymProvider({"d": [f"s{i}" for i in range(len(values))]})


def test_threshold_small_cases():
    text, syn = _cos_fixture([0.8])
    assert compute_threshold(["d"], syn, text, "min").value == pytest.approx(0.8, abs=1e-15)
    text, syn = _cos_fixture([0.5, 0.7, 0.9])
    spec = compute_threshold(["d"], syn, text, "percentile", 50)
    assert spec.value == pytest.approx(0.7, abs=1e-15)
    assert spec.to_dict()["universe_size"] == 4


def test_threshold_skips_failing_descriptors():
    class Flaky:
        def synonyms(self, d):
            if d == "bad":
                raise TransportError("down")
            return [] if d == "empty" else ["s0"]

    text, _ = _cos_fixture([0.6])
    spec = compute_threshold(["d", "bad", "empty"], Flaky(), text)
    assert spec.skipped == ["bad", "empty"]
    with pytest.raises(ValueError):
        compute_threshold(["bad"], Flaky(), text)
    with pytest.raises(ValueError):
        compute_threshold(["d"], Flaky(), text, "percentile")


def test_semantic_label_set():
    vecs = {"a": [1, 0, 0], "b": [0.9, 0.1, 0], "c": [0.7, 0.7, 0], "d": [0, 1, 0], "e": [0, 0, 1]}
    text = LookupTextProvider(vecs)
    cands = list(vecs)
    assert semantic_label_set("a", cands, 1.0 + 1e-9, text) == ["a"]
    assert semantic_label_set("a", cands, -1.0, text) == cands
    brute = [c for c in cands if np.dot(vecs["a"], vecs[c]) / (np.linalg.norm(vecs["a"]) * np.linalg.norm(vecs[c])) > 0.6]
    assert semantic_label_set("a", cands, 0.6, text) == brute == ["a", "b", "c"]
    assert semantic_label_set("a", [], 0.5, text) == []


def test_topk_perfect_ranking():
    vecs = {f"l{i}": np.eye(6)[i] for i in range(6)}
    labels = list(vecs)
    tactile = np.stack([vecs[l] + 0.01 for l in labels])
    assert topk_tactile_text(tactile, labels, LookupTextProvider(vecs), 0.99, 1) == 1.0
    with pytest.raises(ValueError):
        topk_tactile_text(tactile, labels, LookupTextProvider(vecs), 0.99, 7)


def test_topk_text_monte_carlo_chance():
    n, seeds = 402, 20
    accs = []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        labels = [f"w{i}" for i in range(n)]
        text = LookupTextProvider({l: rng.normal(size=64) for l in labels})
        accs.append(topk_tactile_text(rng.normal(size=(n, 64)), labels, text, 1.0, 1))
    p = 1 / n
    sigma = math.sqrt(p * (1 - p) / (n * seeds))
    assert abs(np.mean(accs) - p) < 3 * sigma


def test_topk_vision():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 8))
    assert topk_tactile_vision(x, x, 1) == 1.0
    accs = [topk_tactile_vision(np.random.default_rng(s).normal(size=(100, 128)), np.random.default_rng(1000 + s).normal(size=(100, 128)), 5) for s in range(20)]
    sigma = math.sqrt(0.05 * 0.95 / 2000)
    assert abs(np.mean(accs) - 0.05) < 3 * sigma
    with pytest.raises(ValueError):
        topk_tactile_vision(x, x, 21)


def test_ttest_cases():
    res = paired_t_test([1, 2, 3], [1, 2, 3])
    assert (res.t, res.p, res.degenerate) == (0.0, 1.0, True)
    res = paired_t_test([2, 2, 2, 2], [1, 1, 1, 1])
    assert res.degenerate and res.t == math.inf and res.p == 0.0
    with pytest.raises(ValueError):
        paired_t_test([1], [2])
    with pytest.raises(ValueError):
        paired_t_test([1, 2], [1, 2, 3])


def test_ttest_hand_case():
    # d = [1,2,0,-1,3,1,0,2,1,1]: mean 1, variance 12/9, so t = sqrt(7.5); p from 50-digit mpmath
    d = [1, 2, 0, -1, 3, 1, 0, 2, 1, 1]
    res = paired_t_test(d, [0] * 10)
    assert res.dof == 9
    assert res.t == pytest.approx(2.738612787525830567284848914, abs=1e-9)
    assert res.p == pytest.approx(0.02289949455176829519773647255, abs=1e-9)


def test_generation_prompts():
    assert len(GENERATION_PROMPTS) == 42
    a = sample_generation_prompt(np.random.default_rng(3))
    assert a == sample_generation_prompt(np.random.default_rng(3))
    rng = np.random.default_rng(0)
    assert all(sample_generation_prompt(rng) in GENERATION_PROMPTS for _ in range(100))


def test_judge_parsing():
    assert parse_judgement("7\nGood overlap.") == (7, "Good overlap.")
    assert parse_judgement("Score: 9/10\n\nclose") == (9, "close")
    assert parse_judgement("ten") is None
    assert parse_judgement("11") is None
    assert parse_judgement("") is None
    res = judge_score(ScriptedJudge(["7\nGood overlap."]), "q", "a", "c")
    assert (res.score, res.explanation, res.attempts) == (7, "Good overlap.", 1)
    judge = ScriptedJudge(["ten"])
    res = judge_score(judge, "q", "a", "c")
    assert not res.valid and judge.calls == 2
    assert judge_score(ScriptedJudge(["??", "3\nmeh"]), "q", "a", "c").score == 3


def test_fill_judge_prompt():
    filled = fill_judge_prompt("Q?", "soft", "soft, hard")
    assert filled.startswith("[User Question]: Q?\n")
    assert "{prompt}" in JUDGE_TEMPLATE and "{prompt}" not in filled
    assert "[Assistant Response]: soft" in filled and "[Correct Response]: soft, hard" in filled
    # braces in free text are left alone
    assert "{x}" in fill_judge_prompt("{x}", "a", "b")


def _bench_pairs():
    return [
        pair("s1", 0.0, source="ssvtp", contact=True, labels=["soft", "warm"], label_origin="human", split="test"),
        pair("s2", 0.0, source="ssvtp", contact=True, labels=["hard"], label_origin="human", split="test"),
        pair("h1", 0.0, contact=True, labels=["rough", "cold"], label_origin="human", split="test"),
        pair("h1", 1.0, contact=True, labels=["rough"], label_origin="human", split="test"),
    ]


def test_bench_rubric_extremes():
    pairs = _bench_pairs()
    top = run_benchmark(pairs, EchoGenerator(), OverlapJudge(), np.random.default_rng(0))
    assert top["aggregates"]["combined"] == {"n": 4, "mean": 10.0}
    low = run_benchmark(pairs, EmptyGenerator(), OverlapJudge(), np.random.default_rng(0))
    assert low["aggregates"]["combined"]["mean"] == 1.0


def test_bench_report_fixture():
    pairs = _bench_pairs()
    judge = ScriptedJudge([])
    judge.replies = ["8\na", "6\nb", "4\nc", "10\nd"]
    gen = FixtureGenerator({p.ref: "x" for p in pairs})
    baseline = {pairs[0].ref: 5, pairs[1].ref: 5, pairs[2].ref: 5, pairs[3].ref: 6}
    report = run_benchmark(pairs, gen, judge, np.random.default_rng(0), baseline=baseline)
    validate_report(report, "bench")
    agg = report["aggregates"]
    assert agg["ssvtp"] == {"n": 2, "mean": 7.0}
    assert agg["hct"] == {"n": 2, "mean": 7.0}
    assert agg["combined"] == {"n": 4, "mean": 7.0}
    cmp = report["baseline_comparison"]["combined"]
    ref = paired_t_test([8, 6, 4, 10], [5, 5, 5, 6])
    assert cmp["n"] == 4 and cmp["t"] == pytest.approx(ref.t) and cmp["p"] == pytest.approx(ref.p)
    assert report["baseline_comparison"]["ssvtp"]["dof"] == 1
    assert per_pair_scores(report) == {p.ref: s for p, s in zip(pairs, [8, 6, 4, 10])}
    assert all(r["prompt"] in GENERATION_PROMPTS for r in report["records"])


def test_bench_exclusions():
    pairs = _bench_pairs()
    gen = FixtureGenerator({pairs[0].ref: "soft", pairs[1].ref: "hard", pairs[2].ref: "rough"})
    judge = ScriptedJudge(["5\nok", "5\nok", "nope"])
    report = run_benchmark(pairs, gen, judge, np.random.default_rng(0))
    assert report["excluded"] == {"generator_failures": 1, "judge_invalid": 1}
    assert report["aggregates"]["combined"]["n"] == 2
    assert report["n_records"] == 4
    validate_report(report, "bench")


def test_bench_schema_rejects_garbage():
    import jsonschema

    with pytest.raises(jsonschema.ValidationError):
        validate_report({"n_records": 1}, "bench")


def test_classify_index(tmp_path):
    pairs = [
        pair("h1", float(i), contact=True, labels=[lab], label_origin="human", split="test")
        for i, lab in enumerate(["soft", "hard", "rough"])
    ]
    pairs.append(pair("s1", 0.0, source="ssvtp", contact=True, labels=["warm"], label_origin="human", split="test"))
    pairs.append(pair("h2", 0.0, contact=False))
    index = load_manifest(write_pairs(tmp_path, pairs))
    enc = TactileEncoder(TactileEncoderConfig.preset("tiny", toy=True, output_dim=32))
    report = classify_index(index, enc, ProjectionImageProvider(dim=32), HashTextProvider(dim=32), 0.5, [1, 2])
    report["phi"] = {"mode": "fixed", "value": 0.5}
    validate_report(report, "classify")
    assert report["n_test"] == 4
    assert report["excluded"] == {"unlabeled_or_out_of_contact": 0}
    assert report["tactile_text"]["ssvtp"] == {"1": 1.0, "2": None}  # one distinct ssvtp label
    assert set(report["tactile_text"]["combined"]) == {"1", "2"}
    assert all(len(r["top_text"]) == 2 for r in report["rows"])
    with pytest.raises(ValueError):
        classify_index(index, enc, ProjectionImageProvider(dim=32), HashTextProvider(dim=32), 0.5, [5])
