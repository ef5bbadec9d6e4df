import json

import pytest

from tactalign import cli
from tactalign.data import load_manifest
from tactalign.synthetic import SyntheticSpec, make_synthetic, write_vlm_fixtures


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = SyntheticSpec(n_classes=3, hct_trajectories=4, contact_frames=4, lead_frames=1, ssvtp_pairs=4, test_fraction=0.25, hct_labeled=False)
    manifest = make_synthetic(root / "data", spec)
    write_vlm_fixtures(root / "data")
    return manifest


def run(argv, capsys):
    code = cli.dispatch([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_stats(dataset, capsys):
    code, out, _ = run(["stats", "--manifest", dataset], capsys)
    assert code == 0
    assert "unique adjectives" in out and "pairs: 28" in out
    code, out, _ = run(["stats", "--manifest", dataset, "--json"], capsys)
    assert json.loads(out)["pairs"]["total"] == 28


def test_dry_run(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[train]\ngamma = 0.0\ntoy = true\n\n[providers]\ndim = 64\n')
    code, out, _ = run(["train", "--config", cfg, "--dry-run"], capsys)
    assert code == 0 and "config ok" in out
    assert json.loads(out[: out.rindex("}") + 1])["train"]["gamma"] == 0.0


def test_epochs_override_scales_warmup(capsys):
    code, out, _ = run(["train", "--dry-run", "--epochs", "4"], capsys)
    assert code == 0
    train = json.loads(out[: out.rindex("}") + 1])["train"]
    assert train["total_epochs"] == 4 and train["warmup_epochs"] == pytest.approx(0.2)
    code, out, _ = run(["train", "--dry-run", "--epochs", "4", "--set", "train.warmup_epochs=1"], capsys)
    assert json.loads(out[: out.rindex("}") + 1])["train"]["warmup_epochs"] == 1


def test_usage_errors(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 2 and "usage:" in err
    code, _, err = run([], capsys)
    assert code == 2


@pytest.mark.parametrize(
    "argv, category",
    [
        (["stats", "--manifest", "nope.jsonl"], "missing-input"),
        (["train", "--dry-run", "--set", "train.gamma=2"], "config-error"),
        (["train", "--dry-run", "--set", "bogus"], "config-error"),
        (["train", "--dry-run", "--set", "train.lr=1"], "config-error"),
        (["train", "--dry-run", "--set", "providers.text=nope"], "provider-unavailable"),
        (["train"], "missing-input"),
    ],
)
def test_error_lines(argv, category, capsys):
    code, _, err = run(argv, capsys)
    assert code == 1
    assert err.startswith(f"error[{category}]: ")
    assert err.count("\n") == 1


def test_invalid_manifest(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"trajectory_id": "a"}\n')
    code, _, err = run(["stats", "--manifest", bad], capsys)
    assert code == 1 and err.startswith("error[invalid-manifest]: line 1")


def test_unknown_config_section(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[nope]\nx = 1\n")
    code, _, err = run(["train", "--config", cfg, "--dry-run"], capsys)
    assert code == 1 and "unknown config section" in err


def test_refuses_to_overwrite_input(dataset, capsys):
    code, _, err = run(["segment", "--manifest", dataset, "--out", dataset], capsys)
    assert code == 1 and "refusing" in err


def test_segment_split_and_rerun_from_sidecar(dataset, tmp_path, capsys):
    before = dataset.read_text()
    out = tmp_path / "sub" / "seg.jsonl"
    code, text, _ = run(["segment", "--manifest", dataset, "--out", out, "--threshold", "0.6"], capsys)
    assert code == 0 and "in-contact" in text
    assert dataset.read_text() == before
    index = load_manifest(out)
    truth = json.loads((dataset.parent / "truth.json").read_text())["pairs"]
    hct = [p for p in index.pairs() if p.source == "hct"]
    assert all(p.contact == truth[p.ref]["contact"] for p in hct)
    index.trajectory("hct-0000").pairs[0].tactile_frame(index.root)  # paths rebased
    sidecar = json.loads((tmp_path / "sub" / "seg.jsonl.run.json").read_text())
    assert sidecar["command"] == "segment" and sidecar["sections"]["segment"]["threshold"] == 0.6

    again = tmp_path / "again.jsonl"
    code, _, _ = run(["segment", "--config", tmp_path / "sub" / "seg.jsonl.run.json", "--manifest", dataset, "--out", again], capsys)
    assert code == 0
    assert [p.contact for p in load_manifest(again).pairs()] == [p.contact for p in index.pairs()]

    split = tmp_path / "split.jsonl"
    code, text, _ = run(["split", "--manifest", out, "--out", split, "--test-fraction", "0.25", "--seed", "3"], capsys)
    assert code == 0
    assert any(p.split == "test" for p in load_manifest(split).pairs())


def test_pseudolabel_requires_fixtures(dataset, tmp_path, capsys):
    code, _, err = run(["pseudolabel", "--manifest", dataset, "--out", tmp_path / "x.jsonl"], capsys)
    assert code == 1 and err.startswith("error[missing-input]")


def test_segment_with_checkpoint_and_classify_errors(dataset, tmp_path, capsys):
    toy = ["--set", "train.toy=true", "--set", "train.batch_size=8", "--set", "train.warmup_epochs=0", "--set", "providers.dim=32"]
    seg = tmp_path / "seg.jsonl"
    assert run(["segment", "--manifest", dataset, "--out", seg], capsys)[0] == 0
    lab = tmp_path / "lab.jsonl"
    assert run(["pseudolabel", "--manifest", seg, "--out", lab, "--fixtures", dataset.parent / "vlm_fixtures.json"], capsys)[0] == 0
    code, text, err = run(["train", "--manifest", lab, "--out", tmp_path / "run", "--epochs", "1", *toy], capsys)
    assert code == 0, err
    ckpt = tmp_path / "run" / "last.pt"
    run_cfg = json.loads((tmp_path / "run" / "run_config.json").read_text())
    assert run_cfg["sections"]["train"]["total_epochs"] == 1

    code, _, err = run(["segment", "--manifest", dataset, "--out", tmp_path / "s2.jsonl", "--provider", f"checkpoint:{ckpt}"], capsys)
    assert code == 0, err
    code, _, err = run(["eval-classify", "--manifest", lab, "--checkpoint", ckpt, "--out", tmp_path / "c.json"], capsys)
    assert code == 1 and "--phi or --synonyms" in err
    code, _, err = run(["eval-classify", "--manifest", lab, "--checkpoint", tmp_path / "missing.pt", "--out", tmp_path / "c.json", "--phi", "0.5"], capsys)
    assert code == 1 and err.startswith("error[missing-input]")
    code, _, err = run(["eval-classify", "--manifest", lab, "--checkpoint", ckpt, "--out", tmp_path / "c.json", "--phi", "0.5", "--k", "1"], capsys)
    assert code == 0, err
    report = json.loads((tmp_path / "c.json").read_text())
    assert report["phi"]["mode"] == "fixed" and report["k"] == [1]


def test_eval_bench_with_baseline(dataset, tmp_path, capsys):
    out = tmp_path / "b.json"
    code, _, err = run(["eval-bench", "--manifest", dataset, "--out", out, "--generator", "empty"], capsys)
    assert code == 0, err
    scores = tmp_path / "b.scores.json"
    assert set(json.loads(scores.read_text()).values()) == {1}
    code, _, err = run(["eval-bench", "--manifest", dataset, "--out", tmp_path / "c.json", "--baseline", scores], capsys)
    assert code == 0, err
    report = json.loads((tmp_path / "c.json").read_text())
    assert report["aggregates"]["combined"]["mean"] == 10.0
    assert report["baseline_comparison"]["combined"]["degenerate"] is True
    code, _, err = run(["eval-bench", "--manifest", dataset, "--out", out, "--baseline", tmp_path / "zz.json"], capsys)
    assert code == 1 and err.startswith("error[missing-input]")


def test_synth_and_report(tmp_path, capsys):
    code, text, _ = run(["synth", "--out", tmp_path / "d", "--trajectories", "3", "--classes", "2"], capsys)
    assert code == 0 and (tmp_path / "d" / "vlm_fixtures.json").exists()
    code, _, err = run(["report", "--run-dir", tmp_path], capsys)
    assert code == 1 and err.startswith("error[missing-input]")
