"""Command-line entry point: ``tactalign <subcommand> [options]``.

Settings come from built-in defaults, then an optional ``--config`` file
(TOML or JSON, one table per command plus ``[providers]``), then
``--set section.key=value`` overrides, then dedicated flags. The merged
settings are written next to every output as ``*.run.json`` (or
``run_config.json`` inside a training directory); passing that file back via
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("tactalign")

DEFAULTS: dict[str, dict] = {
    "providers": {
        "text": "hash-stub",
        "vision": "projection-stub",
        "dim": 512,
        "text_seed": 0,
        "vision_seed": 1,
        "granularity": "token",
        "clip_model": "openai/clip-vit-base-patch32",
    },
    "segment": {"provider": "projection-stub", "threshold": 0.6, "window": 1, "dim": 512, "seed": 2},
    "split": {"test_fraction": 0.01, "seed": 0},
    "pseudolabel": {
        "client": "fake",
        "fixtures": None,
        "rate_limit": 20.0,
        "max_attempts": 5,
        "backoff": 1.0,
        "word_pool": False,
        "surface_type": None,
        "seed": 0,
        "audit_log": None,
    },
    "train": {},
    "eval": {"phi_mode": "min", "percentile": None, "phi": None, "synonyms": None, "k": [1, 5], "rank_universe": False},
    "bench": {"generator": "fake", "judge": "fake", "generator_fixtures": None, "baseline": None, "seed": 0},
}


class CliError(Exception):
    """An error reported to the user as ``error[category]: message``."""

    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


# ---------------------------------------------------------------- configuration


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-input", f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        data = json.loads(text)
        return data.get("sections", data)
    try:
        import tomllib
    except ImportError:  # Python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise CliError("config-error", f"{p}: {exc}") from None


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def merge_config(file_cfg: dict, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in file_cfg.items():
        if section not in cfg:
            raise CliError("config-error", f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise CliError("config-error", f"[{section}] must be a table")
        cfg[section].update(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in cfg:
            raise CliError("config-error", f"bad override {item!r}; expected section.key=value")
        cfg[section][name] = _parse_value(value)
    return cfg


def _flag(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg[section][key] = value


def write_run_config(path: Path, command: str, cfg: dict, argv: list[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "argv": argv, "version": __version__, "sections": cfg}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".run.json")


def _guard_output(manifest: Path, out: Path) -> None:
    if out.resolve() == manifest.resolve():
        raise CliError("config-error", "refusing to overwrite the input manifest; choose another --out")


# ---------------------------------------------------------------- providers


def build_providers(section: dict):
    from .embed import get_provider

    dim = int(section["dim"])
    if section["text"] == "clip" or section["vision"] == "clip":
        clip = get_provider("clip", model_name=section["clip_model"])
        text = clip if section["text"] == "clip" else None
        vision = clip if section["vision"] == "clip" else None
    else:
        text = vision = None
    if text is None:
        text = get_provider(section["text"], dim=dim, seed=int(section["text_seed"]), granularity=section["granularity"])
    if vision is None:
        vision = get_provider(section["vision"], dim=dim, seed=int(section["vision_seed"]))
    return vision, text


def tactile_embedder(name: str, dim: int, seed: int):
    """Embedding function for contact detection: a provider name or ``checkpoint:PATH``."""
    if name.startswith("checkpoint:"):
        import torch

        from .embed import load_checkpoint
        from .preprocess import preprocess_tactile

        encoder, _ = load_checkpoint(name.split(":", 1)[1])
        side = encoder.cfg.input_size

        def embed(frame):
            x = preprocess_tactile(frame.image, side)
            with torch.no_grad():
                out = encoder(torch.as_tensor(x).permute(2, 0, 1)[None].to(next(encoder.parameters()).dtype))
            return out[0].double().numpy()

        return embed
    from .embed import get_provider

    provider = get_provider(name, dim=dim, seed=seed)
    return lambda frame: provider.embed_image(frame.image)


# ---------------------------------------------------------------- commands


def _load_index(path):
    from .data import load_manifest

    return load_manifest(path)


def cmd_stats(args, cfg) -> int:
    from .data import vocabulary_stats

    index = _load_index(args.manifest)
    dist = vocabulary_stats(index)
    payload = {"pairs": index.counts, "trajectories": len(index.trajectories), "vocabulary": dist.to_dict()}
    if args.json:
        print(json.dumps(payload, indent=2))
        return 0
    c = index.counts
    print(f"pairs: {c['total']} (in-contact {c['in_contact']}, out-of-contact {c['out_of_contact']}, unknown {c['unknown_contact']})")
    print(f"sources: ssvtp {c['ssvtp']}, hct {c['hct']}; trajectories {len(index.trajectories)}")
    print(f"unique adjectives: {dist.unique}; labeled pairs: {dist.labeled_pairs}; mean per pair: {dist.mean_per_pair:.2f}")
    for origin, mean in dist.mean_by_origin.items():
        print(f"  mean adjectives ({origin}): {mean:.2f}")
    for word, n in dist.most_common(args.top):
        print(f"  {word}: {n}")
    return 0


def cmd_split(args, cfg) -> int:
    from .data import save_manifest, split_dataset

    _flag(cfg, "split", "test_fraction", args.test_fraction)
    _flag(cfg, "split", "seed", args.seed)
    out = Path(args.out)
    _guard_output(Path(args.manifest), out)
    index = split_dataset(_load_index(args.manifest), float(cfg["split"]["test_fraction"]), int(cfg["split"]["seed"]))
    _rebase(index, Path(args.manifest).parent, out.parent)
    save_manifest(index, out)
    write_run_config(_sidecar(out), "split", cfg, sys.argv[1:])
    n_test = sum(p.split == "test" for p in index.pairs())
    print(f"wrote {out} ({n_test} test pairs)")
    return 0


def _rebase(index, src_dir: Path, dst_dir: Path) -> None:
    """Rewrite image paths so they stay valid relative to a manifest written elsewhere."""
    import os

    if src_dir.resolve() == dst_dir.resolve():
        return
    for p in index.pairs():
        p.tactile_path = os.path.relpath(src_dir / p.tactile_path, dst_dir)
        p.vision_path = os.path.relpath(src_dir / p.vision_path, dst_dir)


def cmd_segment(args, cfg) -> int:
    from .contact import ContactConfig, segment_trajectory
    from .data import save_manifest

    sec = cfg["segment"]
    _flag(cfg, "segment", "provider", args.provider)
    _flag(cfg, "segment", "threshold", args.threshold)
    _flag(cfg, "segment", "window", args.window)
    out = Path(args.out)
    _guard_output(Path(args.manifest), out)
    index = _load_index(args.manifest).copy()
    embed = tactile_embedder(sec["provider"], int(sec["dim"]), int(sec["seed"]))
    ccfg = ContactConfig(float(sec["threshold"]), int(sec["window"]))
    skipped = 0
    for traj in index.trajectories:
        if len(traj.pairs) < 2 * ccfg.background_window:
            skipped += 1  # single-frame SSVTP pairs keep their stored flag
            continue
        segment_trajectory(traj, embed, ccfg, root=index.root)
    index.invalidate()
    _rebase(index, Path(args.manifest).parent, out.parent)
    save_manifest(index, out)
    write_run_config(_sidecar(out), "segment", cfg, sys.argv[1:])
    c = index.counts
    print(f"wrote {out}: {c['in_contact']} in-contact, {c['out_of_contact']} out-of-contact, {skipped} short trajectories left as-is")
    return 0


def cmd_pseudolabel(args, cfg) -> int:
    from .clients import RateLimiter, RetryPolicy
    from .data import save_manifest
    from .pseudolabel import AuditLog, FakeVlmClient, HttpVlmClient, label_index

    sec = cfg["pseudolabel"]
    _flag(cfg, "pseudolabel", "client", args.client)
    _flag(cfg, "pseudolabel", "fixtures", args.fixtures)
    _flag(cfg, "pseudolabel", "seed", args.seed)
    _flag(cfg, "pseudolabel", "audit_log", args.audit_log)
    if args.word_pool:
        sec["word_pool"] = True
    out = Path(args.out)
    _guard_output(Path(args.manifest), out)
    if sec["client"] == "fake":
        if not sec["fixtures"]:
            raise CliError("missing-input", "--fixtures is required with the fake client")
        if not Path(sec["fixtures"]).is_file():
            raise CliError("missing-input", f"fixtures not found: {sec['fixtures']}")
        client, limiter = FakeVlmClient(sec["fixtures"]), None
    elif sec["client"] == "http":
        client, limiter = HttpVlmClient(), RateLimiter(float(sec["rate_limit"]))
    else:
        raise CliError("config-error", f"unknown client {sec['client']!r}")
    audit_path = Path(sec["audit_log"]) if sec["audit_log"] else out.with_name(out.name + ".audit.jsonl")
    index = label_index(
        _load_index(args.manifest),
        client,
        seed=int(sec["seed"]),
        retry=RetryPolicy(int(sec["max_attempts"]), float(sec["backoff"])),
        limiter=limiter,
        audit=AuditLog(audit_path),
        word_pool=bool(sec["word_pool"]),
        surface_type=sec["surface_type"],
    )
    _rebase(index, Path(args.manifest).parent, out.parent)
    save_manifest(index, out)
    write_run_config(_sidecar(out), "pseudolabel", cfg, sys.argv[1:])
    origins = {}
    for p in index.pairs():
        origins[p.label_origin] = origins.get(p.label_origin, 0) + 1
    excluded = sum(t.excluded for t in index.trajectories)
    print(f"wrote {out}: label origins {origins}; {excluded} trajectories excluded; audit log {audit_path}")
    return 0


def _train_config(cfg: dict):
    from .train import TrainConfig

    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise CliError("config-error", f"[train]: {exc}") from None


def cmd_train(args, cfg) -> int:
    from .train import train

    if args.epochs is not None:
        from .train import TrainConfig

        total = cfg["train"].get("total_epochs", TrainConfig.total_epochs)
        if "warmup_epochs" not in cfg["train"] and total:
            # keep the schedule shape: warmup stays the same fraction of the run
            cfg["train"]["warmup_epochs"] = TrainConfig.warmup_epochs * args.epochs / total
        cfg["train"]["total_epochs"] = args.epochs
    _flag(cfg, "train", "seed", args.seed)
    tcfg = _train_config(cfg)
    if args.dry_run:
        try:
            build_providers(cfg["providers"])
        except Exception as exc:
            raise CliError("provider-unavailable", str(exc)) from None
        print(json.dumps({"train": tcfg.to_dict(), "providers": cfg["providers"]}, indent=2))
        print("config ok (dry run)")
        return 0
    if not args.manifest or not args.out:
        raise CliError("missing-input", "train needs --manifest and --out (or --dry-run)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg["train"] = tcfg.to_dict()
    write_run_config(out / "run_config.json", "train", cfg, sys.argv[1:])
    index = _load_index(args.manifest)
    vision, text = build_providers(cfg["providers"])
    result = train(index, tcfg, vision, text, out_dir=out, checkpoint_extra={"providers": cfg["providers"]})
    final = result.final("val") or result.final("train")
    print(f"trained {tcfg.total_epochs} epochs; last {final['split']} loss {final['loss_total']:.4f}, "
          f"tactile->text top-1 {final['retrieval_top1']:.3f}; checkpoints in {out}")
    return 0


def cmd_eval_classify(args, cfg) -> int:
    from .embed import load_checkpoint
    from .evalbench import FixtureSynonymProvider, ThresholdSpec, classify_index, compute_threshold, validate_report

    sec = cfg["eval"]
    _flag(cfg, "eval", "phi_mode", args.phi_mode)
    _flag(cfg, "eval", "percentile", args.percentile)
    _flag(cfg, "eval", "phi", args.phi)
    _flag(cfg, "eval", "synonyms", args.synonyms)
    if args.k:
        sec["k"] = [int(x) for x in args.k.split(",")]
    if args.rank_universe:
        sec["rank_universe"] = True
    if not Path(args.checkpoint).is_file():
        raise CliError("missing-input", f"checkpoint not found: {args.checkpoint}")
    encoder, blob = load_checkpoint(args.checkpoint)
    providers = blob.get("providers") or cfg["providers"]
    vision, text = build_providers(providers)
    index = _load_index(args.manifest)
    train_cfg = blob.get("config", {})

    if sec["phi"] is not None:
        phi = ThresholdSpec("min", float(sec["phi"]))
        phi_info = {"mode": "fixed", "percentile": None, "value": phi.value, "universe_size": None, "skipped": []}
    elif sec["synonyms"]:
        table = json.loads(Path(sec["synonyms"]).read_text(encoding="utf-8"))
        phi = compute_threshold(list(table), FixtureSynonymProvider(table), text, sec["phi_mode"], sec["percentile"])
        phi_info = phi.to_dict()
    else:
        raise CliError("config-error", "eval-classify needs --phi or --synonyms")
    universe = sorted(phi.table.universe) if (sec["rank_universe"] and phi.table) else None
    report = classify_index(
        index,
        encoder,
        vision,
        text,
        phi.value,
        sec["k"],
        train_config=train_cfg,
        candidates=universe,
    )
    report["phi"] = phi_info
    validate_report(report, "classify")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    write_run_config(_sidecar(out), "eval-classify", cfg, sys.argv[1:])
    combined = report["tactile_text"]["combined"]
    print(f"wrote {out}: phi={phi.value:.3f}, tactile-text {combined}, tactile-vision {report['tactile_vision']['combined']}")
    return 0


def cmd_eval_bench(args, cfg) -> int:
    from .evalbench import (
        EchoGenerator,
        EmptyGenerator,
        FixtureGenerator,
        HttpGenerator,
        HttpJudge,
        OverlapJudge,
        per_pair_scores,
        run_benchmark,
        validate_report,
    )

    sec = cfg["bench"]
    _flag(cfg, "bench", "generator", args.generator)
    _flag(cfg, "bench", "judge", args.judge)
    _flag(cfg, "bench", "generator_fixtures", args.generator_fixtures)
    _flag(cfg, "bench", "baseline", args.baseline)
    _flag(cfg, "bench", "seed", args.seed)
    kind = sec["generator"]
    if kind == "fake":
        fixtures = sec["generator_fixtures"]
        generator = FixtureGenerator(json.loads(Path(fixtures).read_text(encoding="utf-8"))) if fixtures else EchoGenerator()
    elif kind == "echo":
        generator = EchoGenerator()
    elif kind == "empty":
        generator = EmptyGenerator()
    elif kind == "http":
        generator = HttpGenerator()
    else:
        raise CliError("config-error", f"unknown generator {kind!r}")
    if sec["judge"] == "fake":
        judge = OverlapJudge()
    elif sec["judge"] == "http":
        judge = HttpJudge()
    else:
        raise CliError("config-error", f"unknown judge {sec['judge']!r}")
    baseline = None
    if sec["baseline"]:
        bpath = Path(sec["baseline"])
        if not bpath.is_file():
            raise CliError("missing-input", f"baseline not found: {bpath}")
        baseline = {k: float(v) for k, v in json.loads(bpath.read_text(encoding="utf-8")).items()}
    index = _load_index(args.manifest)
    pairs = [p for p in index.pairs() if p.split == "test" and p.labels and p.label_origin == "human"]
    if not pairs:
        raise CliError("missing-input", "manifest has no human-labeled test pairs")
    report = run_benchmark(pairs, generator, judge, np.random.default_rng(int(sec["seed"])), index.root, baseline)
    validate_report(report, "bench")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    scores = out.with_name(out.stem + ".scores.json")
    scores.write_text(json.dumps(per_pair_scores(report), indent=2) + "\n", encoding="utf-8")
    write_run_config(_sidecar(out), "eval-bench", cfg, sys.argv[1:])
    agg = {k: v["mean"] for k, v in report["aggregates"].items()}
    print(f"wrote {out}: mean scores {agg}; excluded {report['excluded']}; per-pair scores {scores}")
    return 0


def cmd_report(args, cfg) -> int:
    from .report import EmptyLogError, report

    try:
        result = report(args.run_dir, args.out)
    except EmptyLogError as exc:
        raise CliError("missing-input", str(exc)) from None
    print(result["summary"].read_text(encoding="utf-8"), end="")
    for p in result["plots"]:
        print(f"plot: {p}")
    return 0


def cmd_synth(args, cfg) -> int:
    from .synthetic import SyntheticSpec, make_synthetic, write_vlm_fixtures

    spec = SyntheticSpec(
        n_classes=args.classes,
        hct_trajectories=args.trajectories,
        contact_frames=args.contact_frames,
        lead_frames=args.lead_frames,
        ssvtp_pairs=args.ssvtp,
        test_fraction=args.test_fraction,
        hct_labeled=not args.unlabeled,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = make_synthetic(args.out, spec)
    fixtures = write_vlm_fixtures(args.out, fail_trajectories=args.fail_trajectories)
    print(f"wrote {manifest} and {fixtures}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tactalign", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        p.set_defaults(func=func)
        return p

    p = add("stats", cmd_stats, "print vocabulary and contact statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--top", type=int, default=20)

    p = add("split", cmd_split, "assign train/test tags")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--seed", type=int)

    p = add("segment", cmd_segment, "detect contact frames and write flags to a new manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--provider", help="tactile embedding provider name or checkpoint:PATH")
    p.add_argument("--threshold", type=float)
    p.add_argument("--window", type=int)

    p = add("pseudolabel", cmd_pseudolabel, "label in-contact frames through a VLM client")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--client", choices=["fake", "http"])
    p.add_argument("--fixtures")
    p.add_argument("--audit-log")
    p.add_argument("--seed", type=int)
    p.add_argument("--word-pool", action="store_true", help="backfill word-by-word from pooled successful labels")

    p = add("train", cmd_train, "train the tactile encoder")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, help="override train.total_epochs")
    p.add_argument("--seed", type=int)
    p.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")

    p = add("eval-classify", cmd_eval_classify, "open-vocabulary tactile classification metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phi-mode", choices=["min", "percentile"])
    p.add_argument("--percentile", type=float)
    p.add_argument("--phi", type=float, help="use a fixed threshold instead of synonyms")
    p.add_argument("--synonyms", help="JSON file: descriptor -> list of synonyms")
    p.add_argument("--k", help="comma-separated k values, e.g. 1,5")
    p.add_argument("--rank-universe", action="store_true", help="rank over the synonym universe instead of test labels")

    p = add("eval-bench", cmd_eval_bench, "judged tactile description benchmark")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--generator", choices=["fake", "echo", "empty", "http"])
    p.add_argument("--generator-fixtures")
    p.add_argument("--judge", choices=["fake", "http"])
    p.add_argument("--baseline", help="JSON file: pair ref -> baseline score")
    p.add_argument("--seed", type=int)

    p = add("report", cmd_report, "summaries and plots from training runs")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out")

    p = add("synth", cmd_synth, "write a synthetic dataset and fake-VLM fixtures")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--trajectories", type=int, default=20)
    p.add_argument("--contact-frames", type=int, default=6)
    p.add_argument("--lead-frames", type=int, default=2)
    p.add_argument("--ssvtp", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--unlabeled", action="store_true", help="leave HCT training frames unlabeled with unknown contact")
    p.add_argument("--fail-trajectories", type=int, default=1)
    p.add_argument("--seed", type=int)
    return parser


def _categorize(exc: Exception) -> str:
    from .data import ManifestError
    from .embed import ProviderUnavailable
    from .train import TrainingDiverged

    if isinstance(exc, FileNotFoundError):
        return "missing-input"
    if isinstance(exc, ManifestError):
        return "invalid-manifest"
    if isinstance(exc, ProviderUnavailable):
        return "provider-unavailable"
    if isinstance(exc, TrainingDiverged):
        return "training-diverged"
    if isinstance(exc, ValueError):
        return "invalid-input"
    return "runtime-error"


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (2) and --help/--version (0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = merge_config(_load_config_file(args.config), args.set)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            raise
        msg = str(exc).replace("\n", " ")
        print(f"error[{_categorize(exc)}]: {msg}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    raise SystemExit(main())
