"""Synthetic tri-modal datasets with known classes, contact masks and labels.

Used by the test-suite and for desk-scale demos. Each class owns a tactile
texture, a visual scene and a fixed adjective set; frames are noisy draws
around those prototypes.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import DatasetIndex, SamplePair, Trajectory, save_manifest

ADJECTIVES = (
    "soft", "smooth", "plush", "hard", "rigid", "cool", "rough", "grainy", "bumpy",
    "glossy", "slick", "reflective", "fibrous", "woven", "fuzzy", "sticky", "rubbery",
    "flexible", "ridged", "grooved", "porous", "spongy", "metallic", "polished",
    "coarse", "gritty", "sandy", "padded", "cushioned", "warm", "dense", "thin",
)
REFUSAL = "I'm sorry, I can't determine the tactile properties from this image."


@dataclass
class SyntheticSpec:
    n_classes: int = 8
    hct_trajectories: int = 100
    contact_frames: int = 8
    lead_frames: int = 2
    ssvtp_pairs: int = 0
    labels_per_class: int = 3
    tactile_shape: tuple[int, int] = (24, 32)
    vision_shape: tuple[int, int] = (40, 48)
    test_fraction: float = 0.1
    hct_labeled: bool = True
    noise: float = 0.03
    texture_amplitude: float = 0.25
    seed: int = 0


def _smooth_pattern(rng, shape, sigma) -> np.ndarray:
    raw = rng.standard_normal((*shape, 3))
    smooth = ndimage.gaussian_filter(raw, sigma=(sigma, sigma, 0))
    return smooth / (np.abs(smooth).max() + 1e-12)


class _World:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        th, tw = spec.tactile_shape
        yy, xx = np.mgrid[0:th, 0:tw]
        gel = 0.45 + 0.05 * (yy / th)[..., None] * np.array([1.0, 0.8, 0.6]) + 0.03 * (xx / tw)[..., None]
        self.gel = gel
        self.tactile_protos = [_smooth_pattern(rng, spec.tactile_shape, 1.0) for _ in range(spec.n_classes)]
        self.vision_protos = [_smooth_pattern(rng, spec.vision_shape, 2.0) for _ in range(spec.n_classes)]
        words = list(ADJECTIVES)
        rng.shuffle(words)
        k = spec.labels_per_class
        if k * spec.n_classes > len(words):
            raise ValueError("not enough distinct adjectives for the requested classes")
        self.labels = [sorted(words[i * k : (i + 1) * k]) for i in range(spec.n_classes)]

    def tactile(self, rng, cls: int | None) -> np.ndarray:
        s = self.spec
        x = self.gel + rng.normal(0, s.noise / 3, self.gel.shape)
        if cls is not None:
            amp = s.texture_amplitude * rng.uniform(0.8, 1.2)
            x = x + amp * self.tactile_protos[cls]
        return np.clip(x, 0, 1)

    def vision(self, rng, cls: int) -> np.ndarray:
        s = self.spec
        x = 0.5 + 0.35 * self.vision_protos[cls] * rng.uniform(0.8, 1.2) + rng.normal(0, s.noise, (*s.vision_shape, 3))
        return np.clip(x, 0, 1)


def _write(root: Path, rel: str, image: np.ndarray) -> str:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, image.astype(np.float32))
    return rel


def make_synthetic(root: str | os.PathLike, spec: SyntheticSpec | None = None, name: str = "manifest.jsonl") -> Path:
    """Write images, ``manifest.jsonl`` and ``truth.json`` under ``root``; return the manifest path.

    ``truth.json`` records each pair's class and true contact state. With
    ``hct_labeled=False`` HCT pairs carry no labels and unknown contact, except
    that in-contact frames of test trajectories get human labels.
    """
    spec = spec or SyntheticSpec()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    world = _World(spec)
    rng = np.random.default_rng([spec.seed, 1])
    truth: dict[str, dict] = {}
    trajs: list[Trajectory] = []

    n_test_traj = int(round(spec.test_fraction * spec.hct_trajectories))
    test_ids = set(rng.permutation(spec.hct_trajectories)[:n_test_traj].tolist())
    n_frames = spec.contact_frames + 2 * spec.lead_frames
    for i in range(spec.hct_trajectories):
        cls = i % spec.n_classes
        tid = f"hct-{i:04d}"
        split = "test" if i in test_ids else "train"
        traj = Trajectory(tid)
        for f in range(n_frames):
            in_contact = spec.lead_frames <= f < spec.lead_frames + spec.contact_frames
            tpath = _write(root, f"tactile/{tid}/{f:03d}.npy", world.tactile(rng, cls if in_contact else None))
            vpath = _write(root, f"vision/{tid}/{f:03d}.npy", world.vision(rng, cls))
            labelled = in_contact and (spec.hct_labeled or split == "test")
            pair = SamplePair(
                trajectory_id=tid,
                t=round(f / 30.0, 6),
                tactile_path=tpath,
                vision_path=vpath,
                source="hct",
                contact=in_contact if spec.hct_labeled else None,
                labels=list(world.labels[cls]) if labelled else [],
                label_origin="human" if labelled else "none",
                split=split,
            )
            traj.pairs.append(pair)
            truth[pair.ref] = {"class": cls, "contact": in_contact}
        trajs.append(traj)

    ssvtp_test = set(rng.permutation(spec.ssvtp_pairs)[: int(round(spec.test_fraction * spec.ssvtp_pairs))].tolist())
    for j in range(spec.ssvtp_pairs):
        cls = j % spec.n_classes
        tid = f"ssvtp-{j:04d}"
        tpath = _write(root, f"tactile/{tid}.npy", world.tactile(rng, cls))
        vpath = _write(root, f"vision/{tid}.npy", world.vision(rng, cls))
        pair = SamplePair(
            trajectory_id=tid,
            t=0.0,
            tactile_path=tpath,
            vision_path=vpath,
            source="ssvtp",
            contact=True,
            labels=list(world.labels[cls]),
            label_origin="human",
            split="test" if j in ssvtp_test else "train",
        )
        trajs.append(Trajectory(tid, [pair]))
        truth[pair.ref] = {"class": cls, "contact": True}

    manifest = save_manifest(DatasetIndex(trajs, root), root / name)
    meta = {"spec": asdict(spec), "class_labels": world.labels, "pairs": truth}
    (root / "truth.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return manifest


def write_vlm_fixtures(
    root: str | os.PathLike,
    fail_trajectories: int = 1,
    flaky_fraction: float = 0.2,
    seed: int = 0,
) -> Path:
    """Canned labeling responses for the fake VLM client, derived from ``truth.json``.

    Responses list the class adjectives; ``flaky_fraction`` of in-contact HCT
    frames get a refusal and the first ``fail_trajectories`` training
    trajectories are refused outright.
    """
    root = Path(root)
    meta = json.loads((root / "truth.json").read_text(encoding="utf-8"))
    labels = meta["class_labels"]
    rng = np.random.default_rng(seed)
    by_pair: dict[str, str | None] = {}
    by_trajectory: dict[str, str | None] = {}
    failed: list[str] = []
    from .data import load_manifest

    index = load_manifest(root / "manifest.jsonl")
    for traj in index.trajectories:
        if traj.source != "hct":
            continue
        cls = meta["pairs"][traj.pairs[0].ref]["class"]
        if len(failed) < fail_trajectories and traj.pairs[0].split == "train":
            by_trajectory[traj.id] = REFUSAL
            failed.append(traj.id)
            continue
        by_trajectory[traj.id] = ", ".join(labels[cls])
        for p in traj.pairs:
            if rng.random() < flaky_fraction:
                by_pair[p.ref] = REFUSAL
    out = root / "vlm_fixtures.json"
    payload = {"default": REFUSAL, "by_trajectory": by_trajectory, "by_pair": by_pair, "failed_trajectories": failed}
    out.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    return out
