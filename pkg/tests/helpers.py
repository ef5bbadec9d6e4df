import json

import numpy as np

from tactalign.data import DatasetIndex, SamplePair, Trajectory, save_manifest


def write_pairs(root, pairs, excluded=()):
    """Write constant-valued images for ``pairs`` and a manifest; returns the manifest path."""
    trajs: dict[str, Trajectory] = {}
    for i, p in enumerate(pairs):
        for rel in (p.tactile_path, p.vision_path):
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, np.full((8, 10, 3), 0.1 + 0.8 * ((i % 7) / 7), dtype=np.float32))
        trajs.setdefault(p.trajectory_id, Trajectory(p.trajectory_id)).pairs.append(p)
    for tid in excluded:
        trajs[tid].excluded = True
    return save_manifest(DatasetIndex(list(trajs.values()), root), root / "manifest.jsonl")


def pair(tid="a", t=0.0, **kw):
    kw.setdefault("source", "hct")
    return SamplePair(tid, t, f"tac/{tid}_{t}.npy", f"vis/{tid}_{t}.npy", **kw)


def record(**overrides):
    rec = {
        "trajectory_id": "a",
        "t": 0.0,
        "tactile_path": "tac/a0.npy",
        "vision_path": "vis/a0.npy",
        "source": "hct",
        "contact": True,
        "labels": ["soft"],
        "label_origin": "human",
        "split": "train",
    }
    rec.update(overrides)
    return json.dumps(rec)
