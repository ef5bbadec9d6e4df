import json
import math

import numpy as np
import pytest
import torch

from tactalign.data import load_manifest
from tactalign.embed import HashTextProvider, LabelTextComposer, ProjectionImageProvider, load_checkpoint
from tactalign.synthetic import SyntheticSpec, make_synthetic
from tactalign.train import (
    MetricLog,
    TrainConfig,
    TriModalBatch,
    info_nce,
    iter_records,
    lr_at,
    lr_for_config,
    sample_epoch,
    train,
    training_pools,
    trimodal_loss,
)


def unit_rows(x):
    return torch.nn.functional.normalize(torch.as_tensor(x, dtype=torch.float64), dim=1)


def test_info_nce_hand_value():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    k = torch.tensor([[0.6, 0.8], [0.8, 0.6]], dtype=torch.float64)
    assert float(info_nce(q, k, 1.0)) == pytest.approx(0.798138869381591839684943712541, abs=1e-14)


def test_info_nce_limits_and_errors():
    eye = torch.eye(4, dtype=torch.float64)
    assert float(info_nce(eye, eye, 0.01)) < 1e-40
    with pytest.raises(ValueError):
        info_nce(eye, eye, 0.0)
    with pytest.raises(ValueError):
        info_nce(eye, eye[:3], 0.1)
    with pytest.raises(ValueError):
        info_nce(eye[:1], eye[:1], 0.1)
    with pytest.raises(ValueError, match="unit-norm"):
        info_nce(2 * eye, eye, 0.1)


def test_trimodal_uniform_and_switches():
    b = 8
    same = unit_rows(np.ones((b, 4)))
    total, parts = trimodal_loss(TriModalBatch(same, same, same), {"tv": True, "tl": True, "vl": True})
    assert float(total) == pytest.approx(3 * math.log(b), abs=1e-12)

    rng = np.random.default_rng(0)
    t, v, x = (unit_rows(rng.normal(size=(b, 5))) for _ in range(3))
    batch = TriModalBatch(t, v, x)
    no_tl, parts = trimodal_loss(batch, TrainConfig(pair_tl=False), 0.07)
    assert float(no_tl) == pytest.approx(parts["tv"] + parts["vl"], abs=1e-12)
    cases = [("tv", t, v, True), ("tl", t, x, True), ("vl", v, x, False)]
    for key, a, c, training in cases:
        only, _ = trimodal_loss(batch, {key: True}, 0.07, training=training)
        assert float(only) == pytest.approx(float(info_nce(a, c, 0.07)), abs=1e-7)
    with pytest.raises(ValueError):
        trimodal_loss(batch, {"tv": False, "tl": False, "vl": True}, 0.07)
    with pytest.raises(ValueError):
        TriModalBatch(t, v[:4], x)


def test_vision_text_term_has_no_gradient():
    rng = np.random.default_rng(1)
    v = unit_rows(rng.normal(size=(4, 3))).requires_grad_()
    x = unit_rows(rng.normal(size=(4, 3))).requires_grad_()
    t = unit_rows(rng.normal(size=(4, 3))).requires_grad_()
    tau = torch.tensor(0.07, dtype=torch.float64, requires_grad=True)
    total, _ = trimodal_loss(TriModalBatch(t, v, x), {"tv": False, "tl": True, "vl": True}, tau)
    total.backward()
    assert v.grad is None
    assert x.grad is not None  # through the tactile-text term only
    assert t.grad is not None and tau.grad is not None


@pytest.fixture(scope="module")
def small_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec(n_classes=4, hct_trajectories=12, contact_frames=5, lead_frames=2, test_fraction=0.25)
    return load_manifest(make_synthetic(root, spec))


def test_sample_epoch_gamma(small_index):
    pools = training_pools(small_index)
    plain = [s for b in sample_epoch(pools, 0.0, np.random.default_rng(0), 8) for s in b]
    assert not any(s.background for s in plain)
    assert len(plain) == len(pools[0])
    mixed = sample_epoch(pools, 0.10, np.random.default_rng(0), 20)
    for batch in mixed[:-1]:
        assert sum(s.background for s in batch) in (1, 2, 3)
    flat = [s for b in mixed for s in b]
    assert abs(sum(s.background for s in flat) / len(flat) - 0.10) < 0.02
    assert {s.pair.key for s in flat if not s.background} == {p.key for p in pools[0]}
    assert all(s.text == "background" for s in flat if s.background)
    again = sample_epoch(pools, 0.10, np.random.default_rng(0), 20)
    assert [[s.text for s in b] for b in again] == [[s.text for s in b] for b in mixed]


def test_sample_epoch_errors(small_index):
    contact, _ = training_pools(small_index)
    with pytest.raises(ValueError):
        sample_epoch((contact, []), 0.1, np.random.default_rng(0), 8)
    with pytest.raises(ValueError):
        sample_epoch(([], []), 0.0, np.random.default_rng(0), 8)


def test_lr_schedule():
    assert lr_at(0, 1.5e-4, 10, 100) == 0.0
    assert lr_at(10, 1.5e-4, 10, 100) == pytest.approx(1.5e-4)
    assert lr_at(55, 1.5e-4, 10, 100) == pytest.approx(1.5e-4 / 2)
    assert lr_at(100, 1.5e-4, 10, 100) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(5, 1.0, 10, 100) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        lr_at(101, 1.0, 10, 100)
    cfg = TrainConfig()
    assert cfg.base_lr == 1.5e-4
    assert lr_for_config(10 * 7, cfg, 7) == pytest.approx(1.5e-4)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.tau, cfg.gamma, cfg.batch_size, cfg.warmup_epochs, cfg.total_epochs) == (0.07, 0.10, 256, 10, 200)
    assert (cfg.weight_decay, cfg.beta1, cfg.beta2) == (0.05, 0.9, 0.95)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert isinstance(cfg.composer, LabelTextComposer)
    for bad in ({"tau": 0}, {"gamma": 1.0}, {"batch_size": 1}, {"warmup_epochs": 300}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 1})


def _toy(**kw):
    return TrainConfig(toy=True, batch_size=16, total_epochs=3, warmup_epochs=1, base_lr=1e-3, **kw)


def test_training_is_deterministic_and_writes_outputs(small_index, tmp_path):
    providers = (ProjectionImageProvider(dim=64), HashTextProvider(dim=64))
    a = train(small_index, _toy(), *providers, out_dir=tmp_path / "a", checkpoint_extra={"note": 1})
    b = train(small_index, _toy(), *providers, out_dir=tmp_path / "b")
    assert [r["loss_total"] for r in a.metrics] == [r["loss_total"] for r in b.metrics]
    rows = list(iter_records(tmp_path / "a" / "metrics.jsonl"))
    assert rows == a.metrics
    assert {r["split"] for r in rows} == {"train", "val"}
    keys = {"epoch", "split", "loss_total", "loss_tv", "loss_tl", "loss_vl", "retrieval_top1", "lr", "tau"}
    assert all(set(r) == keys for r in rows)
    for name in ("best.pt", "last.pt", "best.pt.json", "last.pt.json", "train_config.json"):
        assert (tmp_path / "a" / name).exists()
    encoder, blob = load_checkpoint(tmp_path / "a" / "last.pt")
    assert blob["note"] == 1 and blob["epoch"] == 2
    assert json.loads((tmp_path / "a" / "train_config.json").read_text())["gamma"] == 0.10


def test_truncated_run_and_fixed_tau(small_index):
    res = train(small_index, _toy(learnable_tau=False), ProjectionImageProvider(dim=64), HashTextProvider(dim=64), epochs=1)
    assert [r["epoch"] for r in res.metrics] == [0, 0]
    assert res.tau == pytest.approx(0.07)


def test_train_rejects_bad_setup(small_index):
    with pytest.raises(ValueError):
        train(small_index, _toy(pair_tv=False, pair_tl=False), ProjectionImageProvider(dim=64), HashTextProvider(dim=64))
    with pytest.raises(ValueError):
        train(small_index, _toy(), ProjectionImageProvider(dim=64), HashTextProvider(dim=32))


def test_metric_log_threads(tmp_path):
    import threading

    log = MetricLog(tmp_path / "m.jsonl")
    threads = [threading.Thread(target=lambda i=i: [log.append({"i": i, "j": j}) for j in range(50)]) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(list(iter_records(tmp_path / "m.jsonl"))) == 200
