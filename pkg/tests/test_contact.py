import numpy as np
import pytest

from helpers import pair, write_pairs
from tactalign.contact import (
    ContactConfig,
    ContactMask,
    EmbeddingError,
    contact_score,
    estimate_background,
    events_to_mask,
    mask_to_events,
    segment_trajectory,
)
from tactalign.data import TactileFrame, load_manifest


def const(v, t=0.0):
    return TactileFrame(np.full((4, 4, 3), v), t)


def test_background_mean_of_ends():
    bg = estimate_background([const(0.2), const(0.9), const(0.4)], 1)
    np.testing.assert_allclose(bg.image, 0.3)
    same = estimate_background([const(0.5), const(0.1), const(0.5)], 1)
    np.testing.assert_allclose(same.image, 0.5)
    frames = [const(v) for v in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)]
    np.testing.assert_allclose(estimate_background(frames, 2).image, 0.35)
    with pytest.raises(ValueError):
        estimate_background([const(0.1)], 1)


def test_contact_score():
    assert contact_score([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert contact_score([1, 0], [0, 1]) == 0.0
    assert contact_score([0.6, 0.8], [1, 0]) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        contact_score([1, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        contact_score([0, 0], [1, 0])


def test_all_background_frames_out_of_contact():
    frames = [const(0.4, i) for i in range(6)]
    mask = segment_trajectory(frames, lambda f: f.image.ravel()[:3] + 1)
    assert not mask.mask.any()
    assert mask.contact_events == []


def test_orthogonal_block_is_one_event():
    vecs = {i: np.array([1.0, 0.0]) for i in range(10)}
    for i in range(3, 8):
        vecs[i] = np.array([0.0, 1.0])
    frames = [TactileFrame(np.full((1, 1, 3), i / 10), i) for i in range(10)]
    lookup = {round(i / 10, 6): vecs[i] for i in range(10)}
    lookup[round(0.45, 6)] = np.array([1.0, 0.0])  # background = mean(frame 0, frame 9)
    result = segment_trajectory(frames, lambda f: lookup[round(float(f.image[0, 0, 0]), 6)])
    np.testing.assert_array_equal(np.flatnonzero(result.mask), [3, 4, 5, 6, 7])
    assert result.contact_events == [(3, 7)]


def test_exact_threshold_is_out_of_contact():
    lookup = {0.1: [1.0, 0, 0], 0.2: [0.375, 0.5, 0], 0.3: [0.375, 0.5001, 0]}
    frames = [const(v, i) for i, v in enumerate((0.1, 0.2, 0.3, 0.1))]
    result = segment_trajectory(frames, lambda f: np.array(lookup[round(float(f.image.mean()), 3)]))
    assert result.scores[1] == 0.6
    assert result.mask.tolist() == [False, False, True, False]


def test_mask_event_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mask = rng.random(int(rng.integers(1, 30))) < 0.5
        events = mask_to_events(mask)
        np.testing.assert_array_equal(events_to_mask(events, len(mask)), mask)
        assert ContactMask.from_events(events, len(mask)).mask.tolist() == mask.tolist()


def test_embedding_failure_reports_index():
    frames = [const(0.1, i) for i in range(4)]
    calls = []

    def embed(f):
        calls.append(f)
        if len(calls) == 4:  # background, then frames 0, 1, 2
            raise RuntimeError("boom")
        return np.ones(3)

    with pytest.raises(EmbeddingError) as err:
        segment_trajectory(frames, embed)
    assert err.value.index == 2


def test_writes_flags_to_manifest_trajectory(tmp_path):
    path = write_pairs(tmp_path, [pair("a", t) for t in range(5)])
    index = load_manifest(path)
    traj = index.trajectory("a")
    embed = lambda f: np.array([1.0, 0.0]) if f.image.mean() < 0.2 or f.image.mean() > 0.55 else np.array([0.0, 1.0])
    result = segment_trajectory(traj, embed, ContactConfig(), root=index.root)
    assert [p.contact for p in traj.pairs] == result.mask.tolist()


def test_config_validation():
    with pytest.raises(ValueError):
        ContactConfig(threshold=2)
    with pytest.raises(ValueError):
        ContactConfig(background_window=0)
