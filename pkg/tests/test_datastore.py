import json

import numpy as np
import pytest

from craftbench.actions import compile_action_set
from craftbench.datastore import (
    AugmentConfig,
    DemoSet,
    Trajectory,
    TrainingData,
    TrajectoryFormatError,
    augment_frame,
    filter_and_label,
    flip_frames,
    fuse_treechop,
    n_step_targets,
    read_trajectory,
    sample_batch,
    write_trajectory,
)
from craftbench.encoding import VECTOR_DIM
from craftbench.world import RawStep

ASET = compile_action_set()


def make_traj(steps, success=True, task="iron_pickaxe", vectors=True, seed=0):
    rng = np.random.default_rng(seed)
    t = len(steps)
    frames = rng.integers(0, 256, size=(t, 64, 64, 3), dtype=np.uint8)
    vecs = rng.random((t, VECTOR_DIM), dtype=np.float32) if vectors else None
    meta = {"task": task, "seed": seed, "total_reward": float(sum(s.reward for s in steps)), "success": success}
    return Trajectory(meta=meta, frames=frames, vectors=vecs, raw_steps=list(steps))


def raw_set(root, trajs, task="iron_pickaxe"):
    ds = DemoSet.create(root, kind="raw", task=task)
    for i, tr in enumerate(trajs):
        ds.add(tr, f"ep_{i:05d}")
    ds.write_manifest()
    return DemoSet.open(root)


IDLE = RawStep()
FWD = RawStep(forward=True)
ATK = RawStep(attack=True)


def test_roundtrip(tmp_path):
    tr = make_traj([FWD, ATK, RawStep(item_verb=("craft", "planks"), reward=2.0, done=True)])
    tr.action_ids = np.array([1, 2, 3])
    write_trajectory(tmp_path / "t", tr)
    back = read_trajectory(tmp_path / "t")
    assert np.array_equal(back.frames, tr.frames)
    assert np.array_equal(back.vectors, tr.vectors)
    assert back.raw_steps == tr.raw_steps
    assert back.action_ids.tolist() == [1, 2, 3]
    mm = read_trajectory(tmp_path / "t", mmap=True)
    assert np.array_equal(np.asarray(mm.frames), tr.frames)


def test_binary_layout(tmp_path):
    tr = make_traj([FWD, ATK])
    tr.action_ids = np.array([5, 7])
    write_trajectory(tmp_path / "t", tr)
    assert (tmp_path / "t" / "frames.bin").stat().st_size == 2 * 64 * 64 * 3
    vec = np.fromfile(tmp_path / "t" / "vecs.bin", dtype="<f4").reshape(2, VECTOR_DIM)
    assert np.array_equal(vec, tr.vectors)
    assert np.fromfile(tmp_path / "t" / "labels.bin", dtype="<u4").tolist() == [5, 7]
    lines = (tmp_path / "t" / "raw_steps.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])


def test_truncated_frames_named(tmp_path):
    write_trajectory(tmp_path / "t", make_traj([FWD, ATK]))
    member = tmp_path / "t" / "frames.bin"
    member.write_bytes(member.read_bytes()[:-10])
    with pytest.raises(TrajectoryFormatError, match="frames.bin"):
        read_trajectory(tmp_path / "t")
    with pytest.raises(TrajectoryFormatError, match="frames.bin"):
        read_trajectory(tmp_path / "t", verify=False)


def test_corrupt_member_named(tmp_path):
    write_trajectory(tmp_path / "t", make_traj([FWD, ATK]))
    member = tmp_path / "t" / "vecs.bin"
    data = bytearray(member.read_bytes())
    data[0] ^= 0xFF
    member.write_bytes(bytes(data))
    with pytest.raises(TrajectoryFormatError, match="vecs.bin"):
        read_trajectory(tmp_path / "t")


def test_empty_trajectory_rejected(tmp_path):
    with pytest.raises(TrajectoryFormatError):
        write_trajectory(tmp_path / "t", make_traj([]))


def test_create_refuses_nonempty(tmp_path):
    (tmp_path / "x").write_text("1")
    with pytest.raises(FileExistsError):
        DemoSet.create(tmp_path, kind="raw", task="treechop")


def test_filter_examples(tmp_path):
    ok = make_traj([FWD, IDLE, ATK, IDLE, RawStep(attack=True, reward=1.0, done=True)], seed=1)
    failed = make_traj([FWD, ATK], success=False, seed=2)
    at_horizon = make_traj([FWD] * 6, seed=3)
    too_long = make_traj([FWD] * 7, seed=4)
    raw = raw_set(tmp_path / "raw", [ok, failed, at_horizon, too_long])
    out = filter_and_label(raw, tmp_path / "proc", ASET, horizon=6)
    assert out.names == ["ep_00000", "ep_00002"]
    kept = out.load("ep_00000")
    assert len(kept) == 3
    assert ASET.noop_id not in kept.action_ids.tolist()
    # retained content is untouched
    assert np.array_equal(kept.frames, ok.frames[[0, 2, 4]])
    assert np.array_equal(kept.vectors, ok.vectors[[0, 2, 4]])
    assert kept.rewards.tolist() == [0.0, 0.0, 1.0]
    assert kept.action_ids[0] == ASET.movement_id({"forward"})
    assert DemoSet.open(tmp_path / "proc").stats is not None
    assert out.manifest["dropped_noop_steps"] == 2 + 0


def test_filter_nothing_survives(tmp_path):
    raw = raw_set(tmp_path / "raw", [make_traj([FWD], success=False)])
    with pytest.raises(ValueError):
        filter_and_label(raw, tmp_path / "proc", ASET)


def test_sub_threshold_camera_is_noop(tmp_path):
    jitter = RawStep(yaw_delta=2.0)
    raw = raw_set(tmp_path / "raw", [make_traj([FWD, jitter, FWD])])
    out = filter_and_label(raw, tmp_path / "proc", ASET)
    assert len(out.load("ep_00000")) == 2


def _iron_processed(tmp_path, rewards_per_traj):
    trajs = []
    for k, rewards in enumerate(rewards_per_traj):
        steps = [RawStep(forward=True, reward=r) for r in rewards]
        trajs.append(make_traj(steps, seed=10 + k))
    raw = raw_set(tmp_path / "iron_raw", trajs)
    return filter_and_label(raw, tmp_path / "iron", ASET)


def _treechop_processed(tmp_path, n=2):
    trajs = [make_traj([FWD, ATK, RawStep(attack=True, reward=1.0)], task="treechop", vectors=False, seed=20 + k)
             for k in range(n)]
    raw = raw_set(tmp_path / "tc_raw", trajs, task="treechop")
    return filter_and_label(raw, tmp_path / "tc", ASET)


def test_fuse_donors_before_planks(tmp_path):
    # cumulative reward before each state: 0, 0, 1, 3, 7
    iron = _iron_processed(tmp_path, [[0, 1, 2, 4, 0]])
    tc = _treechop_processed(tmp_path)
    fused = fuse_treechop(tc, iron, tmp_path / "fused", seed=5)
    src = iron.load("ep_00000").vectors
    for name in fused.names:
        tr = fused.load(name)
        orig = tc.load(name)
        assert tr.vectors.shape == (len(tr), VECTOR_DIM)
        assert np.array_equal(tr.frames, orig.frames)
        assert np.array_equal(tr.action_ids, orig.action_ids)
        assert all(d["cumulative_reward"] in (0.0, 1.0) for d in tr.donors)
        assert all(d["step"] in (0, 1, 2) for d in tr.donors)
        for v, d in zip(tr.vectors, tr.donors):
            assert np.array_equal(v, src[d["step"]])


def test_fuse_deterministic(tmp_path):
    iron = _iron_processed(tmp_path, [[0, 0, 1, 0, 2]])
    tc = _treechop_processed(tmp_path)
    a = fuse_treechop(tc, iron, tmp_path / "a", seed=9)
    b = fuse_treechop(tc, iron, tmp_path / "b", seed=9)
    for name in a.names:
        assert a.load(name).donors == b.load(name).donors


def test_fuse_without_donors(tmp_path):
    raw = raw_set(tmp_path / "iron_raw", [make_traj([FWD, ATK], vectors=False)])
    iron = filter_and_label(raw, tmp_path / "iron", ASET)
    tc = _treechop_processed(tmp_path)
    with pytest.raises(ValueError, match="donor"):
        fuse_treechop(tc, iron, tmp_path / "fused", seed=0)


def test_flip_frame_involution():
    rng = np.random.default_rng(0)
    f = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    assert np.array_equal(flip_frames(flip_frames(f)), f)
    assert np.array_equal(flip_frames(f)[:, 0], f[:, 63])


def test_flip_pair_involution():
    rng = np.random.default_rng(1)
    f = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    for a in range(len(ASET)):
        f2, a2 = flip_frames(flip_frames(f)), ASET.flip_map[ASET.flip_map[a]]
        assert a2 == a and np.array_equal(f2, f)
    fl = ASET.movement_id({"forward", "left"})
    assert ASET.flip_map[fl] == ASET.movement_id({"forward", "right"})


def test_n_step_terminal():
    r = np.array([0.0, 1.0, 0.0, 2.0])
    ret, nxt, done, k = n_step_targets(r, 1, 0.9)
    assert ret[-1] == 2.0 and done[-1]
    assert not done[:-1].any()
    assert nxt[:-1].tolist() == [1, 2, 3]
    ret, nxt, done, k = n_step_targets(r, 3, 0.5)
    assert ret[0] == pytest.approx(0 + 0.5 * 1 + 0.25 * 0)
    assert ret[1] == pytest.approx(1 + 0.5 * 0 + 0.25 * 2)
    assert ret[2] == pytest.approx(0 + 0.5 * 2)
    assert k.tolist() == [3, 3, 2, 1]
    assert done.tolist() == [False, True, True, True]


def test_sample_batch_fields(tmp_path):
    iron = _iron_processed(tmp_path, [[0, 1, 2, 4, 0], [0, 0, 1]])
    data = TrainingData([iron], n=2, gamma=0.5)
    assert len(data) == 8
    rng = np.random.default_rng(0)
    b = sample_batch(data, 64, rng, AugmentConfig(flip=False))
    assert b.frames.shape == (64, 64, 64, 3) and b.vectors.shape == (64, VECTOR_DIM)
    assert not b.flipped.any()
    for i in range(64):
        # every sampled frame is a stored frame with its own label
        hits = [(j, t) for j, fr in enumerate(data.frames) for t in range(len(fr)) if np.array_equal(fr[t], b.frames[i])]
        assert len(hits) == 1
        j, t = hits[0]
        assert b.actions[i] == data.labels[j][t]
        assert b.n_step_returns[i] == data.returns[j][t]


def test_sample_batch_flip(tmp_path):
    iron = _iron_processed(tmp_path, [[0, 1, 2]])
    data = TrainingData([iron])
    b = sample_batch(data, 200, np.random.default_rng(3), AugmentConfig(flip=True))
    frac = b.flipped.mean()
    assert 0.35 < frac < 0.65
    for i in np.flatnonzero(b.flipped):
        assert any(np.array_equal(flip_frames(b.frames[i]), f) for f in data.frames[0])


def test_sample_with_replacement_logged(tmp_path, caplog):
    iron = _iron_processed(tmp_path, [[0, 1]])
    data = TrainingData([iron])
    b = sample_batch(data, 10, np.random.default_rng(0))
    assert len(b.actions) == 10
    assert "replacement" in caplog.text


def test_augment_frame_ranges():
    rng = np.random.default_rng(0)
    f = np.full((64, 64, 3), 200, np.uint8)
    out = augment_frame(f, AugmentConfig(flip=False, posterize=True), rng)
    assert (out == 192).all()
    out = augment_frame(f, AugmentConfig(flip=False, rectangle=True), rng)
    area = (out == 128).all(axis=-1).sum()
    assert 0.08 * 4096 <= area <= 0.27 * 4096
    assert augment_frame(f, AugmentConfig(), rng) is f
    with pytest.raises(ValueError):
        AugmentConfig.from_names(["solarize"])


def test_mixed_catalog_rejected(tmp_path):
    iron = _iron_processed(tmp_path, [[0, 1]])
    iron.manifest["action_set_hash"] = "deadbeef"
    with pytest.raises(ValueError, match="catalog"):
        TrainingData([iron])
