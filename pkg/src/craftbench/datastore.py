"""On-disk trajectory format, demonstration processing and batch sampling.

Trajectory directory::

    meta.json        task, seed, length, total_reward, success, member checksums
    frames.bin       uint8, T*64*64*3, row-major RGB
    vecs.bin         float32 little-endian, T*187 (absent for image-only data)
    raw_steps.jsonl  one RawStep record per line
    labels.bin       uint32 little-endian ActionIds (processed data only)
    donors.jsonl     fused Treechop data only: donor of each state's vector

Dataset root: ``manifest.json`` (+ ``stats.json`` for processed data).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np

from craftbench.actions import ActionSet, compile_action_set, encode_step, label_camera_array
from craftbench.encoding import VECTOR_DIM, NormStats, compute_norm_stats
from craftbench.world import RawStep

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FRAME_BYTES = 64 * 64 * 3
ENCODER_HASH = hashlib.sha256(f"craftbench-encoder-v1-{VECTOR_DIM}".encode()).hexdigest()[:16]


class TrajectoryFormatError(ValueError):
    """A trajectory directory is missing, truncated or inconsistent."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Trajectory:
    meta: Dict[str, Any]
    frames: np.ndarray
    vectors: Optional[np.ndarray]
    raw_steps: List[RawStep]
    action_ids: Optional[np.ndarray] = None
    donors: Optional[List[Dict[str, Any]]] = None

    def __len__(self) -> int:
        return len(self.raw_steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.raw_steps], dtype=np.float64)

    def validate(self) -> None:
        t = len(self.raw_steps)
        if t == 0:
            raise TrajectoryFormatError("empty trajectory (T=0)")
        if self.frames.shape != (t, 64, 64, 3) or self.frames.dtype != np.uint8:
            raise TrajectoryFormatError(f"frames: expected ({t}, 64, 64, 3) uint8, got {self.frames.shape} {self.frames.dtype}")
        if self.vectors is not None and self.vectors.shape != (t, VECTOR_DIM):
            raise TrajectoryFormatError(f"vecs: expected ({t}, {VECTOR_DIM}), got {self.vectors.shape}")
        if self.action_ids is not None and len(self.action_ids) != t:
            raise TrajectoryFormatError(f"labels: expected {t} entries, got {len(self.action_ids)}")
        if self.donors is not None and len(self.donors) != t:
            raise TrajectoryFormatError(f"donors: expected {t} entries, got {len(self.donors)}")


def write_trajectory(path, traj: Trajectory) -> None:
    traj.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    members = {}
    with open(path / "frames.bin", "wb") as f:
        f.write(np.ascontiguousarray(traj.frames, dtype=np.uint8).tobytes())
    members["frames.bin"] = _sha256(path / "frames.bin")
    if traj.vectors is not None:
        with open(path / "vecs.bin", "wb") as f:
            f.write(np.ascontiguousarray(traj.vectors, dtype="<f4").tobytes())
        members["vecs.bin"] = _sha256(path / "vecs.bin")
    with open(path / "raw_steps.jsonl", "w") as f:
        for s in traj.raw_steps:
            f.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
    members["raw_steps.jsonl"] = _sha256(path / "raw_steps.jsonl")
    if traj.action_ids is not None:
        with open(path / "labels.bin", "wb") as f:
            f.write(np.asarray(traj.action_ids, dtype="<u4").tobytes())
        members["labels.bin"] = _sha256(path / "labels.bin")
    if traj.donors is not None:
        with open(path / "donors.jsonl", "w") as f:
            for d in traj.donors:
                f.write(json.dumps(d, sort_keys=True) + "\n")
        members["donors.jsonl"] = _sha256(path / "donors.jsonl")
    meta = dict(traj.meta)
    meta.update(length=len(traj), format_version=FORMAT_VERSION, members=members)
    with open(path / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_trajectory(path, mmap: bool = False, verify: bool = True) -> Trajectory:
    """Load a trajectory directory; every member is size- and checksum-checked."""
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TrajectoryFormatError(f"{path}/meta.json: {exc}") from exc
    t = int(meta["length"])
    members = meta.get("members", {})
    for name, digest in members.items():
        member = path / name
        if not member.exists():
            raise TrajectoryFormatError(f"{member}: missing")
        if verify and _sha256(member) != digest:
            raise TrajectoryFormatError(f"{member}: checksum mismatch (corrupt or truncated)")

    def _binary(name, dtype, shape):
        member = path / name
        expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if member.stat().st_size != expected:
            raise TrajectoryFormatError(f"{member}: {member.stat().st_size} bytes, expected {expected}")
        if mmap:
            return np.memmap(member, dtype=dtype, mode="r", shape=shape)
        return np.fromfile(member, dtype=dtype).reshape(shape)

    frames = _binary("frames.bin", np.uint8, (t, 64, 64, 3))
    vectors = None
    if "vecs.bin" in members:
        vectors = np.asarray(_binary("vecs.bin", "<f4", (t, VECTOR_DIM)), dtype=np.float32)
    with open(path / "raw_steps.jsonl") as f:
        try:
            raw_steps = [RawStep.from_record(json.loads(line)) for line in f]
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise TrajectoryFormatError(f"{path}/raw_steps.jsonl: {exc}") from exc
    if len(raw_steps) != t:
        raise TrajectoryFormatError(f"{path}/raw_steps.jsonl: {len(raw_steps)} records, expected {t}")
    labels = None
    if "labels.bin" in members:
        labels = np.asarray(_binary("labels.bin", "<u4", (t,)), dtype=np.int64)
    donors = None
    if "donors.jsonl" in members:
        with open(path / "donors.jsonl") as f:
            donors = [json.loads(line) for line in f]
    traj = Trajectory(meta=meta, frames=frames, vectors=vectors, raw_steps=raw_steps, action_ids=labels, donors=donors)
    traj.validate()
    return traj


class DemoSet:
    """A dataset root directory with a manifest of trajectory subdirectories."""

    def __init__(self, root, manifest: Dict[str, Any], stats: Optional[NormStats] = None):
        self.root = Path(root)
        self.manifest = manifest
        self.stats = stats

    @classmethod
    def create(cls, root, kind: str, task: str, action_set_hash: Optional[str] = None) -> "DemoSet":
        root = Path(root)
        if root.exists() and any(root.iterdir()):
            raise FileExistsError(f"{root} exists and is not empty")
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "task": task,
            "encoder_hash": ENCODER_HASH,
            "action_set_hash": action_set_hash,
            "trajectories": [],
        }
        return cls(root, manifest)

    @classmethod
    def open(cls, root) -> "DemoSet":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"{path}: no dataset manifest")
        manifest = json.loads(path.read_text())
        stats = None
        if (root / "stats.json").exists():
            stats = NormStats.from_json((root / "stats.json").read_text())
        return cls(root, manifest, stats)

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def task(self) -> str:
        return self.manifest["task"]

    @property
    def names(self) -> List[str]:
        return [t["name"] for t in self.manifest["trajectories"]]

    def __len__(self) -> int:
        return len(self.manifest["trajectories"])

    def add(self, traj: Trajectory, name: str) -> None:
        try:
            write_trajectory(self.root / name, traj)
        except OSError as exc:
            raise OSError(f"writing trajectory {self.root / name}: {exc}") from exc
        entry = {k: traj.meta.get(k) for k in ("task", "seed", "total_reward", "success")}
        entry.update(name=name, length=len(traj))
        self.manifest["trajectories"].append(entry)

    def write_manifest(self, extra: Optional[Dict[str, Any]] = None) -> None:
        if extra:
            self.manifest.update(extra)
        with open(self.root / "manifest.json", "w") as f:
            json.dump(self.manifest, f, indent=1, sort_keys=True)
        if self.stats is not None:
            (self.root / "stats.json").write_text(self.stats.to_json())

    def load(self, name: str, mmap: bool = False, verify: bool = True) -> Trajectory:
        return read_trajectory(self.root / name, mmap=mmap, verify=verify)

    def __iter__(self) -> Iterator[Trajectory]:
        for name in self.names:
            yield self.load(name)


def label_trajectory(raw_steps: Sequence[RawStep], action_set: Optional[ActionSet] = None) -> np.ndarray:
    action_set = action_set or compile_action_set()
    cams = label_camera_array([s.yaw_delta for s in raw_steps], [s.pitch_delta for s in raw_steps])
    return np.array([encode_step(raw_steps, t, action_set, cams[t]) for t in range(len(raw_steps))], dtype=np.int64)


def filter_and_label(
    demoset_in: DemoSet,
    out_root,
    action_set: Optional[ActionSet] = None,
    horizon: Optional[int] = None,
) -> DemoSet:
    """Keep successful trajectories, label every step, and drop no-op steps.

    A trajectory is kept when it reached the task goal within ``horizon`` steps
    (inclusive).  Normalization statistics are computed on the retained states.
    """
    action_set = action_set or compile_action_set()
    out = DemoSet.create(out_root, kind="processed", task=demoset_in.task, action_set_hash=action_set.hash)
    retained_vectors = []
    dropped_steps = 0
    for name in demoset_in.names:
        traj = demoset_in.load(name)
        if not traj.meta.get("success") or (horizon is not None and len(traj) > horizon):
            logger.info("excluding %s (success=%s, length=%d)", name, traj.meta.get("success"), len(traj))
            continue
        labels = label_trajectory(traj.raw_steps, action_set)
        keep = np.flatnonzero(labels != action_set.noop_id)
        dropped_steps += len(labels) - len(keep)
        if len(keep) == 0:
            continue
        vectors = traj.vectors[keep] if traj.vectors is not None else None
        if vectors is not None:
            retained_vectors.append(vectors)
        meta = dict(traj.meta)
        meta.pop("members", None)
        meta.update(source=name, kept_steps=keep.tolist())
        out.add(
            Trajectory(
                meta=meta,
                frames=traj.frames[keep],
                vectors=vectors,
                raw_steps=[traj.raw_steps[i] for i in keep],
                action_ids=labels[keep],
            ),
            name=name,
        )
    if len(out) == 0:
        shutil.rmtree(out.root, ignore_errors=True)
        raise ValueError(f"no trajectory in {demoset_in.root} survived filtering")
    out.stats = compute_norm_stats(retained_vectors) if retained_vectors else NormStats()
    out.write_manifest(extra={"source": str(demoset_in.root), "dropped_noop_steps": dropped_steps})
    return out


def fuse_treechop(treechop_set: DemoSet, iron_set: DemoSet, out_root, seed: int) -> DemoSet:
    """Give every Treechop state the inventory vector of an early ObtainIronPickaxe state.

    Donors are drawn uniformly (with replacement, seeded) from iron states whose
    cumulative episode reward before the state is below 2.
    """
    pool_vectors, pool_ids = [], []
    for name in iron_set.names:
        traj = iron_set.load(name)
        if traj.vectors is None:
            continue
        before = np.concatenate([[0.0], np.cumsum(traj.rewards)[:-1]])
        ok = np.flatnonzero(before < 2)
        pool_vectors.append(traj.vectors[ok])
        pool_ids += [(name, int(i), float(before[i])) for i in ok]
    if not pool_ids:
        raise ValueError("no eligible donor states (cumulative reward < 2) in the iron dataset")
    pool = np.concatenate(pool_vectors)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 2]))
    out = DemoSet.create(out_root, kind="processed", task="treechop", action_set_hash=treechop_set.manifest["action_set_hash"])
    for name in treechop_set.names:
        traj = treechop_set.load(name)
        picks = rng.integers(0, len(pool_ids), size=len(traj))
        meta = dict(traj.meta)
        meta.pop("members", None)
        meta["fused_from"] = str(iron_set.root)
        donors = [
            {"trajectory": pool_ids[i][0], "step": pool_ids[i][1], "cumulative_reward": pool_ids[i][2]}
            for i in picks
        ]
        out.add(
            Trajectory(meta=meta, frames=traj.frames, vectors=pool[picks], raw_steps=traj.raw_steps,
                       action_ids=traj.action_ids, donors=donors),
            name=name,
        )
    out.stats = iron_set.stats
    out.write_manifest(extra={"source": str(treechop_set.root), "donor_seed": seed})
    return out


# ---------------------------------------------------------------- sampling


@dataclass
class AugmentConfig:
    flip: bool = True
    flip_prob: float = 0.5
    brightness: bool = False
    contrast: bool = False
    sharpness: bool = False
    posterize: bool = False
    rectangle: bool = False

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "AugmentConfig":
        cfg = cls(flip=False)
        for n in names:
            if not hasattr(cfg, n) or n == "flip_prob":
                raise ValueError(f"unknown augmentation {n!r}")
            setattr(cfg, n, True)
        return cfg


def flip_frames(frames: np.ndarray) -> np.ndarray:
    """Mirror frames left-right (last-but-one axis of ...HWC)."""
    return frames[..., ::-1, :]


def _blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(img, dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return acc / 9.0


def augment_frame(frame: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Photometric augmentations, applied after the flip."""
    if not (cfg.brightness or cfg.contrast or cfg.sharpness or cfg.posterize or cfg.rectangle):
        return frame
    img = frame.astype(np.float32)
    if cfg.brightness:
        img *= rng.uniform(0.8, 1.25)
    if cfg.contrast:
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = mean + rng.uniform(0.8, 1.25) * (img - mean)
    if cfg.sharpness:
        blurred = _blur3(img)
        img = blurred + rng.uniform(0.5, 1.5) * (img - blurred)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if cfg.posterize:
        img &= np.uint8(0xF0)
    if cfg.rectangle:
        h, w = img.shape[:2]
        area = rng.uniform(0.10, 0.25) * h * w
        aspect = rng.uniform(0.5, 2.0)
        rh = int(min(h, max(1, round(np.sqrt(area * aspect)))))
        rw = int(min(w, max(1, round(area / rh))))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        img[y0 : y0 + rh, x0 : x0 + rw] = 128
    return img


def n_step_targets(rewards: np.ndarray, n: int, gamma: float):
    """Per-step n-step return, index of the n-th next state, and terminal flag."""
    t_len = len(rewards)
    returns = np.zeros(t_len, dtype=np.float64)
    steps = np.zeros(t_len, dtype=np.int64)
    for t in range(t_len):
        stop = min(t + n, t_len)
        k = np.arange(stop - t)
        returns[t] = float(np.sum(rewards[t:stop] * gamma**k))
        steps[t] = stop - t
    next_index = np.arange(t_len) + n
    done = next_index >= t_len
    next_index = np.minimum(next_index, t_len - 1)
    return returns, next_index, done, steps


@dataclass
class Batch:
    frames: np.ndarray
    vectors: Optional[np.ndarray]
    actions: np.ndarray
    rewards: np.ndarray
    next_frames: np.ndarray
    next_vectors: Optional[np.ndarray]
    n_step_returns: np.ndarray
    dones: np.ndarray
    n_steps: np.ndarray
    flipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


class TrainingData:
    """Labeled steps from one or more processed datasets, indexed for O(1) sampling."""

    def __init__(
        self,
        demosets: Sequence[DemoSet],
        n: int = 10,
        gamma: float = 0.99,
        names: Optional[Sequence[Sequence[str]]] = None,
        action_set: Optional[ActionSet] = None,
    ):
        self.action_set = action_set or compile_action_set()
        self.n, self.gamma = n, gamma
        self.frames, self.vectors, self.labels, self.rewards = [], [], [], []
        self.returns, self.next_index, self.done, self.steps = [], [], [], []
        self.traj_names = []
        has_vec = None
        stats = None
        for k, ds in enumerate(demosets):
            if ds.kind != "processed":
                raise ValueError(f"{ds.root} is not a processed dataset")
            if ds.manifest.get("action_set_hash") != self.action_set.hash:
                raise ValueError(f"{ds.root} was labeled with a different action catalog")
            stats = stats or ds.stats
            for name in (names[k] if names is not None else ds.names):
                traj = ds.load(name, mmap=True, verify=False)
                if has_vec is None:
                    has_vec = traj.vectors is not None
                if has_vec != (traj.vectors is not None):
                    raise ValueError("cannot mix image-only and vector trajectories; fuse Treechop data first")
                self.frames.append(traj.frames)
                self.vectors.append(traj.vectors)
                self.labels.append(traj.action_ids)
                r = traj.rewards
                self.rewards.append(r)
                ret, nxt, done, steps = n_step_targets(r, n, gamma)
                self.returns.append(ret)
                self.next_index.append(nxt)
                self.done.append(done)
                self.steps.append(steps)
                self.traj_names.append(f"{ds.root.name}/{name}")
        if not self.frames:
            raise ValueError("no trajectories to train on")
        self.has_vectors = bool(has_vec)
        self.stats = stats or NormStats()
        lengths = np.array([len(l) for l in self.labels])
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.size = int(self.offsets[-1])

    def __len__(self) -> int:
        return self.size

    def locate(self, flat: np.ndarray):
        traj = np.searchsorted(self.offsets, flat, side="right") - 1
        return traj, flat - self.offsets[traj]

    def sample_batch(
        self, batch_size: int, rng: np.random.Generator, augment: Optional[AugmentConfig] = None
    ) -> Batch:
        return sample_batch(self, batch_size, rng, augment)


def sample_batch(
    data: TrainingData, batch_size: int, rng: np.random.Generator, augment: Optional[AugmentConfig] = None
) -> Batch:
    """Uniform sample over all retained steps with flip and optional augmentations."""
    augment = augment or AugmentConfig()
    if batch_size > len(data):
        logger.warning("batch_size %d exceeds dataset size %d; sampling with replacement", batch_size, len(data))
    flat = rng.integers(0, len(data), size=batch_size)
    traj_idx, t_idx = data.locate(flat)
    frames = np.empty((batch_size, 64, 64, 3), dtype=np.uint8)
    next_frames = np.empty_like(frames)
    vectors = np.empty((batch_size, VECTOR_DIM), dtype=np.float32) if data.has_vectors else None
    next_vectors = np.empty_like(vectors) if data.has_vectors else None
    actions = np.empty(batch_size, dtype=np.int64)
    rewards = np.empty(batch_size, dtype=np.float64)
    returns = np.empty(batch_size, dtype=np.float64)
    dones = np.empty(batch_size, dtype=bool)
    steps = np.empty(batch_size, dtype=np.int64)
    flipped = np.zeros(batch_size, dtype=bool)
    for b, (i, t) in enumerate(zip(traj_idx, t_idx)):
        nt = data.next_index[i][t]
        f, nf = data.frames[i][t], data.frames[i][nt]
        a = int(data.labels[i][t])
        if augment.flip and rng.random() < augment.flip_prob:
            f, nf = flip_frames(f), flip_frames(nf)
            a = int(data.action_set.flip_map[a])
            flipped[b] = True
        frames[b] = augment_frame(np.asarray(f), augment, rng)
        next_frames[b] = augment_frame(np.asarray(nf), augment, rng)
        if vectors is not None:
            vectors[b] = data.vectors[i][t]
            next_vectors[b] = data.vectors[i][nt]
        actions[b] = a
        rewards[b] = data.rewards[i][t]
        returns[b] = data.returns[i][t]
        dones[b] = data.done[i][t]
        steps[b] = data.steps[i][t]
    return Batch(frames, vectors, actions, rewards, next_frames, next_vectors, returns, dones, steps, flipped)
