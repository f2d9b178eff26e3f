"""Imitation losses, the snapshotting training loop, and a scikit-learn style policy.

Losses work on raw action scores ``f(s, .)`` of shape ``(B, A)``:

* cross-entropy against the expert action (behavior cloning),
* large-margin classification ``max_a [f(s,a) + m(a_E,a)] - f(s,a_E)``
  with ``m = 0`` at the expert action and ``b`` elsewhere,
* n-step TD regression of ``Q(s, a_taken)`` towards
  ``R_n + gamma^n max_a Q_target(s', a)`` (no bootstrap past episode end),
* their DQfD-style sum ``margin + lambda * td``.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from craftbench.actions import compile_action_set
from craftbench.datastore import AugmentConfig, Batch, DemoSet, TrainingData
from craftbench.encoding import FLOAT_START, VECTOR_DIM, NormStats, compute_norm_stats
from craftbench.nn import (
    ARCHS,
    AdamState,
    PolicyNetwork,
    adam_step,
    backward,
    build_network,
    save_snapshot,
)

logger = logging.getLogger(__name__)

LOSSES = ("ce", "margin", "margin_td")


# ------------------------------------------------------------------- losses
def ce_loss(outputs: torch.Tensor, expert_actions: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log softmax(outputs)[a_E]``, stabilized by log-sum-exp."""
    log_z = torch.logsumexp(outputs, dim=1)
    picked = outputs.gather(1, expert_actions.view(-1, 1)).squeeze(1)
    return (log_z - picked).mean()


def margin_loss(outputs: torch.Tensor, expert_actions: torch.Tensor, b: float) -> torch.Tensor:
    """Mean of ``max_a [f(s,a) + m(a_E,a)] - f(s,a_E)``; zero iff a_E wins by at least ``b``."""
    if not b > 0:
        raise ValueError(f"margin b must be positive, got {b}")
    margins = torch.full_like(outputs, float(b))
    margins.scatter_(1, expert_actions.view(-1, 1), 0.0)
    picked = outputs.gather(1, expert_actions.view(-1, 1)).squeeze(1)
    return ((outputs + margins).max(dim=1).values - picked).mean()


def td_targets(
    n_step_returns: torch.Tensor,
    next_q_target: torch.Tensor,
    dones: torch.Tensor,
    n_steps: torch.Tensor,
    gamma: float,
) -> torch.Tensor:
    """``R_n + gamma^k max_a Q_target(s_{t+k}, a)`` with the bootstrap dropped when done.

    ``n_steps`` holds the actual window length ``k`` (shorter than ``n`` near
    the end of a trajectory).
    """
    bootstrap = next_q_target.max(dim=1).values * torch.pow(torch.as_tensor(gamma, dtype=next_q_target.dtype), n_steps)
    return n_step_returns + torch.where(dones, torch.zeros_like(bootstrap), bootstrap)


def td_loss(
    outputs: torch.Tensor,
    actions: torch.Tensor,
    n_step_returns: torch.Tensor,
    next_q_target: torch.Tensor,
    dones: torch.Tensor,
    n_steps: torch.Tensor,
    gamma: float,
) -> torch.Tensor:
    """Mean squared error between ``Q(s, a_taken)`` and the (constant) n-step target."""
    with torch.no_grad():
        target = td_targets(n_step_returns, next_q_target, dones, n_steps, gamma)
    q = outputs.gather(1, actions.view(-1, 1)).squeeze(1)
    return ((q - target) ** 2).mean()


def dqfd_loss(margin: torch.Tensor, td: torch.Tensor, td_weight: float) -> torch.Tensor:
    return margin + td_weight * td


# ------------------------------------------------------------------- config
class TrainConfig(BaseModel):
    """Everything that determines a training run."""

    model_config = ConfigDict(extra="forbid")

    arch: Literal["dqn", "impala", "deep_impala", "double_deep_impala"] = "deep_impala"
    width_divisor: int = Field(1, ge=1)
    loss: Literal["ce", "margin", "margin_td"] = "ce"
    steps: int = Field(3_000_000, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(6.25e-5, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    margin: float = 0.8
    td_weight: float = Field(1.0, ge=0)
    n: int = Field(10, ge=1)
    gamma: float = 0.99
    target_net_period: int = Field(2000, ge=1)
    snapshot_count: int = Field(8, ge=1)
    seed: int = 0
    augment: List[str] = Field(default_factory=lambda: ["flip"])
    datasets: List[str] = Field(default_factory=list)
    test_fraction: float = Field(0.1, ge=0, lt=1)
    test_samples: int = Field(512, ge=1)
    log_every: int = Field(100, ge=1)
    test_every: int = Field(1000, ge=1)
    num_threads: int = Field(1, ge=1)

    @field_validator("margin")
    @classmethod
    def _check_margin(cls, value: float) -> float:
        if not value > 0:
            raise ValueError(f"margin b must be > 0, got {value}")
        return value

    @field_validator("gamma")
    @classmethod
    def _check_gamma(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {value}")
        return value

    @field_validator("augment")
    @classmethod
    def _check_augment(cls, value: List[str]) -> List[str]:
        AugmentConfig.from_names(value)
        return value


def snapshot_steps(steps: int, count: int) -> List[int]:
    """Evenly spaced snapshot steps ending at ``steps`` (e.g. 800, 8 -> 100..800)."""
    return sorted({max(1, round(steps * k / count)) for k in range(1, count + 1)})


# ------------------------------------------------------------ tensor helpers
def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """uint8 NHWC -> float NCHW in [0, 1], laid out channels-last in memory."""
    t = torch.from_numpy(np.ascontiguousarray(frames))
    return t.permute(0, 3, 1, 2).float().div_(255.0)


def vectors_to_tensor(vectors: Optional[np.ndarray], stats: NormStats) -> Optional[torch.Tensor]:
    """Stored raw-count vectors -> normalized float tensor (float block divided by means)."""
    if vectors is None:
        return None
    v = np.array(vectors, dtype=np.float32, copy=True)
    v[:, FLOAT_START:] /= stats.as_array()
    return torch.from_numpy(v)


@dataclass
class LossTerms:
    total: torch.Tensor
    parts: Dict[str, float]


def compute_loss(
    net: PolicyNetwork,
    target_net: Optional[PolicyNetwork],
    batch: Batch,
    stats: NormStats,
    cfg: TrainConfig,
) -> LossTerms:
    frames = frames_to_tensor(batch.frames)
    vectors = vectors_to_tensor(batch.vectors, stats)
    actions = torch.from_numpy(batch.actions).long()
    out = net(frames, vectors)
    if cfg.loss == "ce":
        loss = ce_loss(out, actions)
        return LossTerms(loss, {"ce": loss.item()})
    margin = margin_loss(out, actions, cfg.margin)
    if cfg.loss == "margin":
        return LossTerms(margin, {"margin": margin.item()})
    with torch.no_grad():
        next_q = target_net(frames_to_tensor(batch.next_frames), vectors_to_tensor(batch.next_vectors, stats))
    td = td_loss(
        out,
        actions,
        torch.from_numpy(batch.n_step_returns).float(),
        next_q,
        torch.from_numpy(batch.dones),
        torch.from_numpy(batch.n_steps).float(),
        cfg.gamma,
    )
    total = dqfd_loss(margin, td, cfg.td_weight)
    return LossTerms(total, {"margin": margin.item(), "td": td.item()})


# ------------------------------------------------------------------ training
def split_trajectories(names: Sequence[str], fraction: float, rng: np.random.Generator) -> Tuple[List[str], List[str]]:
    """Hold out ``fraction`` of trajectories (at least one when there are two or more)."""
    names = list(names)
    n_test = int(round(fraction * len(names)))
    if fraction > 0 and len(names) >= 2:
        n_test = max(1, n_test)
    n_test = min(n_test, len(names) - 1)
    order = rng.permutation(len(names))
    test = sorted(names[i] for i in order[:n_test])
    train = sorted(names[i] for i in order[n_test:])
    return train, test


@dataclass
class TrainRun:
    """A finished training run directory."""

    root: Path
    config: TrainConfig
    snapshots: List[Path]

    @classmethod
    def open(cls, root) -> "TrainRun":
        root = Path(root)
        cfg = TrainConfig.model_validate_json((root / "config.json").read_text())
        snaps = sorted((root / "snapshots").glob("snap_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
        if not snaps:
            raise FileNotFoundError(f"{root}: no snapshots")
        return cls(root, cfg, snaps)

    def read_log(self) -> List[Dict[str, float]]:
        with open(self.root / "log.csv") as f:
            return [{k: (float(v) if v not in ("", None) else math.nan) for k, v in row.items()} for row in csv.DictReader(f)]


LOG_FIELDS = ("step", "train_loss", "test_loss", "ce", "margin", "td", "elapsed_s")


def _fixed_batch(data: TrainingData, count: int, seed: int) -> Batch:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    return data.sample_batch(min(count, len(data)), rng, AugmentConfig(flip=False))


def _mean_loss(net, target_net, batch: Batch, stats, cfg, chunk: int = 128) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(batch.actions), chunk):
            sl = slice(lo, lo + chunk)
            sub = Batch(
                batch.frames[sl],
                None if batch.vectors is None else batch.vectors[sl],
                batch.actions[sl],
                batch.rewards[sl],
                batch.next_frames[sl],
                None if batch.next_vectors is None else batch.next_vectors[sl],
                batch.n_step_returns[sl],
                batch.dones[sl],
                batch.n_steps[sl],
            )
            k = len(sub.actions)
            total += compute_loss(net, target_net, sub, stats, cfg).total.item() * k
            count += k
    return total / max(count, 1)


def train(config: TrainConfig, out_dir, datasets: Optional[Sequence[DemoSet]] = None) -> TrainRun:
    """Train a policy on processed datasets and write a run directory.

    The directory gets ``config.json``, ``snapshots/snap_k.bin`` for
    ``k = 1..snapshot_count`` (evenly spaced, the last one at ``steps``) and
    ``log.csv``.  Ten percent of trajectories (``test_fraction``) are held out
    and their loss is logged every ``test_every`` steps.

    Raises:
        FloatingPointError: if the training loss becomes non-finite.
    """
    out = Path(out_dir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.model_dump_json(indent=2))
    torch.set_num_threads(config.num_threads)
    torch.manual_seed(config.seed)

    if datasets is None:
        if not config.datasets:
            raise ValueError("no datasets given")
        datasets = [DemoSet.open(p) for p in config.datasets]
    action_set = compile_action_set()
    split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    splits = [split_trajectories(ds.names, config.test_fraction, split_rng) for ds in datasets]
    train_data = TrainingData(datasets, config.n, config.gamma, [s[0] for s in splits], action_set)
    test_names = [s[1] for s in splits]
    test_data = (
        TrainingData(datasets, config.n, config.gamma, test_names, action_set) if any(test_names) else None
    )
    stats = train_data.stats
    (out / "split.json").write_text(json.dumps({"train": [s[0] for s in splits], "test": test_names}, indent=1))

    vector_dim = VECTOR_DIM if train_data.has_vectors else 0
    net = build_network(config.arch, len(action_set), vector_dim, config.seed, config.width_divisor)
    net = net.to(memory_format=torch.channels_last)
    target_net = copy.deepcopy(net) if config.loss == "margin_td" else None
    adam = AdamState.zeros_like(net)
    augment = AugmentConfig.from_names(config.augment)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    test_batch = _fixed_batch(test_data, config.test_samples, config.seed) if test_data is not None else None

    snaps = snapshot_steps(config.steps, config.snapshot_count)
    snap_paths: List[Path] = []
    extra = {"stats": json.loads(stats.to_json()), "action_set_hash": action_set.hash}
    start = time.perf_counter()
    window: List[Tuple[float, Dict[str, float]]] = []
    with open(out / "log.csv", "w", newline="") as logf:
        writer = csv.DictWriter(logf, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for step in range(1, config.steps + 1):
            if target_net is not None and (step - 1) % config.target_net_period == 0:
                target_net.load_state_dict(net.state_dict())
            batch = train_data.sample_batch(config.batch_size, rng, augment)
            terms = compute_loss(net, target_net, batch, stats, config)
            if not torch.isfinite(terms.total):
                raise FloatingPointError(f"non-finite loss at step {step}: {terms.parts}")
            grads = backward(net, terms.total)
            adam_step(net, grads, adam, config.lr, config.weight_decay)
            window.append((terms.total.item(), terms.parts))

            if step % config.log_every == 0 or step == config.steps:
                row = {"step": step, "train_loss": float(np.mean([w[0] for w in window]))}
                for key in ("ce", "margin", "td"):
                    vals = [w[1][key] for w in window if key in w[1]]
                    row[key] = float(np.mean(vals)) if vals else ""
                row["test_loss"] = ""
                if test_batch is not None and (step % config.test_every == 0 or step == config.steps or step in snaps):
                    row["test_loss"] = _mean_loss(net, target_net, test_batch, stats, config)
                row["elapsed_s"] = round(time.perf_counter() - start, 3)
                writer.writerow(row)
                logf.flush()
                window = []
            if step in snaps:
                path = out / "snapshots" / f"snap_{len(snap_paths) + 1}.bin"
                save_snapshot(net, path, extra={**extra, "step": step})
                snap_paths.append(path)
    return TrainRun(out, config, snap_paths)


# ------------------------------------------------------- estimator interface
class ImitationPolicy(ClassifierMixin, BaseEstimator):
    """Behavior-cloning policy with a scikit-learn interface.

    ``X`` is an array of uint8 frames ``(N, 64, 64, 3)``; inventory vectors,
    when used, are passed as ``vectors=`` (raw counts, normalized internally
    with statistics fitted on the training vectors).  Labels are ActionIds.
    """

    def __init__(
        self,
        arch: str = "deep_impala",
        loss: str = "ce",
        width_divisor: int = 4,
        steps: int = 2000,
        batch_size: int = 32,
        lr: float = 6.25e-5,
        weight_decay: float = 1e-5,
        margin: float = 0.8,
        flip: bool = False,
        seed: int = 0,
    ):
        self.arch = arch
        self.loss = loss
        self.width_divisor = width_divisor
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.margin = margin
        self.flip = flip
        self.seed = seed

    def _validate(self, X, vectors=None):
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1:] != (64, 64, 3) or X.dtype != np.uint8:
            raise ValueError(f"X must be uint8 frames of shape (N, 64, 64, 3), got {X.dtype} {X.shape}")
        if vectors is not None:
            vectors = np.asarray(vectors, dtype=np.float32)
            if vectors.shape != (len(X), VECTOR_DIM):
                raise ValueError(f"vectors must have shape ({len(X)}, {VECTOR_DIM}), got {vectors.shape}")
        return X, vectors

    def fit(self, X, y, vectors=None):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.loss not in ("ce", "margin"):
            raise ValueError("ImitationPolicy supports loss 'ce' or 'margin'")
        X, vectors = self._validate(X, vectors)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (len(X),):
            raise ValueError("y must have one label per frame")
        action_set = compile_action_set()
        if y.min() < 0 or y.max() >= len(action_set):
            raise ValueError(f"labels must be in [0, {len(action_set)})")
        torch.manual_seed(self.seed)
        cfg = TrainConfig(arch=self.arch, loss=self.loss, margin=self.margin, width_divisor=self.width_divisor)
        self.stats_ = NormStats() if vectors is None else compute_norm_stats(vectors)
        self.net_ = build_network(
            self.arch, len(action_set), 0 if vectors is None else VECTOR_DIM, self.seed, self.width_divisor
        ).to(memory_format=torch.channels_last)
        adam = AdamState.zeros_like(self.net_)
        rng = np.random.default_rng(self.seed)
        n = len(X)
        dummy = np.zeros(0)
        self.loss_curve_ = []
        for _ in range(self.steps):
            idx = rng.integers(0, n, size=self.batch_size)
            frames = X[idx]
            labels = y[idx]
            if self.flip:
                flip = rng.random(len(idx)) < 0.5
                frames = frames.copy()
                frames[flip] = frames[flip][:, :, ::-1]
                labels = np.where(flip, action_set.flip_map[labels], labels)
            batch = Batch(frames, None if vectors is None else vectors[idx], labels, dummy, frames, None, dummy, dummy, dummy)
            terms = compute_loss(self.net_, None, batch, self.stats_, cfg)
            adam_step(self.net_, backward(self.net_, terms.total), adam, self.lr, self.weight_decay)
            self.loss_curve_.append(terms.total.item())
        self.classes_ = np.arange(len(action_set))
        self.n_features_in_ = 64 * 64 * 3
        return self

    def decision_function(self, X, vectors=None) -> np.ndarray:
        check_is_fitted(self, "net_")
        X, vectors = self._validate(X, vectors)
        with torch.no_grad():
            out = self.net_(frames_to_tensor(X), vectors_to_tensor(vectors, self.stats_))
        return out.numpy()

    def predict_proba(self, X, vectors=None) -> np.ndarray:
        scores = torch.from_numpy(self.decision_function(X, vectors))
        return torch.softmax(scores, dim=1).numpy()

    def predict(self, X, vectors=None) -> np.ndarray:
        return np.argmax(self.decision_function(X, vectors), axis=1)
