"""Policy wrappers, the snapshot evaluation protocol, and report/plot emission.

Protocol: every run saves several snapshots; each snapshot is scored by its
mean return over ``E`` seeded episodes; a run's score is its best snapshot's
mean; the report gives the mean and standard deviation over run scores.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from scipy import stats as sstats

from craftbench import world as cw
from craftbench.actions import DEFAULT_CAMERA_NOISE, compile_action_set, decode
from craftbench.encoding import NormStats
from craftbench.learn import TrainRun, frames_to_tensor, vectors_to_tensor
from craftbench.nn import PolicyNetwork, load_snapshot

logger = logging.getLogger(__name__)

MODES = ("sample", "argmax", "greedy_q")
REPORT_VERSION = 1


class CatalogMismatchError(ValueError):
    """A snapshot was trained against a different action catalog."""


# ------------------------------------------------------------------- policies
def act(outputs: np.ndarray, mode: str, rng: Optional[np.random.Generator] = None) -> int:
    """Pick an ActionId from one row of action scores.

    ``sample`` draws from ``softmax(outputs)``; ``argmax`` and ``greedy_q``
    return the maximizer, ties going to the lowest index.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim != 1:
        raise ValueError(f"expected one row of scores, got shape {outputs.shape}")
    if mode in ("argmax", "greedy_q"):
        return int(np.argmax(outputs))
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if rng is None:
        raise ValueError("sample mode needs an rng")
    z = outputs - outputs.max()
    p = np.exp(z)
    p /= p.sum()
    # inverse-CDF draw: one uniform per call keeps rng consumption fixed
    idx = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    return min(idx, len(p) - 1)


# ----------------------------------------------------------------- evaluation
@dataclass
class SnapshotResult:
    mean: float
    std: float
    returns: List[float]
    lengths: List[int]


def _snapshot_net(snapshot) -> tuple:
    if isinstance(snapshot, (str, Path)):
        net, header = load_snapshot(snapshot)
    else:
        net, header = snapshot
    extra = header.get("extra", {})
    expected = compile_action_set().hash
    if extra.get("action_set_hash", expected) != expected:
        raise CatalogMismatchError(f"snapshot catalog {extra.get('action_set_hash')} != current {expected}")
    stats = NormStats(means=extra["stats"]["means"]) if extra.get("stats") else NormStats()
    return net, stats


def evaluate_snapshot(
    snapshot: Union[str, Path, tuple],
    task: str,
    episodes: int = 100,
    mode: str = "sample",
    seed: int = 0,
    world_config: Optional[cw.WorldConfig] = None,
    noise_std: float = DEFAULT_CAMERA_NOISE,
    max_batch: int = 64,
) -> SnapshotResult:
    """Roll out ``episodes`` seeded episodes and return per-episode totals.

    Episode ``i`` uses world seed ``episode_seed(seed, i)`` and its own rng for
    sampling and camera noise, so results do not depend on batching.  Episodes
    advance in lockstep and share one batched forward pass per step.

    ``snapshot`` is a snapshot path or a ``(network, header)`` pair.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    net, stats = _snapshot_net(snapshot)
    net.eval()
    action_set = compile_action_set()
    config = world_config or cw.WorldConfig()
    returns = [0.0] * episodes
    lengths = [0] * episodes
    for lo in range(0, episodes, max_batch):
        idx = list(range(lo, min(lo + max_batch, episodes)))
        worlds, obs, rngs = {}, {}, {}
        for i in idx:
            try:
                worlds[i], obs[i] = cw.reset(task, cw.episode_seed(seed, i), config)
            except cw.WorldGenerationError as exc:
                logger.warning("episode %d: %s; scoring 0", i, exc)
                continue
            rngs[i] = np.random.default_rng(np.random.SeedSequence([seed, i, 17]))
        active = sorted(worlds)
        while active:
            frames = np.stack([obs[i].frame for i in active])
            vectors = None
            if net.has_vector_head:
                if any(obs[i].vector is None for i in active):
                    raise ValueError(f"network needs inventory vectors but task {task!r} provides none")
                vectors = np.stack([obs[i].vector for i in active])
            with torch.no_grad():
                scores = net(frames_to_tensor(frames), vectors_to_tensor(vectors, stats)).numpy()
            still = []
            for row, i in enumerate(active):
                a = act(scores[row], mode, rngs[i])
                env_action = decode(a, rngs[i], action_set, noise_std)
                _, obs[i], r, done = cw.step(worlds[i], env_action)
                returns[i] += r
                lengths[i] += 1
                if not done:
                    still.append(i)
            active = still
    arr = np.array(returns, dtype=np.float64)
    return SnapshotResult(float(arr.mean()), float(arr.std()), [float(r) for r in returns], lengths)


# ------------------------------------------------------------------- protocol
@dataclass
class RunResult:
    run: str
    snapshot_steps: List[int]
    snapshot_means: List[float]
    snapshot_stds: List[float]
    best_index: int
    score: float


@dataclass
class EvalReport:
    """Per-run snapshot tables plus the aggregate protocol statistics."""

    task: str
    mode: str
    episodes: int
    seed: int
    runs: List[RunResult]
    mean_score: float
    std_score: float
    best_so_far: List[float]
    best_run: int
    best_snapshot: int
    best_returns: List[float]
    histogram_edges: List[float]
    histogram_counts: List[int]
    format_version: int = REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        data["runs"] = [RunResult(**r) for r in data["runs"]]
        return cls(**data)


def best_so_far(means: Sequence[float]) -> List[float]:
    """Running maximum, e.g. [3, 7, 5] -> [3, 7, 7]."""
    return [float(x) for x in np.maximum.accumulate(np.asarray(means, dtype=np.float64))]


def aggregate(
    tables: Sequence[Sequence[float]],
    best_returns: Optional[Sequence[float]] = None,
    task: str = "",
    mode: str = "",
    episodes: int = 0,
    seed: int = 0,
    run_names: Optional[Sequence[str]] = None,
    steps: Optional[Sequence[Sequence[int]]] = None,
    stds: Optional[Sequence[Sequence[float]]] = None,
) -> EvalReport:
    """Apply the protocol to per-run snapshot mean returns.

    Run score = max over its snapshot means; the report's mean/std are over the
    run scores (population std).  The best-so-far curve averages each run's
    running maximum over runs truncated to the shortest run.
    """
    if not tables or any(len(t) == 0 for t in tables):
        raise ValueError("every run needs at least one snapshot")
    runs = []
    for k, means in enumerate(tables):
        means = [float(m) for m in means]
        best = int(np.argmax(means))
        runs.append(
            RunResult(
                run=run_names[k] if run_names else f"run_{k}",
                snapshot_steps=list(steps[k]) if steps else list(range(1, len(means) + 1)),
                snapshot_means=means,
                snapshot_stds=list(stds[k]) if stds else [0.0] * len(means),
                best_index=best,
                score=means[best],
            )
        )
    scores = np.array([r.score for r in runs])
    depth = min(len(t) for t in tables)
    curve = np.mean([best_so_far(t[:depth]) for t in tables], axis=0)
    best_run = int(np.argmax(scores))
    best_returns = [float(x) for x in (best_returns or [])]
    if best_returns:
        counts, edges = np.histogram(best_returns, bins=min(20, max(1, len(set(best_returns)))))
    else:
        counts, edges = np.zeros(0, dtype=int), np.zeros(0)
    return EvalReport(
        task=task,
        mode=mode,
        episodes=episodes,
        seed=seed,
        runs=runs,
        mean_score=float(scores.mean()),
        std_score=float(scores.std()),
        best_so_far=[float(c) for c in curve],
        best_run=best_run,
        best_snapshot=runs[best_run].best_index,
        best_returns=best_returns,
        histogram_edges=[float(e) for e in edges],
        histogram_counts=[int(c) for c in counts],
    )


def run_protocol(
    run_dirs: Sequence[Union[str, Path]],
    task: str,
    episodes: int = 100,
    mode: str = "sample",
    seed: int = 0,
    world_config: Optional[cw.WorldConfig] = None,
    snapshots: Optional[Sequence[int]] = None,
    noise_std: float = DEFAULT_CAMERA_NOISE,
) -> EvalReport:
    """Evaluate every snapshot of every run and aggregate with :func:`aggregate`.

    ``snapshots`` optionally restricts evaluation to the given 1-based snapshot
    numbers.  All runs must share the current action catalog.
    """
    if not run_dirs:
        raise ValueError("need at least one run directory")
    expected = compile_action_set().hash
    tables, stds, steps, names, all_returns = [], [], [], [], []
    for d in run_dirs:
        run = TrainRun.open(d)
        paths = run.snapshots
        if snapshots is not None:
            paths = [p for p in paths if int(p.stem.split("_")[1]) in set(snapshots)]
        means, sds, st, rets = [], [], [], []
        for p in paths:
            net, header = load_snapshot(p)
            if header.get("extra", {}).get("action_set_hash") != expected:
                raise CatalogMismatchError(f"{p}: trained against a different action catalog")
            res = evaluate_snapshot((net, header), task, episodes, mode, seed, world_config, noise_std)
            logger.info("%s: mean %.2f std %.2f", p, res.mean, res.std)
            means.append(res.mean)
            sds.append(res.std)
            st.append(int(header["extra"].get("step", 0)))
            rets.append(res.returns)
        tables.append(means)
        stds.append(sds)
        steps.append(st)
        names.append(str(d))
        all_returns.append(rets)
    scores = [max(t) for t in tables]
    b = int(np.argmax(scores))
    best_returns = all_returns[b][int(np.argmax(tables[b]))]
    return aggregate(tables, best_returns, task, mode, episodes, seed, names, steps, stds)


# ------------------------------------------------------ loss/return coupling
def _corr(x: np.ndarray, y: np.ndarray, kind: str) -> Optional[float]:
    mask = np.isfinite(x) & np.isfinite(y)
    x, y = x[mask], y[mask]
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    fn = sstats.pearsonr if kind == "pearson" else sstats.spearmanr
    return float(fn(x, y)[0])


def correlation_summary(train_loss, test_loss, returns) -> Dict[str, Optional[float]]:
    """Pearson and Spearman coefficients of each loss against return (None = n/a)."""
    tr, te, ret = (np.asarray(v, dtype=np.float64) for v in (train_loss, test_loss, returns))
    return {
        "pearson_train": _corr(tr, ret, "pearson"),
        "spearman_train": _corr(tr, ret, "spearman"),
        "pearson_test": _corr(te, ret, "pearson"),
        "spearman_test": _corr(te, ret, "spearman"),
    }


def loss_return_report(run_dir: Union[str, Path], result: RunResult) -> Dict:
    """Align each snapshot's return with the logged losses at its step."""
    run = TrainRun.open(run_dir)
    log = {int(row["step"]): row for row in run.read_log()}
    logged = np.array(sorted(log))
    rows = []
    for step, ret in zip(result.snapshot_steps, result.snapshot_means):
        nearest = int(logged[np.argmin(np.abs(logged - step))])
        rows.append(
            {
                "step": step,
                "train_loss": log[nearest]["train_loss"],
                "test_loss": log[nearest]["test_loss"],
                "return": ret,
            }
        )
    summary = correlation_summary([r["train_loss"] for r in rows], [r["test_loss"] for r in rows], [r["return"] for r in rows])
    return {"run": str(run_dir), "rows": rows, "correlations": summary}


def format_correlation(value: Optional[float]) -> str:
    return "n/a" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:+.3f}"


# ---------------------------------------------------------------------- plots
def write_plots(report: EvalReport, out_dir: Union[str, Path], loss_tables: Optional[List[Dict]] = None) -> List[Path]:
    """Emit CSV and SVG files for the best-so-far curve, histogram and loss/return overlay."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "craftbench"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    meta = {"Date": None}

    with open(out / "best_so_far.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["snapshot", "mean_best_return"])
        for k, v in enumerate(report.best_so_far, start=1):
            w.writerow([k, repr(v)])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(report.best_so_far) + 1), report.best_so_far, marker="o")
    ax.set_xlabel("snapshot")
    ax.set_ylabel("best return so far (mean over runs)")
    ax.set_title(f"{report.task} ({report.mode})")
    fig.tight_layout()
    fig.savefig(out / "best_so_far.svg", metadata=meta)
    plt.close(fig)
    written += [out / "best_so_far.csv", out / "best_so_far.svg"]

    with open(out / "histogram.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(report.histogram_edges[:-1], report.histogram_edges[1:], report.histogram_counts):
            w.writerow([repr(lo), repr(hi), c])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(report.best_returns, bins=report.histogram_edges or 10)
    ax.set_xlabel("episode return (best policy)")
    ax.set_ylabel("episodes")
    fig.tight_layout()
    fig.savefig(out / "histogram.svg", metadata=meta)
    plt.close(fig)
    written += [out / "histogram.csv", out / "histogram.svg"]

    for k, table in enumerate(loss_tables or []):
        rows = table["rows"]
        with open(out / f"loss_return_{k}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "train_loss", "test_loss", "return"])
            w.writeheader()
            w.writerows(rows)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["train_loss"] for r in rows], label="train loss")
        ax.plot(steps, [r["test_loss"] for r in rows], label="test loss")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(steps, [r["return"] for r in rows], color="k", marker="o", label="return")
        ax2.set_ylabel("mean return")
        ax.legend(loc="upper left")
        fig.tight_layout()
        fig.savefig(out / f"loss_return_{k}.svg", metadata=meta)
        plt.close(fig)
        written += [out / f"loss_return_{k}.csv", out / f"loss_return_{k}.svg"]
    return written
