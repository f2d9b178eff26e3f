"""Acceptance suite.

Each test checks one numbered criterion at its stated tolerance and records a
PASS or FAIL line, which pytest prints in its terminal summary.

Criteria 7 and 8 train and evaluate real policies; on one CPU core criterion 7
takes about 50 min and criterion 8 about 40 min.  Set ``CRAFTBENCH_ACCEPT_DIR``
to keep their artifacts.
"""

import json
import math
import os
import shutil
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import craftbench.eval as ev
from craftbench import world as cw
from craftbench.actions import CAMERA_ACTIONS, CONFLICTS, compile_action_set, label_camera_array, raw_movement_combinations
from craftbench.cli import evaluate_runs, process_datasets
from craftbench.encoding import FLOAT_ITEMS, FLOAT_START, MULTI_HOT_ITEMS, NormStats, compute_norm_stats, encode_vector
from craftbench.expert import expert_returns, generate_demos
from craftbench.learn import TrainConfig, ce_loss, margin_loss, train
from craftbench.nn import ARCHS, build_network, grad_check, save_snapshot
from oracles import margin_zero_condition, oracle_camera, reference_encoder

GOLDEN = Path(__file__).parent / "golden" / "actions.json"
EVAL_EPISODES = 50
EVAL_SEED = 1000
RUN_SEEDS = (0, 1, 2)

# criterion 7: CE on Treechop, DeepImpala at quarter width with flip augmentation
TC_DEMOS, TC_DEMO_SEED, TC_STEPS = 200, 7, 12_000
# criterion 8: CE on ObtainIronPickaxe with and without fused Treechop data
IRON_DEMOS, IRON_DEMO_SEED, IRON_STEPS, IRON_ARCH = 500, 8, 20_000, "dqn"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    keep = os.environ.get("CRAFTBENCH_ACCEPT_DIR")
    if not keep:
        return tmp_path_factory.mktemp("acceptance")
    root = Path(keep)
    shutil.rmtree(root, ignore_errors=True)
    root.mkdir(parents=True)
    return root


def eval_seeds():
    return [cw.episode_seed(EVAL_SEED, i) for i in range(EVAL_EPISODES)]


# --------------------------------------------------------------- criterion 1
def test_c01_action_catalog(record_criterion):
    compile_action_set.cache_clear()
    t0 = time.perf_counter()
    aset = compile_action_set()
    elapsed = time.perf_counter() - t0
    raw = len(raw_movement_combinations())
    golden = GOLDEN.read_text() == aset.to_json()
    bad = []
    for d in aset.entries:
        s = d.sub_actions
        if d.is_item:
            if s:
                bad.append(d)
            continue
        if "sneak" in s or len(s) > 3 or sum(c in s for c in CAMERA_ACTIONS) > 1:
            bad.append(d)
        if any(a in s and b in s for a, b in CONFLICTS):
            bad.append(d)
    ok = (raw, aset.count_movement, len(aset)) == (1280, 112, 130) and golden and not bad and elapsed < 1.0
    record_criterion(
        1, ok,
        f"raw={raw} movement={aset.count_movement} total={len(aset)} golden={golden} "
        f"invariant_violations={len(bad)} time={elapsed:.3f}s",
    )
    assert ok


# --------------------------------------------------------------- criterion 2
def test_c02_encoder(record_criterion):
    rng = np.random.default_rng(2)
    names = sorted({n for n, _ in MULTI_HOT_ITEMS} | set(FLOAT_ITEMS))
    hands = ("none", "wooden_pickaxe", "stone_pickaxe", "iron_pickaxe")
    mismatches = onehot = saturation = 0
    raw_vectors = []
    t0 = time.perf_counter()
    for _ in range(10_000):
        inv = {n: int(rng.integers(0, 100)) for n in names if rng.random() < 0.5}
        hand = hands[rng.integers(0, 4)]
        means = {n: float(1.0 + rng.exponential(5)) for n in FLOAT_ITEMS}
        got = encode_vector(inv, hand, NormStats(means))
        want = reference_encoder(inv, hand, means)
        mismatches += got.shape != (187,) or not np.allclose(got, want, rtol=1e-6, atol=0)
        onehot += got[:4].sum() != 1.0
        saturation += not set(np.unique(got[4:FLOAT_START])) <= {0.0, 1.0}
        raw_vectors.append(encode_vector(inv, hand))
    # floor: means below 1 are raised to 1
    raw_vectors = np.stack(raw_vectors)
    raw_vectors[:, FLOAT_START:] *= rng.random((len(raw_vectors), 1)) < 0.01
    stats = compute_norm_stats(raw_vectors)
    expect = np.maximum(raw_vectors[:, FLOAT_START:].astype(np.float64).mean(axis=0), 1.0)
    floor_ok = np.allclose(stats.as_array(), expect, rtol=1e-6) and min(stats.means.values()) >= 1.0
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and onehot == 0 and saturation == 0 and floor_ok and elapsed < 5.0
    record_criterion(
        2, ok,
        f"dim=187 mismatches={mismatches} onehot_violations={onehot} saturation_violations={saturation} "
        f"floor_ok={floor_ok} time={elapsed:.2f}s",
    )
    assert ok


# --------------------------------------------------------------- criterion 3
def test_c03_camera_labeling(record_criterion):
    rng = np.random.default_rng(3)
    values = np.array([-15.0, -11.25, -7.5, -5.0, -3.75, 0.0, 3.75, 5.0, 7.5, 11.25, 15.0])
    mismatches = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        yaw = rng.choice(values, size=n) + rng.choice([0.0, 0.5], size=n) * rng.random(n)
        pitch = rng.choice(values, size=n)
        got = label_camera_array(yaw, pitch)
        want = [oracle_camera(list(yaw), list(pitch), t) for t in range(n)]
        mismatches += got != want
    record_criterion(3, mismatches == 0, f"sequences=10000 mismatches={mismatches}")
    assert mismatches == 0


# --------------------------------------------------------------- criterion 4
def test_c04_losses(record_criterion):
    f = lambda *v: torch.tensor([v], dtype=torch.float64)  # noqa: E731
    a0 = torch.tensor([0])
    examples = [
        margin_loss(f(3.0, 1.0), a0, 0.5).item() - 0.0,
        margin_loss(f(1.0, 3.0), a0, 0.5).item() - 2.5,
        margin_loss(f(2.0, 1.8), a0, 0.5).item() - 0.3,
        ce_loss(torch.zeros(1, 130), torch.tensor([5])).item() - math.log(130),
    ]
    worst = max(abs(e) for e in examples)
    rng = np.random.default_rng(4)
    wrong = 0
    for _ in range(10_000):
        k = int(rng.integers(2, 9))
        scores = rng.integers(-16, 17, size=k) / 8.0
        e = int(rng.integers(0, k))
        b = float(rng.choice([0.125, 0.25, 0.5, 0.8, 1.0]))
        loss = margin_loss(torch.from_numpy(scores[None]), torch.tensor([e]), b).item()
        wrong += (loss == 0.0) != margin_zero_condition(scores, e, b)
    ok = worst <= 1e-6 and wrong == 0
    record_criterion(4, ok, f"max_example_error={worst:.2e} zero_iff_violations={wrong}/10000")
    assert ok


# --------------------------------------------------------------- criterion 5
@pytest.mark.xfail(
    strict=True,
    reason="float32 central differences at eps=1e-3 cannot reach 1e-3 per-element relative error; see README",
)
def test_c05_gradient_check_float32(record_criterion):
    worst = {}
    for arch in ARCHS:
        net = build_network(arch, width_divisor=4, seed=1)
        g = torch.Generator().manual_seed(2)
        x = torch.rand(2, 3, 64, 64, generator=g)
        v = torch.rand(2, 187, generator=g)
        y = torch.tensor([1, 7])
        res = grad_check(net, lambda: F.cross_entropy(net(x, v), y), num_params=1000, eps=1e-3, seed=0)
        assert res.checked == 1000
        worst[arch] = res.max_rel_error
    ok = all(e < 1e-3 for e in worst.values())
    record_criterion(5, ok, "max_rel_error " + " ".join(f"{k}={v:.3g}" for k, v in worst.items()))
    assert ok


# --------------------------------------------------------------- criterion 6
def test_c06_fixup_identity(record_criterion):
    g = torch.Generator().manual_seed(6)
    nonzero = checked = 0
    for arch in ("deep_impala", "double_deep_impala"):
        for seed in range(3):
            for block in build_network(arch, width_divisor=4, seed=seed).fixup_blocks():
                c = block.conv1.weight.shape[1]
                x = torch.randn(4, c, 16, 16, generator=g) * 10
                with torch.no_grad():
                    nonzero += int(torch.count_nonzero(block.residual(x)))
                checked += 1
    record_criterion(6, nonzero == 0, f"blocks={checked} nonzero_residual_outputs={nonzero}")
    assert checked > 0 and nonzero == 0


# --------------------------------------------------------------- criterion 9
class _TableEvaluator:
    """Stands in for rollouts: returns a fixed mean per (run, snapshot)."""

    def __init__(self, tables, paths):
        self.lookup = {}
        for r, (table, run_paths) in enumerate(zip(tables, paths)):
            for mean, p in zip(table, run_paths):
                self.lookup[str(p)] = mean
        self.calls = []

    def __call__(self, snapshot, task, episodes, mode, seed, world_config, noise_std, *args, **kwargs):
        net, header = snapshot
        mean = self.lookup[header["extra"]["path"]]
        return ev.SnapshotResult(mean, 0.0, [mean] * episodes, [1] * episodes)


def test_c09_protocol_arithmetic(record_criterion, tmp_path, monkeypatch):
    h = compile_action_set().hash
    runs, paths = [], []
    for r in range(3):
        root = tmp_path / f"run_{r}"
        (root / "snapshots").mkdir(parents=True)
        (root / "config.json").write_text(TrainConfig(arch="dqn", width_divisor=8, steps=5).model_dump_json())
        run_paths = []
        for k in range(1, 6):
            p = root / "snapshots" / f"snap_{k}.bin"
            net = build_network("dqn", vector_dim=0, width_divisor=8, seed=k)
            save_snapshot(net, p, extra={"action_set_hash": h, "step": 100 * k, "stats": None, "path": str(p)})
            run_paths.append(p)
        runs.append(root)
        paths.append(run_paths)

    rng = np.random.default_rng(9)
    errors = 0
    for case in range(100):
        tables = [list(rng.integers(0, 65, size=5).astype(float)) for _ in range(3)]
        if case == 0:
            tables = [[1, 5, 3, 0, 0], [2, 2, 9, 1, 1], [4, 4, 4, 4, 4]]
        monkeypatch.setattr(ev, "evaluate_snapshot", _TableEvaluator(tables, paths))
        rep = ev.run_protocol(runs, "treechop", episodes=3, seed=case)
        scores = [max(t) for t in tables]
        want_best = [t.index(max(t)) for t in tables]
        errors += [r.score for r in rep.runs] != scores
        errors += [r.best_index for r in rep.runs] != want_best
        errors += rep.mean_score != statistics.fmean(scores)
        errors += not math.isclose(rep.std_score, statistics.pstdev(scores), rel_tol=1e-12, abs_tol=1e-12)
        errors += rep.runs[0].snapshot_steps != [100, 200, 300, 400, 500]
        if case == 0:
            errors += (rep.mean_score, rep.best_run) != (6.0, 1)
            errors += not math.isclose(rep.std_score, math.sqrt(14 / 3))
    record_criterion(9, errors == 0, f"synthetic_tables=100 rule_violations={errors}")
    assert errors == 0


# -------------------------------------------------------------- criterion 10
def test_c10_repro_determinism(record_criterion, tmp_path):
    from craftbench.cli import main

    t0 = time.perf_counter()
    codes = [main(["repro", "--out", str(tmp_path / name), "--profile", "smoke", "--seed", "0"]) for name in "ab"]
    elapsed = time.perf_counter() - t0
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    ok = codes == [0, 0] and a == b
    record_criterion(10, ok, f"exit_codes={codes} identical_report_bytes={a == b} time={elapsed:.0f}s")
    assert ok


# ------------------------------------------------------- criteria 7 and 11
@pytest.fixture(scope="module")
def treechop_bc(workdir):
    """Demos, processing, three CE training runs and 50-episode evaluation."""
    t0 = time.perf_counter()
    raw = workdir / "treechop_raw"
    generate_demos("treechop", TC_DEMOS, TC_DEMO_SEED, raw)
    process_datasets(raw, workdir / "treechop")
    runs = []
    for seed in RUN_SEEDS:
        cfg = TrainConfig(
            arch="deep_impala", width_divisor=4, loss="ce", steps=TC_STEPS, seed=seed,
            augment=["flip"], datasets=[str(workdir / "treechop")], snapshot_count=4,
        )
        runs.append(train(cfg, workdir / "runs" / f"treechop_ce_{seed}").root)
    report, _ = evaluate_runs(
        runs, workdir / "eval" / "treechop.json", "treechop", EVAL_EPISODES, "sample", EVAL_SEED,
        cw.WorldConfig(), ev.DEFAULT_CAMERA_NOISE,
    )
    elapsed = time.perf_counter() - t0
    expert = expert_returns("treechop", eval_seeds())
    return {"raw": raw, "runs": runs, "report": report, "elapsed": elapsed, "expert_mean": float(expert.mean())}


@pytest.mark.slow
def test_c07_treechop_behavior_cloning(record_criterion, treechop_bc):
    report = treechop_bc["report"]
    bar = 0.8 * treechop_bc["expert_mean"]
    scores = [r.score for r in report.runs]
    passed_seeds = sum(s >= bar for s in scores)
    in_budget = treechop_bc["elapsed"] <= 2 * 3600
    ok = passed_seeds >= 2 and in_budget
    record_criterion(
        7, ok,
        f"expert_mean={treechop_bc['expert_mean']:.2f} bar={bar:.2f} best_snapshot_means="
        f"{[round(s, 2) for s in scores]} seeds_passing={passed_seeds}/3 steps={TC_STEPS} "
        f"time={treechop_bc['elapsed'] / 60:.1f}min",
    )
    assert ok


def _independent_corr(x, y, rank):
    x, y = np.asarray(x, float), np.asarray(y, float)
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if rank:
        x = np.array([np.mean(np.where(np.sort(x) == v)[0]) for v in x])
        y = np.array([np.mean(np.where(np.sort(y) == v)[0]) for v in y])
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return None
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (x.std() * y.std()))


@pytest.mark.slow
def test_c11_loss_return_report(record_criterion, treechop_bc):
    report = treechop_bc["report"]
    tables = [ev.loss_return_report(run, res) for run, res in zip(treechop_bc["runs"], report.runs)]
    generated = all(len(t["rows"]) == len(r.snapshot_steps) for t, r in zip(tables, report.runs))
    sidecar = json.loads((Path(treechop_bc["runs"][0]).parents[1] / "eval" / "treechop.loss_return.json").read_text())
    generated = generated and len(sidecar) == len(tables)

    rng = np.random.default_rng(11)
    wrong = 0
    fixtures = [
        ([1, 2, 3], [3, 2, 1], [5, 6, 7]),
        ([4, 4, 4], [1, 2, 3], [1, 1, 2]),
        ([1, 2, float("nan"), 4], [2, 1, 3, 5], [0, 1, 2, 3]),
    ]
    for _ in range(200):
        n = int(rng.integers(2, 10))
        fixtures.append(tuple(list(rng.integers(0, 5, size=n).astype(float)) for _ in range(3)))
    for train_loss, test_loss, ret in fixtures:
        got = ev.correlation_summary(train_loss, test_loss, ret)
        for key, loss, rank in (
            ("pearson_train", train_loss, False), ("spearman_train", train_loss, True),
            ("pearson_test", test_loss, False), ("spearman_test", test_loss, True),
        ):
            want = _independent_corr(loss, ret, rank)
            if (want is None) != (got[key] is None) or (want is not None and not math.isclose(got[key], want, abs_tol=1e-9)):
                wrong += 1
    ok = generated and wrong == 0
    rows = "; ".join(
        f"run{k}: pearson_train={ev.format_correlation(t['correlations']['pearson_train'])} "
        f"pearson_test={ev.format_correlation(t['correlations']['pearson_test'])}"
        for k, t in enumerate(tables)
    )
    record_criterion(11, ok, f"tables_generated={generated} fixture_errors={wrong}/{len(fixtures)} [{rows}]")
    assert ok


# --------------------------------------------------------------- criterion 8
@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="desk-scale CE policies stall at the wooden/stone pickaxe stage, far below 60% of the expert; see README",
)
def test_c08_iron_chain_with_fusion(record_criterion, workdir, treechop_bc):
    t0 = time.perf_counter()
    raw = workdir / "iron_raw"
    generate_demos("iron_pickaxe", IRON_DEMOS, IRON_DEMO_SEED, raw)
    result = process_datasets(raw, workdir / "iron", fuse_treechop=treechop_bc["raw"])
    variants = {"iron_ce": [str(workdir / "iron")], "iron_ce_fused": [str(workdir / "iron"), result["fused_treechop"]]}
    reports = {}
    for name, data in variants.items():
        runs = []
        for seed in RUN_SEEDS:
            cfg = TrainConfig(
                arch=IRON_ARCH, width_divisor=4, loss="ce", steps=IRON_STEPS, seed=seed,
                augment=["flip"], datasets=data, snapshot_count=4,
            )
            runs.append(train(cfg, workdir / "runs" / f"{name}_{seed}").root)
        reports[name], _ = evaluate_runs(
            runs, workdir / "eval" / f"{name}.json", "iron_pickaxe", EVAL_EPISODES, "sample", EVAL_SEED,
            cw.WorldConfig(), ev.DEFAULT_CAMERA_NOISE,
        )
    expert = float(expert_returns("iron_pickaxe", eval_seeds()).mean())
    plain, fused = reports["iron_ce"], reports["iron_ce_fused"]
    # the full configuration named by the criterion: 500 demos plus fused Treechop data
    best = max(r.score for r in fused.runs)
    reaches = best >= 0.6 * expert
    directional = fused.mean_score >= plain.mean_score - plain.std_score
    ok = reaches and directional
    record_criterion(
        8, ok,
        f"expert_mean={expert:.1f} bar={0.6 * expert:.1f} best_snapshot={best:.1f} "
        f"unfused={plain.mean_score:.1f}+-{plain.std_score:.1f} fused={fused.mean_score:.1f}+-{fused.std_score:.1f} "
        f"fused_not_worse={directional} time={(time.perf_counter() - t0) / 60:.1f}min",
    )
    assert ok
