"""``craftbench`` command line: demos, processing, training, evaluation, plots and the full pipeline.

Every command exits 0 on success; failures print ``error [stage]: message``
to stderr and exit with status 2 (bad configuration) or 1 (anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from craftbench.actions import ActionSet, compile_action_set
from craftbench.expert import ExpertConfig, generate_demos
from craftbench.learn import TrainConfig, TrainRun, train
from craftbench.world import WorldConfig

logger = logging.getLogger("craftbench")

CONFIG_VERSION = 1


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.stage = stage
        self.exit_code = exit_code


# -------------------------------------------------------------------- config
class EvalSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    episodes: int = Field(100, ge=1)
    mode: Literal["sample", "argmax", "greedy_q"] = "sample"
    noise_std: float = Field(2.25, ge=0)


class ReproSettings(BaseModel):
    """Sizes for ``craftbench repro``; the defaults are the full desk-scale profile."""

    model_config = ConfigDict(extra="forbid")

    treechop_demos: int = Field(200, ge=1)
    iron_demos: int = Field(500, ge=1)
    runs: int = Field(3, ge=1)
    treechop_steps: int = Field(10_000, ge=1)
    iron_steps: int = Field(10_000, ge=1)
    treechop_arch: str = "deep_impala"
    iron_arch: str = "dqn"
    width_divisor: int = Field(4, ge=1)


class RunConfig(BaseModel):
    """Resolved configuration for any command; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    format_version: Literal[1] = CONFIG_VERSION
    seed: int = 0
    world: WorldConfig = Field(default_factory=WorldConfig)
    expert: ExpertConfig = Field(default_factory=ExpertConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    repro: ReproSettings = Field(default_factory=ReproSettings)


SMOKE = {
    "world": {"horizon": {"treechop": 400, "iron_pickaxe": 1000}, "treechop_goal": 16},
    "eval": {"episodes": 4, "mode": "sample"},
    "repro": {
        "treechop_demos": 4,
        "iron_demos": 6,
        "runs": 3,
        "treechop_steps": 560,
        "iron_steps": 560,
        "treechop_arch": "dqn",
        "iron_arch": "dqn",
        "width_divisor": 8,
    },
    "train": {"batch_size": 16, "snapshot_count": 2, "log_every": 40, "test_every": 140, "test_samples": 64},
}


def _key_path(loc: Sequence[Any]) -> str:
    return ".".join(str(p) for p in loc)


def validation_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = _key_path(err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            parts.append(f"{path}: unknown key")
        else:
            parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def _deep_merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_override(text: str) -> Dict[str, Any]:
    """``a.b.c=value`` -> nested dict; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: Dict[str, Any] = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load_config(
    path: Optional[os.PathLike] = None,
    overrides: Sequence[str] = (),
    base: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Read a JSON config (missing or empty file -> defaults), apply ``key=value`` overrides, validate.

    Raises:
        StageError: stage ``config`` with each offending key path.
    """
    data: Dict[str, Any] = dict(base or {})
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise StageError("config", f"{p}: no such file", 2)
        text = p.read_text().strip()
        if text:
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as exc:
                raise StageError("config", f"{p}: invalid JSON: {exc}", 2) from exc
            if not isinstance(loaded, dict):
                raise StageError("config", f"{p}: top level must be an object", 2)
            data = _deep_merge(data, loaded)
    try:
        for o in overrides:
            data = _deep_merge(data, _parse_override(o))
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise StageError("config", validation_message(exc), 2) from exc
    except ValueError as exc:
        raise StageError("config", str(exc), 2) from exc


def write_resolved(cfg: RunConfig, out_dir: os.PathLike, name: str = "run_config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(cfg.model_dump_json(indent=2) + "\n")
    return path


# ------------------------------------------------------------------ commands
def _stage(name: str):
    """Turn any exception inside a command into a StageError tagged ``name``."""

    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is None or isinstance(exc, StageError):
                return False
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc

    return _Guard()


def cmd_gen_demos(args) -> Dict[str, Any]:
    cfg = load_config(args.config, args.set)
    expert = cfg.expert
    if args.failure_rate is not None:
        expert = ExpertConfig(**{**expert.model_dump(), "failure_rate": args.failure_rate})
    with _stage("gen-demos"):
        summary = generate_demos(args.task, args.episodes, args.seed, args.out, expert, cfg.world)
        write_resolved(cfg.model_copy(update={"expert": expert, "seed": args.seed}), args.out)
    print(json.dumps({k: summary[k] for k in ("task", "seed", "success_fraction", "mean_return")}))
    return summary


def _check_actions(path: Optional[os.PathLike]) -> ActionSet:
    aset = compile_action_set()
    if path is None:
        return aset
    p = Path(path)
    if not p.exists():
        raise StageError("process", f"{p}: action catalog not found")
    given = ActionSet.from_json(p.read_text())
    if given.hash != aset.hash:
        raise StageError("process", f"{p}: action catalog differs from the compiled one (hash {given.hash} != {aset.hash})")
    return aset


def process_datasets(
    in_dir: os.PathLike,
    out_dir: os.PathLike,
    actions: Optional[os.PathLike] = None,
    fuse_treechop: Optional[os.PathLike] = None,
    fused_out: Optional[os.PathLike] = None,
    horizon: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, str]:
    """Filter and label ``in_dir``; optionally also label and fuse a raw Treechop set.

    With ``fuse_treechop`` the processed input must carry inventory vectors (an
    ObtainIronPickaxe set): its early states donate vectors to the Treechop
    states, written to ``fused_out`` (default ``<out_dir>_treechop_fused``).
    """
    from craftbench.datastore import DemoSet, filter_and_label, fuse_treechop as fuse

    with _stage("process"):
        aset = _check_actions(actions)
        if not Path(in_dir, "manifest.json").exists():
            raise StageError("process", f"{in_dir}: no dataset manifest (run gen-demos first)")
        raw = DemoSet.open(in_dir)
        out = filter_and_label(raw, out_dir, aset, horizon)
        result = {"processed": str(out.root)}
        if fuse_treechop is not None:
            if not Path(fuse_treechop, "manifest.json").exists():
                raise StageError("process", f"{fuse_treechop}: no dataset manifest")
            fused_out = Path(fused_out) if fused_out else Path(f"{Path(out_dir)}_treechop_fused")
            scratch = fused_out.with_name(fused_out.name + ".labeled")
            shutil.rmtree(scratch, ignore_errors=True)
            tc = filter_and_label(DemoSet.open(fuse_treechop), scratch, aset, horizon)
            fused = fuse(tc, out, fused_out, seed)
            shutil.rmtree(scratch, ignore_errors=True)
            result["fused_treechop"] = str(fused.root)
    return result


def cmd_process(args) -> Dict[str, str]:
    result = process_datasets(args.in_dir, args.out, args.actions, args.fuse_treechop, args.fused_out, args.horizon, args.seed)
    print(json.dumps(result))
    return result


def cmd_train(args) -> TrainRun:
    cfg = load_config(args.config, args.set)
    tcfg = cfg.train
    if args.data:
        tcfg = tcfg.model_copy(update={"datasets": [str(d) for d in args.data]})
    if args.seed is not None:
        tcfg = tcfg.model_copy(update={"seed": args.seed})
    if not tcfg.datasets:
        raise StageError("train", "no datasets (set train.datasets in the config or pass --data)", 2)
    for d in tcfg.datasets:
        if not Path(d, "manifest.json").exists():
            raise StageError("train", f"{d}: no dataset manifest")
    cfg = cfg.model_copy(update={"train": tcfg})
    write_resolved(cfg, args.out)
    with _stage("train"):
        run = train(tcfg, args.out)
    print(json.dumps({"run": str(run.root), "snapshots": [p.name for p in run.snapshots]}))
    return run


def _task_of_run(run_dir: Path) -> str:
    from craftbench.datastore import DemoSet

    run = TrainRun.open(run_dir)
    tasks = {DemoSet.open(d).task for d in run.config.datasets if Path(d, "manifest.json").exists()}
    if "iron_pickaxe" in tasks:
        return "iron_pickaxe"
    if tasks == {"treechop"}:
        return "treechop"
    raise StageError("eval", f"{run_dir}: cannot infer the task; pass --task")


def evaluate_runs(
    runs: Sequence[os.PathLike],
    out: os.PathLike,
    task: Optional[str],
    episodes: int,
    mode: str,
    seed: int,
    world: WorldConfig,
    noise_std: float,
):
    """Run the snapshot protocol and write ``out`` (an EvalReport) plus the loss/return tables."""
    from craftbench import eval as ev

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with _stage("eval"):
        dirs = [Path(r) for r in runs]
        for d in dirs:
            if not (d / "config.json").exists():
                raise StageError("eval", f"{d}: not a training run directory")
        task = task or _task_of_run(dirs[0])
        report = ev.run_protocol(dirs, task, episodes, mode, seed, world, noise_std=noise_std)
        # relative names keep the report independent of where it was produced
        names = [os.path.relpath(d, out.parent) for d in dirs]
        for run, name in zip(report.runs, names):
            run.run = name
        out.write_text(report.to_json())
        tables_out = [ev.loss_return_report(d, r) for d, r in zip(dirs, report.runs)]
        for t, name in zip(tables_out, names):
            t["run"] = name
        out.with_suffix(".loss_return.json").write_text(json.dumps(tables_out, indent=1, sort_keys=True) + "\n")
    return report, tables_out


def cmd_eval(args):
    cfg = load_config(args.config, args.set)
    mode = (args.mode or cfg.eval.mode).replace("-", "_")
    if mode not in ("sample", "argmax", "greedy_q"):
        raise StageError("eval", f"unknown mode {args.mode!r}", 2)
    episodes = args.episodes or cfg.eval.episodes
    seed = cfg.seed if args.seed is None else args.seed
    report, tables = evaluate_runs(args.runs, args.out, args.task, episodes, mode, seed, cfg.world, cfg.eval.noise_std)
    from craftbench.eval import format_correlation

    print(f"task {report.task} mode {report.mode}: mean {report.mean_score:.2f} std {report.std_score:.2f}")
    for t in tables:
        c = t["correlations"]
        print(f"  {t['run']}: pearson(train) {format_correlation(c['pearson_train'])} "
              f"pearson(test) {format_correlation(c['pearson_test'])}")
    return report


def cmd_plot(args) -> List[Path]:
    from craftbench.eval import EvalReport, write_plots

    src = Path(args.in_file)
    with _stage("plot"):
        if not src.exists():
            raise StageError("plot", f"{src}: no such report")
        report = EvalReport.from_json(src.read_text())
        side = src.with_suffix(".loss_return.json")
        tables = json.loads(side.read_text()) if side.exists() else None
        files = write_plots(report, args.out, tables)
    for f in files:
        print(f)
    return files


def cmd_actions_dump(args) -> None:
    text = compile_action_set().to_json()
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)


# --------------------------------------------------------------------- repro
def repro(out_dir: os.PathLike, cfg: RunConfig, profile: str) -> Dict[str, Any]:
    """gen-demos -> process (with fusion) -> train x runs -> eval -> plot.

    Produces ``report.json`` with one protocol report per variant:
    ``treechop_ce`` (image-only Treechop BC), ``iron_ce`` and ``iron_ce_fused``
    (ObtainIronPickaxe BC without and with fused Treechop data).
    """
    from craftbench.eval import EvalReport, write_plots

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    r = cfg.repro
    data = out / "data"
    started = time.perf_counter()

    def log_stage(name):
        logger.info("[%7.1fs] %s", time.perf_counter() - started, name)

    log_stage("gen-demos")
    with _stage("gen-demos"):
        tc_sum = generate_demos("treechop", r.treechop_demos, cfg.seed, data / "treechop_raw", cfg.expert, cfg.world)
        iron_sum = generate_demos("iron_pickaxe", r.iron_demos, cfg.seed + 1, data / "iron_raw", cfg.expert, cfg.world)
    log_stage("process")
    aset_path = out / "actions.json"
    aset_path.write_text(compile_action_set().to_json())
    tc_proc = process_datasets(data / "treechop_raw", data / "treechop", aset_path, seed=cfg.seed)
    iron_proc = process_datasets(
        data / "iron_raw", data / "iron", aset_path, fuse_treechop=data / "treechop_raw",
        fused_out=data / "treechop_fused", seed=cfg.seed,
    )

    variants = {
        "treechop_ce": ("treechop", r.treechop_arch, r.treechop_steps, [tc_proc["processed"]]),
        "iron_ce": ("iron_pickaxe", r.iron_arch, r.iron_steps, [iron_proc["processed"]]),
        "iron_ce_fused": ("iron_pickaxe", r.iron_arch, r.iron_steps, [iron_proc["processed"], iron_proc["fused_treechop"]]),
    }
    reports: Dict[str, Any] = {}
    loss_tables: Dict[str, Any] = {}
    for name, (task, arch, steps, datasets) in variants.items():
        run_dirs = []
        for k in range(r.runs):
            log_stage(f"train {name} run {k}")
            tcfg = cfg.train.model_copy(
                update={"arch": arch, "loss": "ce", "steps": steps, "width_divisor": r.width_divisor,
                        "seed": cfg.seed + k, "datasets": [str(d) for d in datasets]}
            )
            run_dir = out / "runs" / name / f"seed_{k}"
            if run_dir.exists():
                shutil.rmtree(run_dir)
            with _stage("train"):
                train(TrainConfig.model_validate(tcfg.model_dump()), run_dir)
            run_dirs.append(run_dir)
        log_stage(f"eval {name}")
        report, tables = evaluate_runs(
            run_dirs, out / "eval" / f"{name}.json", task, cfg.eval.episodes, cfg.eval.mode, cfg.seed, cfg.world, cfg.eval.noise_std
        )
        log_stage(f"plot {name}")
        with _stage("plot"):
            write_plots(EvalReport.from_json((out / "eval" / f"{name}.json").read_text()), out / "plots" / name, tables)
        reports[name] = json.loads(report.to_json())
        loss_tables[name] = tables

    summary = {
        "format_version": CONFIG_VERSION,
        "profile": profile,
        "seed": cfg.seed,
        "expert": {
            "treechop_mean_return": tc_sum["mean_return"],
            "treechop_success_fraction": tc_sum["success_fraction"],
            "iron_mean_return": iron_sum["mean_return"],
            "iron_success_fraction": iron_sum["success_fraction"],
        },
        "reports": reports,
        "loss_return": loss_tables,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log_stage("done")
    return summary


def cmd_repro(args) -> Dict[str, Any]:
    base = SMOKE if args.profile == "smoke" else {}
    cfg = load_config(args.config, args.set, base=base)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    summary = repro(args.out, cfg, args.profile)
    for name, rep in summary["reports"].items():
        print(f"{name}: mean {rep['mean_score']:.2f} std {rep['std_score']:.2f}")
    return summary


# ---------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="craftbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="JSON RunConfig file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.lr=1e-4 (repeatable)")

    p = sub.add_parser("gen-demos", help="write expert demonstrations")
    p.add_argument("--task", required=True, choices=["treechop", "iron_pickaxe"])
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--failure-rate", type=float)
    with_config(p)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("process", help="filter, label and optionally fuse demonstrations")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--actions", type=Path, help="catalog from `actions dump`; must match the compiled one")
    p.add_argument("--fuse-treechop", type=Path, help="raw Treechop set to fuse with the processed --in set")
    p.add_argument("--fused-out", type=Path, help="where the fused Treechop set goes")
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int, default=0, help="donor sampling seed")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("train", help="train a policy on processed datasets")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, nargs="+", help="processed datasets (overrides train.datasets)")
    p.add_argument("--seed", type=int)
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate every snapshot of one or more runs")
    p.add_argument("--runs", type=Path, nargs="+", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--mode", choices=["sample", "argmax", "greedy-q", "greedy_q"])
    p.add_argument("--task", choices=["treechop", "iron_pickaxe"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    with_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="CSV and SVG plots from an eval report")
    p.add_argument("--in", dest="in_file", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("actions", help="action catalog utilities")
    asub = p.add_subparsers(dest="actions_command", required=True)
    d = asub.add_parser("dump", help="write the canonical catalog as JSON")
    d.add_argument("--out", default="-")
    d.set_defaults(func=cmd_actions_dump)

    p = sub.add_parser("repro", help="run the whole pipeline end to end")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--profile", choices=["smoke", "full"], default="smoke")
    p.add_argument("--seed", type=int)
    with_config(p)
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
