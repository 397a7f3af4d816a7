"""``ptp`` command line: config resolution, artifact layout and the pipeline subcommands."""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import encoder, envsim, gcrl, orchestrator, planner, subgoal_cvae
from .errors import ConfigError, PtpError
from .orchestrator import subseed

log = logging.getLogger("ptp")

USAGE_ERROR, RUNTIME_ERROR = 1, 2

DEFAULTS = {
    "env": {
        "n_trajectories": 6000,
        "min_len": 10,
        "max_len": 100,
        "group_size": 4,
        "speed_range": [0.1, 1.0],
    },
    "encoder": {"scale_floor": encoder.SCALE_FLOOR},
    "cvae": {
        "delta_t": [5, 10, 20],
        "d_z": subgoal_cvae.D_Z,
        "hidden": [128, 128],
        "beta_kl": 1.0,
        "lr": 3e-4,
        "epochs": 50,
        "batch_size": 256,
        "batches_per_epoch": 100,
        "chain_length": 3,
        "spread": 0.25,
        "holdout_fraction": 0.1,
    },
    "rl": {
        "gamma": 0.99,
        "expectile_tau": 0.7,
        "awr_beta": 3.0,
        "weight_clip": 100.0,
        "polyak": 0.005,
        "lr": 3e-4,
        "hidden": [128, 128],
    },
    "planner": {f.name: f.default for f in dataclasses.fields(planner.PlanConfig)},
    "run": {
        f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
        for f in dataclasses.fields(orchestrator.RunConfig)
    },
}

# larger-scale values; everything else keeps its default
PAPER_SCALE = {
    "env": {"max_len": 200},
    "cvae": {"delta_t": [15, 30, 60]},
    "planner": {"L": 3, "K": 8, "M": 2, "N": 1024},
    "run": {
        "eps_reach": 2.0,
        "episode_horizon": 400,
        "subgoal_budget": 15,
        "env_steps_per_epoch": 2000,
        "train_iters_per_epoch": 2000,
    },
}


class UsageError(Exception):
    pass


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a section")
            out[key] = _merge(base[key], val, path)
        else:
            out[key] = val
    return out


def resolve_config(path=None, paper_scale: bool = False, no_planning: bool = False) -> dict:
    """Defaults, then the optional scale preset, then the file. Unknown keys raise ConfigError."""
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
    user = dict(user)
    paper_scale = bool(user.pop("paper_scale", False)) or paper_scale
    cfg = _merge(DEFAULTS, PAPER_SCALE) if paper_scale else copy.deepcopy(DEFAULTS)
    cfg = _merge(cfg, user)
    cfg["paper_scale"] = paper_scale
    if no_planning:
        cfg["run"]["planning"] = False
    _build(cfg)  # validate eagerly
    return cfg


@dataclasses.dataclass
class Built:
    dataset: envsim.DatasetConfig
    cvae_train: subgoal_cvae.CvaeTrainConfig
    iql: gcrl.IqlConfig
    plan: planner.PlanConfig
    run: orchestrator.RunConfig


def _build(cfg: dict) -> Built:
    env, cv, rl, run = cfg["env"], cfg["cvae"], cfg["rl"], dict(cfg["run"])
    dt = list(cv["delta_t"])
    if any(b != cfg["planner"]["M"] * a for a, b in zip(dt, dt[1:])):
        raise ConfigError("cvae.delta_t must grow by planner.M per level")
    if len(dt) < cfg["planner"]["L"]:
        raise ConfigError("cvae.delta_t needs one entry per planner level")
    if run["subgoal_budget"] != dt[0]:
        raise ConfigError("run.subgoal_budget must equal the finest cvae.delta_t")
    run["seeds"] = list(run["seeds"])
    return Built(
        envsim.DatasetConfig(env["min_len"], env["max_len"], env["group_size"], speed_range=tuple(env["speed_range"])),
        subgoal_cvae.CvaeTrainConfig(
            cv["batch_size"], cv["batches_per_epoch"], cv["chain_length"], cv["spread"], cv["holdout_fraction"]
        ),
        gcrl.IqlConfig(**{**rl, "hidden": tuple(rl["hidden"])}),
        planner.PlanConfig(**cfg["planner"]),
        orchestrator.RunConfig(**run),
    )


# --------------------------------------------------------------------------- artifact layout


class Layout:
    def __init__(self, out):
        self.root = Path(out)

    dataset = property(lambda self: self.root / "dataset.jsonl.gz")
    stats = property(lambda self: self.root / "encoder.json")
    cvae = property(lambda self: self.root / "cvae")
    pretrain = property(lambda self: self.root / "pretrain")
    plan = property(lambda self: self.root / "plan.json")
    report = property(lambda self: self.root / "report")

    def finetune(self, planning: bool, seed: int) -> Path:
        return self.root / "finetune" / ("ptp" if planning else "model-free") / f"seed{seed}"


def _echo(path: Path, cfg: dict, **extra) -> None:
    """Resolved-config sidecar for artifacts that cannot embed it themselves."""
    path.write_text(json.dumps({"config": cfg, **extra}, indent=2, sort_keys=True))


def _guard(target: Path, args) -> bool:
    """True if the command should run; False to skip. Raises UsageError on a refused overwrite."""
    if not target.exists():
        return True
    if args.resume:
        print(f"{target} exists, skipping (--resume)")
        return False
    if not args.force:
        raise UsageError(f"{target} exists; pass --force to overwrite or --resume to skip")
    if target.is_dir():
        shutil.rmtree(target)
    else:
        target.unlink()
    return True


def _need(path: Path, command: str) -> None:
    if not path.exists():
        raise ConfigError(f"missing {path}; run `ptp {command}` first")


def _load_dataset(lay: Layout):
    _need(lay.dataset, "gen-data")
    return envsim.load_trajectories(lay.dataset)


def _load_stats(lay: Layout):
    _need(lay.stats, "gen-data")
    return encoder.NormalizerStats.from_json(json.loads(lay.stats.read_text())["stats"])


def _load_cvae(lay: Layout, cfg: dict):
    _need(lay.cvae / "cvae.json", "train-cvae")
    n = len(cfg["cvae"]["delta_t"])
    return [subgoal_cvae.CvaeModel.load(lay.cvae, i + 1) for i in range(n)]


def _load_agent(path: Path):
    _need(path / "agent.json", "pretrain")
    return gcrl.AgentParams.load(path)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, b: Built, lay: Layout):
    if not _guard(lay.dataset, args):
        return
    trajs = envsim.generate_offline_dataset(cfg["env"]["n_trajectories"], subseed(args.seed, "env"), cfg=b.dataset)
    envsim.save_trajectories(trajs, lay.dataset)
    stats = encoder.fit(trajs, cfg["encoder"]["scale_floor"])
    lay.stats.write_text(json.dumps({"stats": stats.to_json(), "config": cfg}, indent=2, sort_keys=True))
    _echo(lay.root / "dataset.config.json", cfg, seed=args.seed)
    tags = {}
    for t in trajs:
        tags[t.primitive_tag] = tags.get(t.primitive_tag, 0) + 1
    print(f"wrote {len(trajs)} trajectories to {lay.dataset}: {json.dumps(tags, sort_keys=True)}")


def cmd_train_cvae(args, cfg, b: Built, lay: Layout):
    if not _guard(lay.cvae, args):
        return
    trajs, stats = _load_dataset(lay), _load_stats(lay)
    _, latents = orchestrator.encode_dataset(stats, trajs)
    cv = cfg["cvae"]
    rng = orchestrator.substream(args.seed, "cvae-init")
    models = [
        subgoal_cvae.init_cvae(i + 1, dt, rng, stats.d_h, cv["d_z"], tuple(cv["hidden"]), cv["beta_kl"], cv["lr"])
        for i, dt in enumerate(cv["delta_t"])
    ]
    models, hist = orchestrator.train_cvae_levels(models, latents, cv["epochs"], args.seed, b.cvae_train)
    lay.cvae.mkdir(parents=True)
    for m in models:
        m.save(lay.cvae)
    _echo(lay.cvae / "cvae.json", cfg, seed=args.seed, holdout_mse=hist)
    for m, h in zip(models, hist):
        print(f"level {m.level_index} (delta_t={m.delta_t}): held-out mse {h[0]:.4f} -> {h[-1]:.4f}")


def cmd_pretrain(args, cfg, b: Built, lay: Layout):
    if not _guard(lay.pretrain, args):
        return
    trajs, stats = _load_dataset(lay), _load_stats(lay)
    models = _load_cvae(lay, cfg)
    hist = json.loads((lay.cvae / "cvae.json").read_text())["holdout_mse"]
    agent = gcrl.init_agent(orchestrator.substream(args.seed, "rl-init"), stats.d_h, b.iql)
    lay.pretrain.mkdir(parents=True)
    rows: list = []
    ckpt = orchestrator.Checkpointer(lay.pretrain)
    agent, _ = orchestrator.pretrain(
        trajs, agent, models, b.run, stats=stats, seed=args.seed, cvae_histories=hist, checkpoint=ckpt, metrics=rows
    )
    agent.save(lay.pretrain / "agent")
    shutil.rmtree(lay.pretrain / "agent_latest", ignore_errors=True)
    orchestrator.write_metrics(rows, lay.pretrain / "metrics.csv")
    _echo(lay.pretrain / "config.json", cfg, seed=args.seed)
    final = rows[-1]["success_rate"] if rows else math.nan
    print(f"pretrained {b.run.pretrain_epochs} epochs; single-skill success {final:.3f}")


def _parse_state(text: str) -> envsim.EnvState:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != envsim.STATE_DIM:
        raise UsageError(f"a state needs {envsim.STATE_DIM} comma-separated numbers")
    s = envsim.EnvState.unflatten(vals)
    s.validate()
    return s


def cmd_plan(args, cfg, b: Built, lay: Layout):
    out = Path(args.plan_out) if args.plan_out else lay.plan
    if not _guard(out, args):
        return
    stats = _load_stats(lay)
    models = _load_cvae(lay, cfg)
    agent = _load_agent(Path(args.agent) if args.agent else lay.pretrain / "agent")
    task = envsim.TASKS[args.task]
    s0 = _parse_state(args.start) if args.start else task.initial_state(subseed(args.seed, "reset"))
    goal = _parse_state(args.goal) if args.goal else task.sample_goal(s0, subseed(args.seed, "goal"))
    p = planner.plan(
        encoder.encode(stats, s0), encoder.encode(stats, goal), models, agent, None, b.plan,
        orchestrator.substream(args.seed, "planner"),
    )
    doc = p.to_json(b.plan)
    doc["start"], doc["goal"] = s0.flatten().tolist(), goal.flatten().tolist()
    doc["resolved_config"] = cfg
    out.write_text(json.dumps(doc, indent=2))
    print(f"plan with {len(p.flattened)} subgoals, cost {p.cost:.4f} -> {out}")


def _bundle(lay: Layout, cfg: dict, b: Built, stats) -> orchestrator.PlannerBundle:
    models = _load_cvae(lay, cfg) if b.run.planning else []
    return orchestrator.PlannerBundle(stats, models, b.plan, enabled=b.run.planning)


def cmd_finetune(args, cfg, b: Built, lay: Layout):
    seeds = [args.seed] if args.seed_given else list(b.run.seeds)
    trajs, stats = _load_dataset(lay), _load_stats(lay)
    offline_rows = orchestrator.read_metrics(lay.pretrain / "metrics.csv") if (lay.pretrain / "metrics.csv").exists() else []
    for seed in seeds:
        target = lay.finetune(b.run.planning, seed)
        if not _guard(target, args):
            continue
        agent = _load_agent(lay.pretrain / "agent")
        bundle = _bundle(lay, cfg, b, stats)
        offline, _ = orchestrator.encode_dataset(stats, trajs)
        target.mkdir(parents=True)
        rows = [dict(r) for r in offline_rows]
        agent, online = orchestrator.finetune(
            agent, bundle, offline, envsim.TASKS[args.task], b.run, seed,
            metrics=rows, checkpoint=orchestrator.Checkpointer(target),
        )
        agent.save(target / "agent")
        shutil.rmtree(target / "agent_latest", ignore_errors=True)
        envsim.write_jsonl(online.to_records(lambda h: encoder.decode(stats, h)), target / "online_buffer.jsonl.gz")
        (target / "plan_buffer.json").write_text(json.dumps(bundle.buffers.to_json()))
        orchestrator.write_metrics(rows, target / "metrics.csv")
        _echo(target / "config.json", cfg, seed=seed, task=args.task)
        mode = "PTP" if b.run.planning else "model-free"
        print(f"{mode} seed {seed}: success {rows[-1]['success_rate']:.3f} after {b.run.finetune_epochs} epochs")


def cmd_eval(args, cfg, b: Built, lay: Layout):
    stats = _load_stats(lay)
    agent = _load_agent(Path(args.agent) if args.agent else lay.pretrain / "agent")
    bundle = _bundle(lay, cfg, b, stats)
    sr = orchestrator.evaluate(agent, bundle, envsim.TASKS[args.task], args.episodes, args.seed, b.run)
    print(f"success_rate {sr:.4f}")


def aggregate(csv_paths) -> list[dict]:
    """Per (epoch, phase): mean and population std of each metric across the given runs."""
    runs = [orchestrator.read_metrics(p) for p in csv_paths]
    keys = sorted({(r["epoch"], r["phase"]) for rows in runs for r in rows})
    metrics = [c for c in orchestrator.METRIC_COLUMNS if c not in ("epoch", "phase")]
    out = []
    for epoch, phase in keys:
        row = {"epoch": epoch, "phase": phase}
        matched = [r for rows in runs for r in rows if r["epoch"] == epoch and r["phase"] == phase]
        row["n_runs"] = len(matched)
        for m in metrics:
            vals = np.array([r[m] for r in matched], dtype=float)
            vals = vals[np.isfinite(vals)]
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else math.nan
            row[f"{m}_std"] = float(vals.std()) if vals.size else math.nan
        out.append(row)
    return out


def cmd_report(args, cfg, b: Built, lay: Layout):
    base = lay.root / "finetune"
    modes = sorted(p.name for p in base.iterdir() if p.is_dir()) if base.exists() else []
    if not modes:
        raise ConfigError(f"no metrics under {base}; run `ptp finetune` first")
    if not _guard(lay.report, args):
        return
    lay.report.mkdir(parents=True)
    import csv

    for mode in modes:
        paths = sorted((base / mode).glob("seed*/metrics.csv"))
        rows = aggregate(paths)
        cols = list(rows[0]) if rows else []
        with open(lay.report / f"{mode}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: orchestrator._fmt(v) for k, v in r.items()})
        online = [r for r in rows if r["phase"] == "online"]
        print(f"{mode} ({len(paths)} seeds)")
        print(f"  {'epoch':>5}  {'success':>15}  {'subgoal reach':>15}")
        for r in online:
            print(
                f"  {r['epoch']:>5}  {r['success_rate_mean']:.3f} ± {r['success_rate_std']:.3f}"
                f"  {r['subgoal_reach_rate_mean']:.3f} ± {r['subgoal_reach_rate_std']:.3f}"
            )
    _echo(lay.report / "config.json", cfg, modes=modes)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cvae": cmd_train_cvae,
    "pretrain": cmd_pretrain,
    "plan": cmd_plan,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    common.add_argument("--out", default="runs", help="artifact directory")
    common.add_argument("--resume", action="store_true", help="skip steps whose outputs exist")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--no-planning", action="store_true", help="condition the policy on the final goal only")
    common.add_argument("--paper-scale", action="store_true", help="use the large-scale preset")
    common.add_argument("--task", choices=sorted(envsim.TASKS), default="A")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ptp", description="Subgoal planning and goal-conditioned fine-tuning pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("plan", "eval"):
            sp.add_argument("--agent", help="agent checkpoint directory (default: pretrained agent)")
        if name == "plan":
            sp.add_argument("--start", help="initial state as 8 comma-separated numbers")
            sp.add_argument("--goal", help="goal state as 8 comma-separated numbers")
            sp.add_argument("--plan-out", help="output path (default OUT/plan.json)")
        if name == "eval":
            sp.add_argument("--episodes", type=int, default=20)
    return p


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.seed_given = args.seed is not None
        args.seed = args.seed if args.seed is not None else 0
        if args.resume and args.force:
            raise UsageError("--resume and --force are mutually exclusive")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        try:
            cfg = resolve_config(args.config, args.paper_scale, args.no_planning)
            built = _build(cfg)
        except (ConfigError, TypeError) as exc:
            raise UsageError(f"bad configuration: {exc}") from exc
        lay = Layout(args.out)
        lay.root.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, built, lay)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (PtpError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
