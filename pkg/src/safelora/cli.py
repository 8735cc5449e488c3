"""Command-line front end.

    safelora pretrain      --config CFG [--out DIR] [--seeds 0,1] [--budget N] [--workers N]
    safelora finetune      --config CFG [...] [--extended MULT]
    safelora ablate WHICH  --config CFG [...]      WHICH in rank, placement, components, safety
    safelora verify-theory --prop {1,2,3} [--trials N] [--out DIR]
    safelora report RUN_DIR

Every flag may also come from an environment variable ``SAFELORA_<FLAG>`` (for
example ``SAFELORA_WORKERS=2``); explicit flags win, then the environment, then
the config file.

Exit codes: 0 success, 1 a verification failed, 2 config error, 3 numeric failure,
4 missing or corrupt artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import adapt, envs, nn, ppo, safety, theory

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 1, 2, 3, 4
ENV_PREFIX = "SAFELORA_"
METRICS_HEADER = ("run_id", "seed", "env_steps", "mean_ep_reward", "value_loss", "failures_cum",
                  "interventions_cum", "action_rate", "trainable_params")
ABLATIONS = ("rank", "placement", "components", "safety")


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


# ------------------------------------------------------------------ config

ADAPT_KEYS = {"mode": "lora", "rank": 1, "placement": "all_layers", "components": "actor_critic",
              "safety": True, "recovery": "scripted", "learning_rate": None}
BUDGET_KEYS = {"pretrain": adapt.PRETRAIN_BUDGET, "finetune": None, "extended": 1.0}
TOP_KEYS = {"task", "env_params", "gap", "ppo_hyper", "adapt", "safety_spec", "seeds", "budgets",
            "output_dir", "checkpoint_dir"}
REQUIRED = ("task",)


@dataclass
class ExperimentConfig:
    task: str
    env_params: envs.EnvParams
    gap: envs.GapSpec
    ppo_hyper: ppo.PpoHyper
    adapt: dict
    safety_spec: safety.SafetySpec
    seeds: tuple[int, ...]
    budgets: dict
    output_dir: str
    checkpoint_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "env_params": self.env_params.to_dict(),
            "gap": asdict(self.gap),
            "ppo_hyper": asdict(self.ppo_hyper),
            "adapt": dict(self.adapt),
            "safety_spec": self.safety_spec.to_dict(),
            "seeds": list(self.seeds),
            "budgets": dict(self.budgets),
            "output_dir": self.output_dir,
            "checkpoint_dir": self.checkpoint_dir,
        }

    @property
    def finetune_budget(self) -> int:
        return int(round(self.budgets["finetune"] * self.budgets["extended"]))

    def adapt_config(self) -> adapt.AdaptConfig:
        a = self.adapt
        return adapt.AdaptConfig(
            task=self.task, mode=a["mode"], rank=a["rank"], placement=a["placement"],
            components=a["components"], safety=a["safety"], seeds=self.seeds,
            budget=self.finetune_budget, gap=self.gap, hyper=self.ppo_hyper,
            learning_rate=a["learning_rate"], env_params=self.env_params,
            safety_spec=self.safety_spec, recovery=a["recovery"])


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


def _dataclass_section(name: str, cls, raw: dict, base):
    _check_keys(name, raw, {f.name for f in fields(cls)})
    try:
        return replace(base, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config document and materialise every default."""
    _check_keys("config", raw, TOP_KEYS)
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required field '{key}'")
    task = raw["task"]
    if task not in envs.TASKS:
        raise ConfigError(f"task: must be one of {', '.join(envs.TASKS)}, got {task!r}")
    params = _dataclass_section("env_params", envs.EnvParams, raw.get("env_params", {}),
                                envs.default_params(task))
    gap = _dataclass_section("gap", envs.GapSpec, raw.get("gap", {}), envs.GapSpec.default_target())
    hyper = _dataclass_section("ppo_hyper", ppo.PpoHyper, raw.get("ppo_hyper", {}),
                               ppo.PpoHyper(learning_rate=adapt.LR_PRETRAIN))
    adapt_raw = raw.get("adapt", {})
    _check_keys("adapt", adapt_raw, ADAPT_KEYS)
    adapt_sec = {**ADAPT_KEYS, **adapt_raw}
    budgets_raw = raw.get("budgets", {})
    _check_keys("budgets", budgets_raw, BUDGET_KEYS)
    budgets = {**BUDGET_KEYS, **budgets_raw}
    if budgets["finetune"] is None:
        budgets["finetune"] = adapt.FINETUNE_BUDGET[task]
    for key in ("pretrain", "finetune"):
        if not isinstance(budgets[key], int) or budgets[key] < 0:
            raise ConfigError(f"budgets.{key}: must be a non-negative integer")
    if not isinstance(budgets["extended"], (int, float)) or budgets["extended"] <= 0:
        raise ConfigError("budgets.extended: must be a positive number")
    try:
        spec = (safety.SafetySpec.from_dict(raw["safety_spec"]) if "safety_spec" in raw
                else safety.default_safety_spec(task))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"safety_spec: {exc}") from exc
    seeds = raw.get("seeds", list(adapt.DEFAULT_SEEDS))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: must be a non-empty list of integers")
    cfg = ExperimentConfig(task, params, gap, hyper, adapt_sec, spec, tuple(seeds), budgets,
                           str(raw.get("output_dir", "runs")), raw.get("checkpoint_dir"))
    try:
        cfg.adapt_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"adapt: {exc}") from exc
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(raw)


def _env_or(value, name: str):
    if value is not None:
        return value
    return os.environ.get(ENV_PREFIX + name.upper())


def apply_overrides(cfg: ExperimentConfig, args, budget_key: str) -> ExperimentConfig:
    """Fold flags (and their environment fallbacks) into the config."""
    out = _env_or(getattr(args, "out", None), "out")
    if out:
        cfg.output_dir = str(out)
    seeds = _env_or(getattr(args, "seeds", None), "seeds")
    if seeds:
        try:
            cfg.seeds = tuple(int(s) for s in str(seeds).split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"--seeds: {exc}") from exc
        if not cfg.seeds:
            raise ConfigError("--seeds: empty list")
    budget = _env_or(getattr(args, "budget", None), "budget")
    if budget is not None:
        cfg.budgets[budget_key] = _to_number(budget, "--budget", int)
    extended = _env_or(getattr(args, "extended", None), "extended")
    if extended is not None:
        cfg.budgets["extended"] = _to_number(extended, "--extended", float)
    return cfg


def _to_number(value, flag: str, kind):
    try:
        v = kind(value)
    except ValueError as exc:
        raise ConfigError(f"{flag}: {exc}") from exc
    if v < 0:
        raise ConfigError(f"{flag}: must be non-negative")
    return v


def _workers(args) -> int:
    w = _env_or(getattr(args, "workers", None), "workers")
    return max(1, int(_to_number(w, "--workers", int))) if w is not None else 1


# ------------------------------------------------------------------ io

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path: Path, runs: list[tuple[str, int, list]]) -> None:
    """``runs`` holds ``(run_id, seed, rows)``; written in (seed, env_steps) order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for run_id, seed, rows in sorted(runs, key=lambda r: r[1]):
            fails = inter = 0
            for r in rows:
                fails += r.failures
                inter += r.interventions
                w.writerow([run_id, seed, r.env_steps, _fmt(r.mean_ep_reward), _fmt(r.value_loss),
                            fails, inter, _fmt(r.action_rate), r.trainable_params])


def read_metrics(path: Path) -> list[dict]:
    """Parse a metrics CSV; a malformed file raises :class:`ArtifactError` naming the row."""
    if not path.exists():
        raise ArtifactError(f"missing metrics file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ArtifactError(f"{path}: row 1: header does not match {','.join(METRICS_HEADER)}")
        rows = []
        for n, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_HEADER):
                raise ArtifactError(f"{path}: row {n}: expected {len(METRICS_HEADER)} fields, got {len(rec)}")
            try:
                rows.append({
                    "run_id": rec[0], "seed": int(rec[1]), "env_steps": int(rec[2]),
                    "mean_ep_reward": float(rec[3]), "value_loss": float(rec[4]),
                    "failures_cum": int(rec[5]), "interventions_cum": int(rec[6]),
                    "action_rate": float(rec[7]), "trainable_params": int(rec[8]),
                })
            except ValueError as exc:
                raise ArtifactError(f"{path}: row {n}: {exc}") from exc
    return rows


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_table(path: Path, table: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in table:
            w.writerow([_fmt(row[c]) for c in columns])


def save_checkpoints(run_dir: Path, checkpoints: dict[int, adapt.Checkpoint], task: str) -> None:
    for seed, ck in sorted(checkpoints.items()):
        d = run_dir / "checkpoints" / f"seed_{seed}"
        meta = {"seed": seed, "task": task, "source_reward": ck.source_reward}
        nn.save_checkpoint(ck.policy, d / "policy.npz", meta)
        _write_json(d / "meta.json", meta)


def load_checkpoints(ck_dir: Path, seeds) -> dict[int, adapt.Checkpoint]:
    out = {}
    for seed in seeds:
        path = ck_dir / f"seed_{seed}" / "policy.npz"
        if not path.exists():
            raise ArtifactError(f"missing checkpoint: {path}")
        try:
            policy, extra = nn.load_checkpoint(path)
            source_reward = float(extra["source_reward"])
        except (OSError, ValueError, KeyError, TypeError, zipfile.BadZipFile) as exc:
            raise ArtifactError(f"corrupt checkpoint: {path}: {exc}") from exc
        out[seed] = adapt.Checkpoint(seed, policy, source_reward)
    return out


def _prepare_run(cfg: ExperimentConfig, sub: str) -> Path:
    run_dir = Path(cfg.output_dir) / sub
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.resolved.json", cfg.to_dict())
    return run_dir


def _checkpoint_dir(cfg: ExperimentConfig) -> Path:
    if cfg.checkpoint_dir:
        return Path(cfg.checkpoint_dir)
    return Path(cfg.output_dir) / "pretrain" / "checkpoints"


# ------------------------------------------------------------------ commands

def cmd_pretrain(args) -> int:
    cfg = apply_overrides(load_config(args.config), args, "pretrain")
    run_dir = _prepare_run(cfg, "pretrain")
    cks = adapt.pretrain(cfg.task, cfg.seeds, cfg.budgets["pretrain"], cfg.env_params,
                         cfg.ppo_hyper, _workers(args))
    save_checkpoints(run_dir, cks, cfg.task)
    write_metrics(run_dir / "metrics.csv", [("pretrain", s, c.rows) for s, c in cks.items()])
    zero = {s: adapt.evaluate(zero_action_policy(c.policy), cfg.task, cfg.env_params,
                              adapt.EVAL_EPISODES, s) for s, c in cks.items()}
    lines = [f"pretrain task={cfg.task} budget={cfg.budgets['pretrain']} seeds={list(cfg.seeds)}"]
    for s, c in sorted(cks.items()):
        zs = adapt.zero_shot_eval(c, cfg.gap, adapt.EVAL_EPISODES, cfg.task, cfg.env_params)
        lines.append(f"seed {s}: source reward {c.source_reward:.4f}  zero-action {zero[s]:.4f}  "
                     f"zero-shot on target {zs:.4f}")
    (run_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def zero_action_policy(policy: nn.MlpPolicy) -> nn.MlpPolicy:
    """Copy of ``policy`` whose mean action is identically zero (baseline reference)."""
    z = policy.copy()
    z.actor[-1].w0[:] = 0.0
    z.actor[-1].b0[:] = 0.0
    z.actor[-1].adapter_enabled = False
    return z


def _run_arms(cfg: ExperimentConfig, arms: dict[str, adapt.AdaptConfig], run_dir: Path,
              workers: int) -> adapt.Study:
    cks = load_checkpoints(_checkpoint_dir(cfg), cfg.seeds)
    recovery_policy = None
    if any(a.safety and a.recovery == "learned" for a in arms.values()):
        recovery_policy, _ = safety.train_recovery(cfg.task, cfg.env_params, cfg.safety_spec,
                                                   cfg.budgets["pretrain"], adapt.run_rng(cfg.seeds[0], "recovery"))
    study = adapt.run_arms(cks, arms, workers, recovery_policy)
    for arm, runs in study.items():
        arm_dir = run_dir / arm if len(arms) > 1 else run_dir
        arm_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(arm_dir / "metrics.csv", [(f"{arm}-s{s}", s, r.rows) for s, r in runs.items()])
        rank_rows = []
        for s, r in sorted(runs.items()):
            for row in theory.measure_update_rank(cks[s].policy, r.policy):
                rank_rows.append({"seed": s, **row})
            nn.save_checkpoint(r.policy, arm_dir / "checkpoints" / f"seed_{s}" / "policy.npz",
                               {"seed": s, "task": cfg.task, "source_reward": r.source_reward, "arm": arm})
        _write_table(arm_dir / "update_rank.csv", rank_rows,
                     ("seed", "network", "layer", "shape", "energy_fraction", "sigma"))
        (arm_dir / "summary.txt").write_text(_arm_summary(arm, runs))
    return study


def _arm_summary(arm: str, runs: dict[int, adapt.RunMetrics]) -> str:
    lines = [f"arm {arm}"]
    for s, r in sorted(runs.items()):
        lines.append(f"seed {s}: source {r.source_reward:.4f} final {r.final_reward:.4f} "
                     f"steps_to_threshold {r.steps_to_threshold} failures {r.failures} "
                     f"interventions {r.interventions} action_rate_reduction {r.action_rate_reduction:.2f}% "
                     f"value_loss {r.final_value_loss:.5f} trainable {r.trainable_params} "
                     f"frozen_base_intact {r.frozen_before == r.frozen_after}")
    return "\n".join(lines) + "\n"


def cmd_finetune(args) -> int:
    cfg = apply_overrides(load_config(args.config), args, "finetune")
    base = cfg.adapt_config()
    run_dir = _prepare_run(cfg, f"finetune/{base.arm_name()}")
    study = _run_arms(cfg, {base.arm_name(): base}, run_dir, _workers(args))
    print(_arm_summary(base.arm_name(), study[base.arm_name()]), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = apply_overrides(load_config(args.config), args, "finetune")
    base = cfg.adapt_config()
    arms = {"rank": adapt.rank_arms, "placement": adapt.placement_arms,
            "components": adapt.component_arms, "safety": adapt.safety_arms}[args.which](base)
    run_dir = _prepare_run(cfg, f"ablate_{args.which}")
    study = _run_arms(cfg, arms, run_dir, _workers(args))
    table = adapt.comparison_table(study)
    _write_table(run_dir / "comparison.csv", table, adapt.COMPARISON_COLUMNS)
    text = _format_table(table, adapt.COMPARISON_COLUMNS)
    (run_dir / "summary.txt").write_text(f"ablation {args.which}\n{text}")
    print(text, end="")
    return EXIT_OK


def _format_table(table: list[dict], columns) -> str:
    def cell(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)
    cells = [[cell(row[c]) for c in columns] for row in table]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines) + "\n"


def cmd_verify_theory(args) -> int:
    prop = int(_env_or(args.prop, "prop") or 0)
    trials = int(_env_or(args.trials, "trials") or 50)
    if prop not in (1, 2, 3):
        raise ConfigError("--prop: must be 1, 2 or 3")
    if trials < 1:
        raise ConfigError("--trials: must be >= 1")
    out = Path(_env_or(args.out, "out") or "runs") / "theory"
    out.mkdir(parents=True, exist_ok=True)
    reports = theory.verify_all(prop, np.random.default_rng(adapt.derive_seed(prop, "theory")), trials)
    rows = [{"check": r.name, **row} for r in reports for row in r.rows]
    columns = list(dict.fromkeys(k for row in rows for k in row))
    with open(out / f"prop{prop}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n")
        w.writeheader()
        w.writerows({k: _fmt(v) for k, v in row.items()} for row in rows)
    passed = all(r.passed for r in reports)
    text = "\n".join(r.summary() for r in reports) + f"\noverall: {'PASS' if passed else 'FAIL'}\n"
    (out / f"prop{prop}_summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if passed else EXIT_VERIFY_FAILED


def _metrics_files(run_dir: Path) -> list[Path]:
    direct = run_dir / "metrics.csv"
    if direct.exists():
        return [direct]
    return sorted(run_dir.glob("*/metrics.csv"))


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    files = _metrics_files(run_dir)
    if not files:
        raise ArtifactError(f"no metrics.csv under {run_dir}")
    by_run: dict[str, list[dict]] = {}
    for path in files:
        for row in read_metrics(path):
            by_run.setdefault(row["run_id"], []).append(row)
    if not by_run:
        text = "no rollouts\n"
        (run_dir / "report.txt").write_text(text)
        print(text, end="")
        return EXIT_OK
    curves = run_dir / "curves"
    curves.mkdir(exist_ok=True)
    table = []
    for run_id, rows in by_run.items():
        sm = adapt.smooth([r["mean_ep_reward"] for r in rows])
        offset = min(adapt.SMOOTH_WINDOW, len(rows)) - 1
        with open(curves / f"{run_id}.dat", "w") as fh:
            for i, v in enumerate(sm):
                fh.write(f"{rows[i + offset]['env_steps']} {float(v)!r}\n")
        ns = [SimpleNamespace(env_steps=r["env_steps"], action_rate=r["action_rate"]) for r in rows]
        table.append({"run_id": run_id, "rollouts": len(rows), "env_steps": rows[-1]["env_steps"],
                      "final_smoothed_reward": float(sm[-1]), "failures": rows[-1]["failures_cum"],
                      "interventions": rows[-1]["interventions_cum"],
                      "action_rate_reduction_pct": safety.action_rate_reduction(ns),
                      "trainable_params": rows[-1]["trainable_params"]})
    columns = ("run_id", "rollouts", "env_steps", "final_smoothed_reward", "failures", "interventions",
               "action_rate_reduction_pct", "trainable_params")
    text = _format_table(table, columns)
    (run_dir / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safelora", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp, with_extended: bool):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help="output root directory (overrides output_dir)")
        sp.add_argument("--seeds", help="comma-separated seed list")
        sp.add_argument("--budget", help="environment-step budget for this command")
        sp.add_argument("--workers", help="process-pool size for seeds and arms")
        if with_extended:
            sp.add_argument("--extended", help="multiplier on the fine-tune budget")

    run_flags(sub.add_parser("pretrain", help="train source policies"), False)
    run_flags(sub.add_parser("finetune", help="fine-tune pretrained policies on the target"), True)
    ab = sub.add_parser("ablate", help="run a controlled comparison")
    ab.add_argument("which", choices=ABLATIONS)
    run_flags(ab, True)
    vt = sub.add_parser("verify-theory", help="check the low-rank adaptation properties")
    vt.add_argument("--prop", help="1, 2 or 3")
    vt.add_argument("--trials", help="random trials per check")
    vt.add_argument("--out", help="output root directory")
    rp = sub.add_parser("report", help="summarise a run directory and emit curve files")
    rp.add_argument("run_dir")
    return p


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "ablate": cmd_ablate,
            "verify-theory": cmd_verify_theory, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (nn.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
