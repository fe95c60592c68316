"""Named experiment suites over multiple seeds, with consolidated reports.

Each suite builds a dict of named run variants, executes every
(variant, seed) cell independently (failures are recorded, the suite
continues), and aggregates mean/std per metric plus two-sided
Mann-Whitney p-values of every variant against the baseline variant.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import DataError
from .losses import PretrainLossConfig
from .metrics import mann_whitney_p
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule
from .train import RunConfig, RunReport, finetune, pretrain, reinit_label_head

BASELINE = "full"


@dataclass
class SuiteRow:
    config_id: str
    seed: int
    split: str
    metric: str
    value: float


@dataclass
class SuiteReport:
    rows: list[SuiteRow] = field(default_factory=list)
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    def add_report(self, config_id: str, seed: int, report: RunReport) -> None:
        if report.test is not None:
            for metric, value in report.test.as_rows():
                self.rows.append(SuiteRow(config_id, seed, "test", metric, value))
        if report.epochs and report.epochs[-1].validation is not None:
            for metric, value in report.epochs[-1].validation.as_rows():
                self.rows.append(SuiteRow(config_id, seed, "validation", metric, value))

    def values(self, config_id: str, metric: str = "auc", split: str = "test") -> list[float]:
        return [
            r.value
            for r in self.rows
            if r.config_id == config_id and r.metric == metric and r.split == split
        ]

    def config_ids(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.config_id not in seen:
                seen.append(r.config_id)
        return seen

    def summary(self) -> list[tuple[str, str, float, float]]:
        out = []
        for cid in self.config_ids():
            metrics = sorted({r.metric for r in self.rows if r.config_id == cid})
            for metric in metrics:
                vals = self.values(cid, metric)
                if vals:
                    out.append((cid, metric, float(np.mean(vals)), float(np.std(vals))))
        return out

    def pvalues(self, baseline: str = BASELINE, metric: str = "auc") -> list[tuple[str, float]]:
        base = self.values(baseline, metric)
        out = []
        for cid in self.config_ids():
            if cid == baseline or not base:
                continue
            other = self.values(cid, metric)
            if other:
                out.append((cid, mann_whitney_p(base, other)))
        return out


def run_experiment_suite(
    runners: dict[str, Callable[[int], RunReport]], seeds: list[int]
) -> SuiteReport:
    """Execute the cross-product of named runners over the seeds."""
    if len(seeds) < 1:
        raise DataError("need at least one seed")
    report = SuiteReport()
    for config_id, runner in runners.items():
        for seed in seeds:
            try:
                report.add_report(config_id, seed, runner(seed))
            except Exception as e:  # run failure must not sink the suite
                report.failures.append((config_id, seed, f"{type(e).__name__}: {e}"))
    return report


@dataclass
class Environment:
    """Everything a suite needs to run one variant end to end."""

    train: Dataset
    validation: Dataset
    test: Dataset
    model_cfg: ModelConfig
    run_cfg: RunConfig
    schedule: NoiseSchedule
    loss_cfg: PretrainLossConfig = field(default_factory=PretrainLossConfig)


def two_stage_run(
    env: Environment,
    seed: int,
    run_patch: dict | None = None,
    schedule: NoiseSchedule | None = None,
    out_dir: str | None = None,
) -> tuple[Model, RunReport]:
    """Pretrain (unless transfer is none), transfer, fine-tune, evaluate.

    Returns the fine-tuned model and its report (test metrics included).
    Transfer goes through the checkpoint file machinery, the same path
    the CLI takes.
    """
    cfg = replace(env.run_cfg, seed=seed, **(run_patch or {}))
    cfg.validate()
    schedule = schedule or env.schedule
    model = Model.init(env.model_cfg, env.train.schema, seed)

    if cfg.transfer != "none":
        model, _ = pretrain(model, env.train, schedule, cfg, env.loss_cfg, out_dir=out_dir)
        with tempfile.TemporaryDirectory() as tmp:
            ckpt = os.path.join(tmp, "pretrained.dgct")
            save_checkpoint(model, ckpt, meta={"seed": seed})
            model = load_checkpoint(ckpt, cfg.transfer, env.model_cfg, env.train.schema, seed)
    if cfg.no_label:
        reinit_label_head(model, seed)
    return finetune(model, env.train, env.validation, env.test, cfg, out_dir=out_dir)


def transfer_suite(env: Environment, seeds: list[int]) -> SuiteReport:
    """One pretraining per seed, fine-tuned under each transfer mode."""
    report = SuiteReport()
    names = {"full": "full", "scoring-network-only": "scoring-network-only",
             "embeddings-only": "embeddings-only"}
    for seed in seeds:
        with tempfile.TemporaryDirectory() as tmp:
            ckpt = os.path.join(tmp, "pretrained.dgct")
            try:
                cfg = replace(env.run_cfg, seed=seed)
                model = Model.init(env.model_cfg, env.train.schema, seed)
                model, _ = pretrain(model, env.train, env.schedule, cfg, env.loss_cfg)
                save_checkpoint(model, ckpt, meta={"seed": seed})
            except Exception as e:
                for cid in names:
                    report.failures.append((cid, seed, f"{type(e).__name__}: {e}"))
                continue
            for mode, cid in names.items():
                try:
                    started = load_checkpoint(ckpt, mode, env.model_cfg, env.train.schema, seed)
                    cfg = replace(env.run_cfg, seed=seed, transfer=mode)
                    _, rep = finetune(started, env.train, env.validation, env.test, cfg)
                    report.add_report(cid, seed, rep)
                except Exception as e:
                    report.failures.append((cid, seed, f"{type(e).__name__}: {e}"))
    return report


def ablation_suite(env: Environment, seeds: list[int]) -> SuiteReport:
    """Rows: full, without the label, without schedule draws, unified schedule."""
    shared_schedule = NoiseSchedule(
        curves=env.schedule.curves,
        horizon=env.schedule.horizon,
        kind=env.schedule.kind,
        shared=True,
    )
    variants: dict[str, Callable[[int], RunReport]] = {
        "full": lambda seed: two_stage_run(env, seed)[1],
        "w/o Label": lambda seed: two_stage_run(env, seed, run_patch={"no_label": True})[1],
        "w/o Diff": lambda seed: two_stage_run(env, seed, run_patch={"no_diff": True})[1],
        "w/o Fea": lambda seed: two_stage_run(env, seed, schedule=shared_schedule)[1],
    }
    return run_experiment_suite(variants, seeds)


def headline_suite(env: Environment, seeds: list[int]) -> SuiteReport:
    """Two-stage training against fine-tuning the same architecture from scratch."""
    variants: dict[str, Callable[[int], RunReport]] = {
        "full": lambda seed: two_stage_run(env, seed)[1],
        "sft-scratch": lambda seed: two_stage_run(env, seed, run_patch={"transfer": "none"})[1],
    }
    return run_experiment_suite(variants, seeds)


def sweep_suite(env: Environment, seeds: list[int],
                horizons: tuple[int, ...] = (10, 100, 500, 1000),
                epoch_counts: tuple[int, ...] = (1, 2, 3, 4, 5)) -> SuiteReport:
    """Two one-dimensional sweeps: schedule horizon, then pretrain epochs."""
    variants: dict[str, Callable[[int], RunReport]] = {}
    for horizon in horizons:
        sched = NoiseSchedule(
            curves=env.schedule.curves, horizon=horizon,
            kind=env.schedule.kind, shared=env.schedule.shared,
        )
        variants[f"T={horizon}"] = (
            lambda seed, s=sched: two_stage_run(env, seed, schedule=s)[1]
        )
    for epochs in epoch_counts:
        variants[f"epochs={epochs}"] = (
            lambda seed, e=epochs: two_stage_run(env, seed, run_patch={"pretrain_epochs": e})[1]
        )
    return run_experiment_suite(variants, seeds)


SUITES = {
    "transfer": transfer_suite,
    "ablation": ablation_suite,
    "headline": headline_suite,
    "sweep": sweep_suite,
}


# ---------------------------------------------------------------------------
# report files: raw rows, mean/std summary, p-values vs the baseline

def write_report_files(report: SuiteReport, out_dir: str, baseline: str = BASELINE) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    rows_path = os.path.join(out_dir, "rows.csv")
    with open(rows_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "seed", "split", "metric", "value"])
        for r in report.rows:
            w.writerow([r.config_id, r.seed, r.split, r.metric, repr(r.value)])
    paths.append(rows_path)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "metric", "mean", "std"])
        for cid, metric, mean, std in report.summary():
            w.writerow([cid, metric, repr(mean), repr(std)])
    paths.append(summary_path)

    if any(cid != baseline for cid in report.config_ids()):
        p_path = os.path.join(out_dir, "pvalues.csv")
        with open(p_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_id", "metric", "p_value_vs_" + baseline])
            for cid, p in report.pvalues(baseline):
                w.writerow([cid, "auc", repr(p)])
        paths.append(p_path)

    if report.failures:
        f_path = os.path.join(out_dir, "failures.csv")
        with open(f_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_id", "seed", "error"])
            for cid, seed, err in report.failures:
                w.writerow([cid, seed, err])
        paths.append(f_path)
    return paths
