"""Attention variant x shift direction ablation over the synthetic set.

The shift direction only changes the sub-region bank, so ``none`` and
``aspect`` rows share one training run per seed across all three
directions. The ``trained_as`` column records which run fed each row.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .evaluate import evaluate_scenes
from .model import DetectorConfig
from .synth import CLASS_NAMES, load_dataset
from .train import Trainer, save_checkpoint

log = logging.getLogger(__name__)

VARIANTS = ("none", "sub-region", "aspect", "both")
DIRECTIONS = ("center", "outside", "random")
FULL_MODEL = ("both", "center")


@dataclass(frozen=True)
class RunSpec:
    attention: str
    direction: str
    seed: int

    @property
    def run_id(self) -> str:
        return f"{self.attention}-{self.direction}-s{self.seed}"


def canonical_run(attention: str, direction: str, seed: int) -> RunSpec:
    if attention in ("none", "aspect"):
        direction = "center"  # no sub-region bank, direction has no effect
    return RunSpec(attention, direction, seed)


@dataclass
class RunResult:
    spec: RunSpec
    mean_ap: float
    ap: dict[int, float]
    recall: float
    final_cls_loss: float
    seconds: float
    params: int
    config_hash: str


@dataclass
class AblationRow:
    attention: str
    direction: str
    results: list[RunResult] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return [r.spec.seed for r in self.results]

    @property
    def mean_ap(self) -> float:
        return float(np.mean([r.mean_ap for r in self.results]))

    def class_ap(self, c: int) -> float:
        vals = [r.ap[c] for r in self.results if c in r.ap]
        return float(np.mean(vals)) if vals else float("nan")

    def record(self) -> dict:
        res = self.results
        rec = {
            "variant": self.attention,
            "shift_direction": self.direction,
            "seeds": ",".join(str(s) for s in self.seeds),
            "mAP_per_seed": ",".join(f"{r.mean_ap:.4f}" for r in res),
            "mean_mAP": f"{self.mean_ap:.4f}",
        }
        for c in (1, 2, 3):
            rec[f"AP_{CLASS_NAMES[c]}"] = f"{self.class_ap(c):.4f}"
        rec["recall"] = f"{np.mean([r.recall for r in res]):.4f}"
        rec["params"] = str(res[0].params)
        rec["config_hash"] = ",".join(sorted({r.config_hash for r in res}))
        rec["trained_as"] = ",".join(r.spec.run_id for r in res)
        return rec


def plan(seeds, baseline_seeds=()) -> tuple[list[tuple[str, str, list[RunSpec]]], list[RunSpec]]:
    """Rows of the 4 x 3 grid with their runs, and the unique runs to train.

    Every row gets ``seeds``; ``baseline_seeds`` are added only to the rows
    compared by the acceptance check (no attention, and the full model).
    """
    rows, unique = [], []
    for attention in VARIANTS:
        for direction in DIRECTIONS:
            row_seeds = list(seeds)
            if attention == "none" or (attention, direction) == FULL_MODEL:
                row_seeds += [s for s in baseline_seeds if s not in row_seeds]
            specs = [canonical_run(attention, direction, s) for s in row_seeds]
            rows.append((attention, direction, specs))
            unique += [s for s in specs if s not in unique]
    return rows, unique


@lru_cache(maxsize=4)
def _scenes(path: str):
    return load_dataset(path)


def train_and_evaluate(spec: RunSpec, base: DetectorConfig, train_dir, test_dir, out_dir=None) -> RunResult:
    cfg = dataclasses.replace(base, attention=spec.attention, shift_direction=spec.direction, seed=spec.seed)
    trainer = Trainer(cfg)
    train_log = trainer.fit(_scenes(str(train_dir)))
    result = evaluate_scenes(trainer.net, _scenes(str(test_dir)))
    if out_dir is not None:
        run_dir = Path(out_dir) / "runs" / spec.run_id
        save_checkpoint(run_dir, trainer.net)
        (run_dir / "loss.tsv").write_text("step\tcls_loss\treg_loss\n" + "\n".join(train_log.lines()) + "\n")
        (run_dir / "eval.txt").write_text("\n".join(result.lines()) + "\n")
    log.info("%s: mAP %.4f in %.1fs", spec.run_id, result.mean_ap, train_log.seconds)
    return RunResult(spec, result.mean_ap, result.ap, result.recall, float(np.mean(train_log.cls_loss[-10:])),
                     train_log.seconds, trainer.net.num_params, cfg.model_hash())


def _run(args):
    return train_and_evaluate(*args)


def run_ablation(base: DetectorConfig, train_dir, test_dir, seeds=(0,), baseline_seeds=(), jobs: int = 1,
                 out_dir=None) -> list[AblationRow]:
    """Train each unique run once (optionally in ``jobs`` processes) and fill the grid."""
    rows, unique = plan(seeds, baseline_seeds)
    args = [(spec, base, str(train_dir), str(test_dir), out_dir) for spec in unique]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run, args))
    else:
        results = [_run(a) for a in args]
    by_spec = dict(zip(unique, results))
    return [AblationRow(a, d, [by_spec[s] for s in specs]) for a, d, specs in rows]


def format_table(rows: list[AblationRow]) -> str:
    records = [r.record() for r in rows]
    cols = list(records[0])
    widths = {c: max(len(c), *(len(rec[c]) for rec in records)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    lines += ["  ".join(rec[c].ljust(widths[c]) for c in cols) for rec in records]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def write_tsv(rows: list[AblationRow], path) -> None:
    records = [r.record() for r in rows]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0]), delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)


def baseline_gap(rows: list[AblationRow]) -> tuple[float, float]:
    """(mean mAP of the full model, mean mAP without attention)."""
    get = {(r.attention, r.direction): r for r in rows}
    return get[FULL_MODEL].mean_ap, get[("none", "center")].mean_ap
