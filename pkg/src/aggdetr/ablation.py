"""Ablation runner: train every toggle row from a shared source-only start.

For each seed, step 1 runs once and its parameters seed every row's step 2, so
rows trained under one seed see the same initialization and the same data
order and differ only through their toggles.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Sample
from .errors import ContractError
from .evaluate import evaluate_map
from .model import DetrGA
from .train import pretrain_source_only, save_checkpoint, train

log = logging.getLogger(__name__)

_OFF = dict(baseline=False, cq=False, fq=False, fq_position_embedding=False, fq_weight_sharing=True, encoder_avgpool=False)

ROWS: dict[str, dict] = {
    "a": {},
    "b": dict(baseline=True),
    "c": dict(cq=True),
    "d": dict(fq=True),
    "e": dict(baseline=True, cq=True),
    "f": dict(cq=True, fq=True),
    "g": dict(baseline=True, fq=True),
    "h": dict(baseline=True, cq=True, fq=True),
    # foreground-query settings, each on top of the FQ-only row
    "d_pe": dict(fq=True, fq_position_embedding=True),
    "d_noshare": dict(fq=True, fq_weight_sharing=False),
    # encoder aggregation by average pooling instead of class queries
    "c_avg": dict(encoder_avgpool=True),
}

ROW_SETS = {
    "modules": ["a", "b", "c", "d", "e", "f", "g", "h"],
    "default": ["a", "b", "c", "d", "h", "d_pe", "d_noshare", "c_avg"],
    "all": list(ROWS),
}


def row_config(base: TrainConfig, row: str, seed: int | None = None) -> TrainConfig:
    if row not in ROWS:
        raise ContractError(f"unknown ablation row {row!r}; known: {sorted(ROWS)}")
    changes = {**_OFF, **ROWS[row]}
    if seed is not None:
        changes["seed"] = seed
    return base.replace(**changes)


@dataclass
class RowResult:
    row: str
    seed: int
    toggles: dict
    target_map: float
    source_map: float
    per_class_ap: list[float]
    fingerprint: str
    seconds: float
    delta: float = float("nan")  # target mAP minus the source-only row's, same seed

    def to_dict(self) -> dict:
        return {
            "row": self.row,
            "seed": self.seed,
            **self.toggles,
            "target_map": self.target_map,
            "source_map": self.source_map,
            "delta_vs_a": self.delta,
            "per_class_ap": [None if np.isnan(a) else a for a in self.per_class_ap],
            "fingerprint": self.fingerprint,
            "seconds": round(self.seconds, 2),
        }


@dataclass
class AblationResult:
    rows: list[str]
    seeds: list[int]
    results: list[RowResult] = field(default_factory=list)
    models: dict = field(default_factory=dict)  # (row, seed) -> DetrGA, when kept
    loss_logs: dict = field(default_factory=dict)  # (row, seed) -> step-2 records
    step1_logs: dict = field(default_factory=dict)  # seed -> step-1 records

    def get(self, row: str, seed: int) -> RowResult:
        for r in self.results:
            if r.row == row and r.seed == seed:
                return r
        raise KeyError((row, seed))

    def target_map(self, row: str) -> np.ndarray:
        return np.array([self.get(row, s).target_map for s in self.seeds])

    def summary(self) -> list[dict]:
        out = []
        for row in self.rows:
            vals = self.target_map(row)
            deltas = np.array([self.get(row, s).delta for s in self.seeds])
            out.append({"row": row, "mean_target_map": float(vals.mean()), "std_target_map": float(vals.std()),
                        "mean_delta_vs_a": float(np.nanmean(deltas)) if not np.isnan(deltas).all() else None})
        return out

    def wins(self, better: str, worse: str, strict: bool = True) -> int:
        """Number of seeds on which row ``better`` beats row ``worse``."""
        b, w = self.target_map(better), self.target_map(worse)
        return int(((b > w) if strict else (b >= w)).sum())


def run_ablation(
    base: TrainConfig,
    samples: dict[str, list[Sample]],
    rows: list[str] | None = None,
    seeds: list[int] | None = None,
    out_dir=None,
    keep_models: bool = False,
) -> AblationResult:
    """Train and evaluate each row under each seed.

    ``samples`` holds ``source``/``target`` training splits and
    ``source_test``/``target_test`` evaluation splits.
    """
    rows = list(rows or ROW_SETS["default"])
    seeds = list(seeds if seeds is not None else [base.seed])
    for r in rows:
        row_config(base, r)  # validates the name and the toggle combination
    for key in ("source", "target", "target_test"):
        if not samples.get(key):
            raise ContractError(f"ablation needs a non-empty {key!r} split")
    out = Path(out_dir) if out_dir is not None else None
    result = AblationResult(rows, seeds)
    for seed in seeds:
        t0 = time.perf_counter()
        state, s1_log = pretrain_source_only(base.replace(seed=seed), samples["source"])
        result.step1_logs[seed] = s1_log
        log.info("seed %d: step 1 done in %.1fs", seed, time.perf_counter() - t0)
        for row in rows:
            cfg = row_config(base, row, seed)
            t1 = time.perf_counter()
            run = train(cfg, samples=samples, step1_state=state)
            model = run.model
            tgt = evaluate_map(model, samples["target_test"])
            src = evaluate_map(model, samples["source_test"]).mean_ap if samples.get("source_test") else float("nan")
            rr = RowResult(row, seed, cfg.toggles(), tgt.mean_ap, src, tgt.per_class_ap, cfg.fingerprint(),
                           time.perf_counter() - t1)
            result.results.append(rr)
            result.loss_logs[(row, seed)] = run.loss_log
            log.info("seed %d row %s: target mAP %.4f source mAP %.4f (%.1fs)", seed, row, rr.target_map, rr.source_map, rr.seconds)
            if keep_models:
                result.models[(row, seed)] = model
            if out is not None:
                ckdir = out / "checkpoints"
                ckdir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, ckdir / f"{row}_seed{seed}.npz")
        if "a" in rows:
            ref = result.get("a", seed).target_map
            for rr in result.results:
                if rr.seed == seed:
                    rr.delta = rr.target_map - ref
    if out is not None:
        write_ablation(result, out)
    return result


def write_ablation(result: AblationResult, out_dir) -> dict[str, Path]:
    """Write the per-run table (tab-separated), a JSON copy, and the seed summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r.to_dict() for r in result.results]
    table = out / "ablation.tsv"
    cols = [k for k in records[0] if k != "per_class_ap"] if records else []
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, delimiter="\t", extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in rec.items()})
    js = out / "ablation.json"
    js.write_text(json.dumps({"rows": result.rows, "seeds": result.seeds, "results": records, "summary": result.summary()}, indent=2))
    with open(out / "loss_log.jsonl", "w") as fh:
        for seed, recs in result.step1_logs.items():
            for rec in recs:
                fh.write(json.dumps({"row": "step1", "seed": seed, **rec}) + "\n")
        for (row, seed), recs in result.loss_logs.items():
            for rec in recs:
                fh.write(json.dumps({"row": row, "seed": seed, **rec}) + "\n")
    return {"table": table, "json": js}


def format_table(result: AblationResult) -> str:
    """Plain-text table: one line per row, target mAP per seed and delta vs row a."""
    head = "row\t" + "\t".join(f"seed{s}" for s in result.seeds) + "\tmean\tdelta_vs_a"
    lines = [head]
    for row, summ in zip(result.rows, result.summary()):
        vals = "\t".join(f"{v * 100:.1f}" for v in result.target_map(row))
        delta = summ["mean_delta_vs_a"]
        d = "" if delta is None else f"{delta * 100:+.1f}"
        lines.append(f"{row}\t{vals}\t{summ['mean_target_map'] * 100:.1f}\t{d}")
    return "\n".join(lines)
