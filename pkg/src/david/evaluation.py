"""Metrics (micro-F1, ANLS, retrieval accuracy, per-category breakdown) and the experiment sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .checkpoint import Checkpoint
from .docmodel import CollectionSplit, LabelSpace
from .neural import EncoderConfig
from .synthgen import CorruptionStats, LabelNoiseConfig, corrupt_guidance_labels
from .workflow import AdaptationPlan, corpus_hash, initial_checkpoint, run_adaptation, run_finetune, run_inference

# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def micro_f1(predictions: Sequence[int], golds: Sequence[int], outside_id: int = 0) -> float:
    """Token-wise micro F1 over non-outside labels."""
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds")
    tp = sum(p == g and g != outside_id for p, g in zip(predictions, golds))
    n_pred = sum(p != outside_id for p in predictions)
    n_gold = sum(g != outside_id for g in golds)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gold
    return 2 * precision * recall / (precision + recall)


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_similarity(pred: str, gold: str) -> float:
    if not pred and not gold:
        return 1.0
    return 1.0 - levenshtein(pred, gold) / max(len(pred), len(gold))


def anls(pred_text, gold_text, threshold: float = 0.5) -> float:
    """Average normalised Levenshtein similarity; single strings or aligned sequences of strings."""
    if isinstance(pred_text, str):
        pred_text, gold_text = [pred_text], [gold_text]
    if len(pred_text) != len(gold_text):
        raise ValueError("length mismatch")
    if not pred_text:
        return 0.0
    scores = []
    for p, g in zip(pred_text, gold_text):
        s = normalized_similarity(p.strip().casefold(), g.strip().casefold())
        scores.append(s if s >= threshold else 0.0)
    return sum(scores) / len(scores)


def retrieval_accuracy(predictions: Sequence[int], golds: Sequence[int]) -> float:
    if len(predictions) != len(golds):
        raise ValueError("length mismatch")
    if not golds:
        return 0.0
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def per_category_accuracy(predictions: Sequence[int], golds: Sequence[int], space: LabelSpace) -> dict[str, float]:
    """Recall per gold category (categories absent from ``golds`` are omitted)."""
    out = {}
    for k, name in enumerate(space.categories):
        idx = [i for i, g in enumerate(golds) if g == k]
        if idx:
            out[name] = sum(predictions[i] == k for i in idx) / len(idx)
    return out


@dataclass
class MetricsReport:
    micro_f1: Optional[float] = None
    per_category: dict[str, float] = field(default_factory=dict)
    retrieval_accuracy: Optional[float] = None
    anls: Optional[float] = None
    n_samples: int = 0
    wall_time_seconds: float = 0.0
    fingerprint: str = ""

    def __post_init__(self):
        for name in ("micro_f1", "retrieval_accuracy", "anls"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def score(self, task: str) -> float:
        return self.micro_f1 if task == "fine" else self.retrieval_accuracy

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_predictions(records: Sequence[dict], space: LabelSpace, wall_time: float = 0.0,
                         fingerprint: str = "") -> MetricsReport:
    tokens = [r for r in records if r["kind"] == "token" and r["gold"] is not None]
    queries = [r for r in records if r["kind"] == "query"]
    report = MetricsReport(n_samples=len(tokens) + len(queries), wall_time_seconds=wall_time,
                           fingerprint=fingerprint)
    if tokens:
        preds, golds = [r["pred"] for r in tokens], [r["gold"] for r in tokens]
        report.micro_f1 = micro_f1(preds, golds, space.outside)
        report.per_category = per_category_accuracy(preds, golds, space)
    if queries:
        report.retrieval_accuracy = retrieval_accuracy([r["pred"] for r in queries], [r["gold"] for r in queries])
        report.anls = anls([r["pred_text"] for r in queries], [r["gold_text"] for r in queries])
    return report


def chance_accuracy(records: Sequence[dict]) -> float:
    queries = [r for r in records if r["kind"] == "query"]
    return sum(1.0 / r["n_candidates"] for r in queries) / len(queries) if queries else 0.0


# --------------------------------------------------------------------------
# experiment sweeps
# --------------------------------------------------------------------------

RATIOS = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass(frozen=True)
class ExperimentConfig:
    """One row of a sweep table: an adaptation plan (None = no adaptation) plus model options."""

    name: str
    plan: Optional[AdaptationPlan] = None
    options: tuple[tuple[str, Any], ...] = ()

    def fingerprint(self) -> str:
        body = {"name": self.name, "plan": self.plan.to_json() if self.plan else None, "options": dict(self.options)}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Experiment:
    split: CollectionSplit
    gold_space: LabelSpace
    task: str
    encoder: EncoderConfig = EncoderConfig()
    finetune: AdaptationPlan = AdaptationPlan()
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.task not in ("fine", "coarse"):
            raise ValueError("task must be 'fine' or 'coarse'")

    def start(self, config: ExperimentConfig, seed: int, d_n_fraction: float = 1.0) -> Checkpoint:
        """Initial (no plan) or adapted checkpoint for ``config``; cached per seed and fraction."""
        key = (config.fingerprint(), seed, d_n_fraction)
        if key not in self._cache:
            docs = list(self.split.d_n) + list(self.split.d_g)
            ckpt = initial_checkpoint(docs, self.gold_space, self.encoder, seed, **dict(config.options))
            if config.plan is not None:
                plan = AdaptationPlan.from_json({**config.plan.to_json(), "seed": seed})
                d_n = list(self.split.d_n)[:max(1, round(d_n_fraction * len(self.split.d_n)))]
                ckpt = run_adaptation(d_n, plan, ckpt)
            self._cache[key] = ckpt
        return self._cache[key]

    def finetune_plan(self, seed: int) -> AdaptationPlan:
        return AdaptationPlan.from_json({**self.finetune.to_json(), "seed": seed})

    def evaluate(self, ckpt: Checkpoint) -> MetricsReport:
        t0 = time.perf_counter()
        records = run_inference(self.split.d_i, ckpt, self.task)
        return evaluate_predictions(records, self.gold_space, time.perf_counter() - t0, ckpt.plan_hash)

    def cell(self, config: ExperimentConfig, ratio: float, seed: int, d_g=None, d_n_fraction: float = 1.0) -> dict:
        """Fine-tune at ``ratio`` (0 = zero-shot) and evaluate on D_i; returns a provenance-stamped row."""
        t0 = time.perf_counter()
        start = self.start(config, seed, d_n_fraction)
        d_g = self.split.d_g if d_g is None else d_g
        ckpt = start if ratio == 0 else run_finetune(d_g, start, self.finetune_plan(seed), self.task, ratio)
        report = self.evaluate(ckpt)
        return {"config": config.name, "ratio": ratio, "seed": seed, "task": self.task,
                "score": report.score(self.task), "micro_f1": report.micro_f1,
                "retrieval_accuracy": report.retrieval_accuracy, "anls": report.anls,
                "n_samples": report.n_samples, "stage": ckpt.stage,
                "corpus_hash": corpus_hash(list(self.split.d_n) + list(d_g) + list(self.split.d_i)),
                "plan_hash": ckpt.plan_hash or self.finetune_plan(seed).digest(),
                "config_fingerprint": config.fingerprint(),
                "wall_time_seconds": round(time.perf_counter() - t0, 3)}


def _median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


def pivot(rows: Sequence[dict], column: str, value: str = "score") -> list[dict]:
    """Wide table: one row per config, one column per distinct ``column`` value, median over seeds."""
    configs = list(dict.fromkeys(r["config"] for r in rows))
    cols = list(dict.fromkeys(r[column] for r in rows))
    table = []
    for c in configs:
        row = {"config": c}
        for v in cols:
            vals = [r[value] for r in rows if r["config"] == c and r[column] == v and r[value] is not None]
            row[_column_name(column, v)] = _median(vals) if vals else None
        table.append(row)
    return table


def _column_name(column: str, v) -> str:
    if column == "ratio":
        return f"{round(100 * v)}%"
    if column == "lam":
        return f"P_{v:g}"
    return str(v)


def ratio_sweep(exp: Experiment, configs: Sequence[ExperimentConfig], ratios: Sequence[float] = RATIOS,
                seeds: Sequence[int] = (0, 1, 2), zero_shot: bool = True) -> tuple[list[dict], list[dict]]:
    """Rows for every config x ratio x seed (0% = zero-shot) and the median-over-seeds wide table."""
    if any(not 0 < r <= 1 for r in ratios):
        raise ValueError("ratios must lie in (0, 1]")
    grid = ([0.0] if zero_shot else []) + list(ratios)
    rows = [exp.cell(c, r, s) for c in configs for s in seeds for r in grid]
    return rows, pivot(rows, "ratio")


def robustness_sweep(exp: Experiment, configs: Sequence[ExperimentConfig], lambdas: Sequence[float] = (2.0, 1.5, 1.0),
                     modes: Sequence[str] = ("incorrect", "incomplete"), seeds: Sequence[int] = (0, 1, 2),
                     ratio: float = 1.0) -> tuple[list[dict], dict[str, list[dict]]]:
    """Fine-tune on corrupted guidance labels and evaluate on clean D_i; lambda=inf is the clean run."""
    if exp.task != "fine":
        raise ValueError("label-noise robustness applies to the sequence-tagging task")
    rows = []
    for c in configs:
        for s in seeds:
            clean = exp.cell(c, ratio, s)
            for mode in modes:
                rows.append({**clean, "lam": float("inf"), "mode": mode, "corrupted_fraction": 0.0, "n_labeled": 0})
                for lam in lambdas:
                    stats = CorruptionStats()
                    noisy = corrupt_guidance_labels(exp.split.d_g, LabelNoiseConfig(lam, mode, s), len(exp.gold_space),
                                                    stats)
                    row = exp.cell(c, ratio, s, d_g=noisy)
                    rows.append({**row, "lam": lam, "mode": mode, "corrupted_fraction": stats.fraction,
                                 "n_labeled": stats.n_labeled})
    tables = {m: pivot([r for r in rows if r["mode"] == m], "lam") for m in modes}
    return rows, tables


def size_sweep(exp: Experiment, configs: Sequence[ExperimentConfig], fractions: Sequence[float] = (0.5, 1.0),
               seeds: Sequence[int] = (0, 1, 2), ratio: float = 1.0) -> tuple[list[dict], list[dict]]:
    """Adapt on seeded prefixes of D_n; includes a "No DW" row fine-tuned without adaptation."""
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    rows = []
    baseline = ExperimentConfig("No DW")
    for s in seeds:
        rows.append({**exp.cell(baseline, ratio, s), "fraction": None})
    for c in configs:
        if c.plan is None:
            raise ValueError(f"config {c.name!r} has no adaptation plan")
        for f in fractions:
            for s in seeds:
                row = exp.cell(c, ratio, s, d_n_fraction=f)
                rows.append({**row, "config": f"{_fraction_label(f)}{c.name}", "fraction": f})
    return rows, pivot(rows, "ratio")


def _fraction_label(f: float) -> str:
    return "" if f == 1.0 else f"{f:g}x "


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def write_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    columns = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else v


def plot_ratio_curves(table: Sequence[dict], path: str | Path, title: str = "") -> None:
    """Score-vs-ratio curves, one line per config (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for row in table:
        cols = [k for k in row if k.endswith("%") and row[k] is not None]
        ax.plot([int(k[:-1]) for k in cols], [row[k] for k in cols], marker="o", label=row["config"])
    ax.set_xlabel("guidance ratio (%)")
    ax.set_ylabel("score")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
