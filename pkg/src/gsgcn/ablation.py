"""Component ablation: train each model variant per seed and compare eval accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metrics import accuracy
from .model import GSGCN, ModelConfig, ablation_config
from .skeleton import PoseDocument, SampleSet, build_sample_set
from .training import EpochRecord, TrainConfig, TrainState, train

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_multi_person", "no_speed", "no_distance_embedding")
# reporting order: weakest ablation first, full model last
TABLE_ORDER = ("no_multi_person", "no_speed", "no_distance_embedding", "full")
LABELS = {
    "no_multi_person": "GS-GCN w/o multiple persons (M=1)",
    "no_speed": "GS-GCN w/o pose speed values",
    "no_distance_embedding": "GS-GCN w/o distance embedding",
    "full": "GS-GCN",
}


@dataclass
class AblationRow:
    variant: str
    accuracies: list[float] = field(default_factory=list)
    param_counts: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def spread(self) -> float:
        return float(np.std(self.accuracies))


@dataclass
class AblationResult:
    rows: dict[str, AblationRow]
    seeds: list[int]

    def ordered(self) -> list[AblationRow]:
        return [self.rows[v] for v in TABLE_ORDER if v in self.rows]

    def markdown(self) -> str:
        lines = ["| Method | Accuracy (%) | Per-seed (%) |", "|---|---|---|"]
        for r in self.ordered():
            per = ", ".join(f"{100 * a:.2f}" for a in r.accuracies)
            lines.append(f"| {LABELS[r.variant]} | {100 * r.mean:.2f} ± {100 * r.spread:.2f} | {per} |")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        head = "variant,mean_accuracy,spread," + ",".join(f"seed_{s}" for s in self.seeds)
        body = [f"{r.variant},{r.mean:.6f},{r.spread:.6f}," + ",".join(f"{a:.6f}" for a in r.accuracies)
                for r in self.ordered()]
        return "\n".join([head] + body) + "\n"


def directional_check(result: AblationResult, min_margin: float = 0.05) -> tuple[bool, list[str]]:
    """Full beats M=1 by ``min_margin`` (fraction) and is >= every other ablation."""
    msgs, ok = [], True
    full = result.rows.get("full")
    if full is None:
        return False, ["the full variant was not run"]
    for v, r in result.rows.items():
        if v == "full":
            continue
        if v == "no_multi_person":
            good = full.mean - r.mean >= min_margin
            msgs.append(f"full {100 * full.mean:.2f} vs {v} {100 * r.mean:.2f}: "
                        f"margin {100 * (full.mean - r.mean):.2f} >= {100 * min_margin:.2f} -> "
                        f"{'pass' if good else 'FAIL'}")
        else:
            good = full.mean >= r.mean
            msgs.append(f"full {100 * full.mean:.2f} >= {v} {100 * r.mean:.2f} -> "
                        f"{'pass' if good else 'FAIL'}")
        ok &= good
    return ok, msgs


def run_ablation(
    train_doc: PoseDocument,
    eval_doc: PoseDocument,
    base: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = VARIANTS,
    references: str = "first",
    on_epoch: Callable[[str, int, EpochRecord], None] | None = None,
) -> AblationResult:
    """Train every variant for every seed on identical data order; score on ``eval_doc``."""
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}; choose from {VARIANTS}")
    sets: dict[tuple[int, bool], tuple[SampleSet, SampleSet]] = {}
    rows = {v: AblationRow(v) for v in variants}
    for v in variants:
        cfg = ablation_config(base, v)
        key = (cfg.num_persons, cfg.with_speed)
        if key not in sets:
            sets[key] = (
                build_sample_set(train_doc, cfg.num_frames, cfg.num_persons, cfg.with_speed, references),
                build_sample_set(eval_doc, cfg.num_frames, cfg.num_persons, cfg.with_speed, references),
            )
        tr, ev = sets[key]
        model = GSGCN(cfg)
        for seed in seeds:
            tc = TrainConfig.from_dict(train_config.to_dict() | {"seed": seed})
            params = model.init_params(seed)
            cbs = [] if on_epoch is None else [lambda rec, st, v=v, s=seed: on_epoch(v, s, rec)]
            state: TrainState = train(model, tr, params, tc, cbs)
            pred = model.predict_proba(ev.inputs, ev.distances, ev.present, state.params).argmax(axis=1)
            acc = accuracy(pred, ev.labels)
            rows[v].accuracies.append(acc)
            rows[v].param_counts.append(state.params.count("mlp"))
            log.info("variant=%s seed=%d eval_acc=%.4f epochs=%d", v, seed, acc, state.epoch)
    return AblationResult(rows, list(seeds))
