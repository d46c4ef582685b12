"""Variant comparison: baseline vs margin-only vs full method on phantoms.

Each seed generates its own train and test sets, trains every variant from
the same initialization seed and scores the test set. Results can be
written as a JSON summary.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import phantom
from .metrics import dsc
from .network import NetConfig
from .trainer import VARIANTS, TrainConfig, Trainer, feature_separation, infer, prepare_case
from .volume import Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationConfig:
    n_train: int = 40
    n_test: int = 10
    seeds: tuple = (0, 1, 2)
    variants: tuple = VARIANTS
    phantom: phantom.PhantomSpec = field(default_factory=phantom.PhantomSpec)
    asym_range: tuple = (0.5, 1.0)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)


def _datasets(cfg, seed):
    # disjoint seed streams for train and test
    train = phantom.generate_dataset(cfg.phantom, cfg.n_train, [seed, 0], asym_range=cfg.asym_range)
    test = phantom.generate_dataset(cfg.phantom, cfg.n_test, [seed, 1], asym_range=cfg.asym_range)
    return train, test


def run_variant(variant, train_cases, test_cases, cfg, seed, run_dir=None):
    tcfg = replace(cfg.train, variant=variant, seed=seed)
    if variant == "baseline":
        tcfg = replace(tcfg, loss=replace(tcfg.loss, beta=0.0))
    start = time.time()
    trainer = Trainer(train_cases, tcfg, cfg.net, run_dir=run_dir)
    trainer.train()
    scores = []
    for case in test_cases:
        pred = infer(trainer.model, Volume(case.image, (1.0, 1.0, 1.0)), tcfg.patch_size)
        scores.append(dsc(pred, case.seg))
    result = {
        "variant": variant,
        "seed": seed,
        "dsc": scores,
        "mean_dsc": float(np.mean(scores)),
        "seconds": time.time() - start,
    }
    if variant == "sats":
        lesion, background = feature_separation(trainer.model, test_cases)
        result["d2_asym_lesion"] = lesion
        result["d2_background"] = background
    log.info("%s seed %d: mean DSC %.2f", variant, seed, result["mean_dsc"])
    return result


def run(cfg=AblationConfig(), out_dir=None):
    results = []
    for seed in cfg.seeds:
        train, test = _datasets(cfg, seed)
        train_cases = [prepare_case(f"{i:04d}", v, m) for i, (v, m) in enumerate(train)]
        test_cases = [prepare_case(f"{i:04d}", v, m) for i, (v, m) in enumerate(test)]
        for variant in cfg.variants:
            run_dir = None if out_dir is None else Path(out_dir) / f"{variant}_seed{seed}"
            results.append(run_variant(variant, train_cases, test_cases, cfg, seed, run_dir))
    summary = summarize(results)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps({"runs": results, "summary": summary}, indent=2) + "\n")
    return results, summary


def _ratio(a, b):
    if b > 0:
        return a / b
    return float("inf") if a > 0 else float("nan")


def summarize(results):
    by_variant = {}
    for r in results:
        by_variant.setdefault(r["variant"], []).append(r["mean_dsc"])
    summary = {v: float(np.mean(s)) for v, s in by_variant.items()}
    if "sats" in summary and "baseline" in summary:
        summary["sats_minus_baseline"] = summary["sats"] - summary["baseline"]
    ratios = [_ratio(r["d2_asym_lesion"], r["d2_background"]) for r in results if "d2_asym_lesion" in r]
    if ratios:
        summary["min_separation_ratio"] = float(min(ratios))
    return summary
