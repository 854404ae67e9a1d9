"""Synthetic-task experiments comparing training regimes.

``run_seed`` trains the phrase-only, MUL and MSE systems on one generated
task, scores them on the test set with and without the limited vocabulary,
then fine-tunes the MSE model on growing slices of parallel data and
compares with models trained on those slices from scratch.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import corpus_builder as C
from . import pipeline as P
from .synthetic import gen_toy_task
from .training import TrainingConfig

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    vocab_size: int = 50
    sentence_count: int = 3000
    n_pairs: int = 2000
    n_test: int = 200
    beam: int = 12
    # toy-scale V1: the corpus has only ``vocab_size`` target words
    v1_size: int = 10
    parallel_sizes: tuple[int, ...] = (200, 500, 1000)
    finetune: bool = True
    train: TrainingConfig = field(default_factory=lambda: TrainingConfig(lr=0.5, batch=4, epochs=20, hidden=64))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parallel_sizes"] = list(self.parallel_sizes)
        return d


def sample_pairs(pairs: Sequence[C.PartiallyAlignedPair], n: int, seed: int) -> list[C.PartiallyAlignedPair]:
    if len(pairs) <= n:
        return list(pairs)
    idx = np.sort(np.random.default_rng(seed).choice(len(pairs), n, replace=False))
    return [pairs[i] for i in idx]


def run_seed(seed: int, cfg: ExperimentConfig | None = None) -> dict:
    """All systems for one seed; returns BLEU scores and run details."""
    cfg = cfg or ExperimentConfig()
    tcfg = replace(cfg.train, seed=seed, v1_size=cfg.v1_size)
    t0 = time.perf_counter()
    task = gen_toy_task(cfg.vocab_size, cfg.sentence_count, seed=seed, n_test=cfg.n_test,
                        n_parallel=max(cfg.parallel_sizes, default=0))
    retained, specials = C.filter_phrase_pairs(task.phrase_table)
    smap = C.special_map(specials)
    mined = C.extract_partially_aligned(task.src_mono, task.tgt_mono, retained)
    pairs = sample_pairs(mined, cfg.n_pairs, seed)
    out: dict = {"seed": seed, "mined_pairs": len(mined), "pairs": len(pairs),
                 "aligned_ratio": C.aligned_ratio(pairs), "bleu": {}, "logs": {}, "seconds": {}}

    def score(name, tm, limited=False):
        rep, _ = P.evaluate_model(tm, task.test, beam=cfg.beam, limited_vocab=limited)
        out["bleu"][name] = rep.bleu
        log.info("seed %d %s: %s", seed, name, rep.line())
        return rep

    def timed(name, fn):
        t = time.perf_counter()
        tm = fn()
        out["seconds"][name] = time.perf_counter() - t
        out["logs"][name] = tm.result.log
        return tm

    phrase_data = [(list(p.source_tokens), list(p.target_tokens)) for p in retained]
    score("phrase", timed("phrase", lambda: P.train_parallel(phrase_data, task.dev, smap, tcfg)))
    score("mul", timed("mul", lambda: P.train_partially_aligned(pairs, task.dev, smap,
                                                                 replace(tcfg, agreement="mul"))))
    mse = timed("mse", lambda: P.train_partially_aligned(pairs, task.dev, smap, replace(tcfg, agreement="mse")))
    score("mse", mse)
    score("mse+limited", mse, limited=True)

    if cfg.finetune:
        for n in cfg.parallel_sizes:
            par = task.parallel[:n]
            score(f"tuned{n}", timed(f"tuned{n}", lambda: P.continue_on_parallel(mse, par, task.dev, tcfg)))
            score(f"scratch{n}", timed(f"scratch{n}", lambda: P.train_parallel(par, task.dev, smap, tcfg)))
    out["seconds"]["total"] = time.perf_counter() - t0
    return out


def summarize(runs: Sequence[dict]) -> dict[str, float]:
    names = list(runs[0]["bleu"])
    return {n: float(np.mean([r["bleu"][n] for r in runs])) for n in names}


def trend_checks(mean: dict[str, float], margin: float = 1.0) -> dict[str, bool]:
    return {
        "phrase < mul": mean["mul"] - mean["phrase"] >= margin,
        "mul < mse": mean["mse"] - mean["mul"] >= margin,
        "mse <= mse+limited": mean["mse+limited"] - mean["mse"] >= margin,
    }


def finetune_checks(mean: dict[str, float], sizes: Sequence[int], margin: float = 2.0) -> dict[str, bool]:
    n0 = sizes[0]
    gaps = [mean[f"tuned{n}"] - mean[f"scratch{n}"] for n in sizes]
    return {
        f"tuned{n0} beats un-tuned": mean[f"tuned{n0}"] - mean["mse"] >= margin,
        f"tuned{n0} beats scratch{n0}": gaps[0] >= margin,
        "gap shrinks with data": all(b <= a for a, b in zip(gaps, gaps[1:])),
    }


def write_report(runs: Sequence[dict], cfg: ExperimentConfig, out_dir) -> dict:
    """CSV of per-seed scores, a JSON summary and figures under ``out_dir``."""
    from .report import plot_finetune_gap, plot_system_scores, plot_training_curves

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(runs[0]["bleu"])
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *names])
        for r in runs:
            w.writerow([r["seed"], *(f"{r['bleu'][n]:.2f}" for n in names)])
    mean = summarize(runs)
    summary = {"config": cfg.to_dict(), "mean_bleu": mean, "trend": trend_checks(mean), "runs": runs}
    files = {"scores": str(out / "scores.csv")}
    main = ["phrase", "mul", "mse", "mse+limited"]
    files["systems_png"] = str(plot_system_scores({n: [r["bleu"][n] for r in runs] for n in main},
                                                  out / "systems.png"))
    if cfg.finetune and cfg.parallel_sizes:
        sizes = list(cfg.parallel_sizes)
        summary["finetune"] = finetune_checks(mean, sizes)
        files["finetune_png"] = str(plot_finetune_gap(sizes, [mean[f"tuned{n}"] for n in sizes],
                                                      [mean[f"scratch{n}"] for n in sizes],
                                                      out / "finetune.png", base=mean["mse"]))
    files["curves_png"] = str(plot_training_curves(runs[0]["logs"]["mse"], out / "mse_curves.png",
                                                   title=f"MSE system, seed {runs[0]['seed']}"))
    summary["files"] = files
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def run_experiment(seeds: Sequence[int] = (0, 1, 2), cfg: ExperimentConfig | None = None, out_dir=None) -> dict:
    cfg = cfg or ExperimentConfig()
    runs = [run_seed(s, cfg) for s in seeds]
    if out_dir is not None:
        return write_report(runs, cfg, out_dir)
    mean = summarize(runs)
    summary = {"mean_bleu": mean, "trend": trend_checks(mean), "runs": runs}
    if cfg.finetune and cfg.parallel_sizes:
        summary["finetune"] = finetune_checks(mean, list(cfg.parallel_sizes))
    return summary
