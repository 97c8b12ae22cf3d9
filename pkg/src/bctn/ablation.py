"""Ablation and (alpha, beta) sweeps: train both stages per cell, score on held-out data."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .config import Config
from .data import EncodedExample, QAExample, Vocab, encode_example
from .metrics import score
from .training import decode_all, stage1_train, stage2_train

log = logging.getLogger(__name__)

DEFAULT_GRID = [
    {"name": "full", "overrides": {}},
    {"name": "no_gate", "overrides": {"ablate.gate_enabled": False}},
    {"name": "no_reverse", "overrides": {"ablate.reverse_enabled": False}},
    {"name": "alpha1_beta0", "overrides": {"fusion.alpha": 1.0, "fusion.beta": 0.0}},
    {"name": "alpha0_beta1", "overrides": {"fusion.alpha": 0.0, "fusion.beta": 1.0}},
]


@dataclass
class CellResult:
    name: str
    overrides: dict
    seeds: list = field(default_factory=list)
    rouge_l: list = field(default_factory=list)
    bleu_4: list = field(default_factory=list)

    @property
    def mean_rouge_l(self) -> float:
        return sum(self.rouge_l) / len(self.rouge_l)

    @property
    def mean_bleu_4(self) -> float:
        return sum(self.bleu_4) / len(self.bleu_4)


def evaluate_tokens(model, vocab: Vocab, examples: Sequence[EncodedExample]):
    """Score stage-2 greedy answers; both sides go through detokenize -> tokenize."""
    preds = decode_all(model, 2, examples)
    cands = [vocab.detokenize(p).split() for p in preds]
    refs = [vocab.detokenize(e.answer).split() for e in examples]
    return score(cands, refs), preds


def run_cell(base: dict, overrides: dict, seed: int, train: Sequence[EncodedExample],
             test: Sequence[EncodedExample], vocab: Vocab) -> tuple[float, float]:
    cfg = Config.from_dict(base)
    cfg.update(overrides)
    cfg.train.seed = seed
    theta = None
    if cfg.ablate.reverse_enabled:
        theta = stage1_train(train, cfg, vocab).checkpoint
    model = stage2_train(train, theta, cfg, vocab).model
    report, _ = evaluate_tokens(model, vocab, test)
    return report.rouge_l, report.bleu_4


def _run_cell_job(args):
    return run_cell(*args)


def run_grid(base: Config, grid: Sequence[dict], seeds: Sequence[int],
             train: Sequence[QAExample], test: Sequence[QAExample],
             workers: int | None = None) -> list[CellResult]:
    """Every (cell, seed) pair trains from scratch; seeds are shared across cells."""
    vocab = Vocab.for_examples(list(train) + list(test))
    enc_train = [encode_example(e, vocab, base.model.max_len) for e in train]
    enc_test = [encode_example(e, vocab, base.model.max_len) for e in test]
    results = [CellResult(c["name"], dict(c.get("overrides", {}))) for c in grid]
    jobs = [(base.to_dict(), r.overrides, s, enc_train, enc_test, vocab)
            for r in results for s in seeds]
    workers = workers or int(os.environ.get("BCTN_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell_job, jobs))
    else:
        outcomes = [_run_cell_job(j) for j in jobs]
    it = iter(outcomes)
    for r in results:
        for s in seeds:
            rl, b4 = next(it)
            r.seeds.append(s)
            r.rouge_l.append(rl)
            r.bleu_4.append(b4)
            log.info("%s seed=%d rouge_l=%.4f bleu_4=%.4f", r.name, s, rl, b4)
    return results


def write_table(results: Sequence[CellResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "overrides", "seeds", "rouge_l", "bleu_4", "rouge_l_per_seed", "bleu_4_per_seed"])
        for r in results:
            w.writerow([r.name, json.dumps(r.overrides, sort_keys=True), " ".join(map(str, r.seeds)),
                        f"{r.mean_rouge_l:.6f}", f"{r.mean_bleu_4:.6f}",
                        " ".join(f"{x:.6f}" for x in r.rouge_l), " ".join(f"{x:.6f}" for x in r.bleu_4)])


def load_grid(path) -> tuple[list[dict], list[int] | None]:
    """Grid file: {"cells": [{"name", "overrides"}...], "seeds": [...]} or a bare list of cells."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, list):
        return raw, None
    return raw["cells"], raw.get("seeds")
