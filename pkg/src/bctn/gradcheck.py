"""Finite-difference check of the full per-example stage losses."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import Config, tiny_config
from .data import QAExample, Vocab, encode_example
from .model import BCTN

# Short enough that [CLS] answer [SEP] passage [SEP] stays within 12 positions.
PROBE_EXAMPLE = QAExample(passage="ann in park", question="where ann ?", answer="ann in park")


def probe_example(cfg: Config, ex: QAExample = PROBE_EXAMPLE):
    vocab = Vocab.for_examples([ex])
    return encode_example(ex, vocab, cfg.model.max_len), vocab


def check_stage(stage: int, cfg: Config | None = None, max_coords: int | None = 64,
                seed: int = 0, eps: float = 1e-3) -> T.GradCheckResult:
    """Grad-check the stage loss over every parameter that receives a gradient.

    The model is run in float64; ``max_coords`` caps the coordinates sampled per
    tensor (None checks all of them).
    """
    cfg = (cfg or tiny_config()).copy()
    cfg.model.dropout = 0.0
    with T.precision(np.float64):
        ex, vocab = probe_example(cfg)
        model = BCTN(cfg, len(vocab), stage=stage, seed=seed)
        model.store.astype(np.float64)
        params = model.store.trainable()
        if stage == 1:
            params = {n: p for n, p in params.items() if n in set(model.theta_names())}
        coords = None
        if max_coords is not None:
            rng = np.random.default_rng([seed, 99])
            coords = {}
            for n, p in params.items():
                size = p.data.size
                coords[n] = (range(size) if size <= max_coords
                             else sorted(rng.choice(size, max_coords, replace=False).tolist()))
        return T.grad_check(lambda: model.loss(stage, ex), params, eps=eps, coords=coords)
