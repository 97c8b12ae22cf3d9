"""Two-stage training: reverse thinking first, then inertial retraining on the frozen reverse path."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, DimMismatch, checkpoint_from_store, restore_into)
from .config import Config
from .data import EOS, EncodedExample, Vocab, batchify
from .model import BCTN

log = logging.getLogger(__name__)


class EmptyCorpus(ValueError):
    pass


class DivergedLoss(RuntimeError):
    pass


class IncompatibleDims(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise T.ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise T.ShapeMismatch(f"{name}: moment {m.shape} vs param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: BCTN
    losses: list = field(default_factory=list)
    checkpoint: Checkpoint | None = None


def _train(model: BCTN, stage: int, examples: Sequence[EncodedExample], cfg: Config,
           callback: Callable[[int, float], None] | None = None) -> list[float]:
    if not examples:
        raise EmptyCorpus("no training examples")
    tc = cfg.train
    shuffle_rng = np.random.default_rng([tc.seed, stage, 1])
    dropout_rng = np.random.default_rng([tc.seed, stage, 2]) if cfg.model.dropout > 0 else None
    params = model.store.trainable()
    state = AdamState()
    losses: list[float] = []
    step = 0
    for epoch in range(max(tc.epochs, 1)):
        order = shuffle_rng.permutation(len(examples))
        shuffled = [examples[i] for i in order]
        for batch in batchify(shuffled, tc.batch, pad_to=cfg.model.max_len):
            rows = batch.examples()
            n_tokens = [len(BCTN.fields(stage, ex)[1]) + 1 for ex in rows]
            total = float(sum(n_tokens))
            model.store.zero_grad()
            batch_loss = 0.0
            for ex, n in zip(rows, n_tokens):
                loss = model.loss(stage, ex, dropout_rng)
                weight = n / total
                batch_loss += weight * float(loss.data)
                T.backward(loss, seed=weight)
            if not math.isfinite(batch_loss):
                raise DivergedLoss(f"loss became {batch_loss} at step {step}")
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            clip_global_norm(grads, tc.clip)
            adam_step({n: p.data for n, p in params.items()}, grads, state, tc.lr)
            losses.append(batch_loss)
            if callback is not None:
                callback(step, batch_loss)
            step += 1
            if tc.max_steps and step >= tc.max_steps:
                return losses
        log.debug("stage %d epoch %d loss %.4f", stage, epoch, losses[-1])
    return losses


def config_snapshot(cfg: Config, vocab: Vocab) -> dict:
    return {"config": cfg.to_dict(), "vocab": list(vocab.itos)}


def stage1_train(examples: Sequence[EncodedExample], cfg: Config, vocab: Vocab,
                 callback=None) -> TrainResult:
    """Train the reverse path (answer + passage -> question) and checkpoint theta."""
    if not examples:
        raise EmptyCorpus("no training examples")
    model = BCTN(cfg, len(vocab), stage=1)
    losses = _train(model, 1, examples, cfg, callback)
    ckpt = checkpoint_from_store(model.store, 1, config_snapshot(cfg, vocab), model.theta_names())
    return TrainResult(model, losses, ckpt)


def stage2_train(examples: Sequence[EncodedExample], theta: Checkpoint | None, cfg: Config,
                 vocab: Vocab, callback=None) -> TrainResult:
    """Retrain question + passage -> answer with the reverse path from ``theta``.

    ``theta`` may be None only when the reverse path is ablated.
    """
    if not examples:
        raise EmptyCorpus("no training examples")
    model = BCTN(cfg, len(vocab), stage=2)
    if cfg.ablate.reverse_enabled:
        if theta is None:
            from .checkpoint import CheckpointMissing
            raise CheckpointMissing("stage 2 needs a stage-1 checkpoint")
        check_compatible(theta, cfg, vocab)
        try:
            restore_into(model.store, theta, model.theta_names())
        except DimMismatch as exc:
            raise IncompatibleDims(str(exc)) from None
    if cfg.train.freeze_reverse or not cfg.ablate.reverse_enabled:
        model.freeze_theta()
    losses = _train(model, 2, examples, cfg, callback)
    ckpt = checkpoint_from_store(model.store, 2, config_snapshot(cfg, vocab))
    return TrainResult(model, losses, ckpt)


def check_compatible(ckpt: Checkpoint, cfg: Config, vocab: Vocab) -> None:
    saved = ckpt.config.get("config", {})
    saved_vocab = ckpt.config.get("vocab")
    if saved_vocab is not None and saved_vocab != list(vocab.itos):
        raise IncompatibleDims("checkpoint vocabulary differs from the training vocabulary")
    for key in ("h", "J", "heads", "layers", "ff_mult", "max_len", "gate_heads"):
        have = saved.get("model", {}).get(key)
        if have is not None and have != getattr(cfg.model, key):
            raise IncompatibleDims(f"model.{key}: checkpoint {have} vs config {getattr(cfg.model, key)}")
    for key in ("layers", "heads"):
        have = saved.get("decoder", {}).get(key)
        if have is not None and have != getattr(cfg.decoder, key):
            raise IncompatibleDims(f"decoder.{key}: checkpoint {have} vs config {getattr(cfg.decoder, key)}")


def model_from_checkpoint(ckpt: Checkpoint, overrides: dict | None = None) -> tuple[BCTN, Vocab]:
    cfg = Config.from_dict(ckpt.config["config"])
    if overrides:
        cfg.update(overrides)
    vocab = Vocab(ckpt.config["vocab"][6:])
    model = BCTN(cfg, len(vocab), stage=ckpt.stage)
    try:
        restore_into(model.store, ckpt)
    except (KeyError, DimMismatch) as exc:
        raise IncompatibleDims(str(exc)) from None
    return model, vocab


# ---------------------------------------------------------------------------
# evaluation helpers


def token_accuracy(model: BCTN, stage: int, examples: Sequence[EncodedExample]) -> float:
    """Teacher-forced argmax accuracy over every target position (including [EOS])."""
    hit = count = 0
    with T.no_grad():
        for ex in examples:
            out, targets = model.teacher_forced(stage, ex)
            pred = np.argmax(out.p_final.data, axis=1)
            hit += int(np.sum(pred == targets))
            count += len(targets)
    return hit / max(count, 1)


def strip_eos(ids: Sequence[int]) -> list[int]:
    out = []
    for i in ids:
        if i == EOS:
            break
        out.append(int(i))
    return out


def decode_all(model: BCTN, stage: int, examples: Sequence[EncodedExample],
               max_len: int | None = None, beam: int | None = None) -> list[list[int]]:
    preds = []
    for ex in examples:
        first, _ = BCTN.fields(stage, ex)
        preds.append(strip_eos(model.generate(stage, first, ex.passage, max_len, beam)))
    return preds
