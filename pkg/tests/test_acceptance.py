"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Thresholds are the stated ones; nothing here is loosened to make a run pass.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from bctn import tensor as T
from bctn.ablation import DEFAULT_GRID, run_grid
from bctn.checkpoint import load_checkpoint, save_checkpoint
from bctn.cli import main
from bctn.config import Config, tiny_config
from bctn.data import Vocab, encode_example, generate_toy_corpus, load_jsonl, save_jsonl
from bctn.gradcheck import check_stage, probe_example
from bctn.metrics import bleu4, rouge_l
from bctn.model import BCTN
from bctn.training import decode_all, stage1_train, stage2_train, token_accuracy

import oracles

S = str.split


# -- 1 ----------------------------------------------------------------------


def test_criterion_1_gradient_fidelity(report):
    cfg = tiny_config()
    ex, _ = probe_example(cfg)
    L = len(ex.passage) + len(ex.answer) + 3
    t0 = time.perf_counter()
    results = {stage: check_stage(stage, cfg) for stage in (1, 2)}
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results.values())
    checked = sum(r.n_checked for r in results.values())
    ok = worst < 1e-3 and elapsed < 60 and L <= 12 and checked > 0
    report(1, ok, f"max rel error {worst:.2e} over {checked} coords (h={cfg.model.h}, J={cfg.model.J}, "
                  f"L={L}), {elapsed:.1f}s")
    assert cfg.model.h == 8 and cfg.model.J == 2 and L <= 12
    assert worst < 1e-3
    assert elapsed < 60


# -- 2 ----------------------------------------------------------------------


def _collect_distributions(model, stage, ex):
    prep_out = []
    out, _ = model.teacher_forced(stage, ex, prep_out=prep_out)
    prep = prep_out[0]
    rows = {"p_vocab": out.p_vocab.data, "p_copy": out.p_copy.data, "p_final": out.p_final.data}
    for name, trace in prep.traces.items():
        rows[f"{name}.gamma"] = np.stack([s.gamma.data for s in trace.states])
        rows[f"{name}.eta"] = np.stack([s.eta.data for s in trace.states])
    units = {"switch": out.switch.data}
    gate = prep.probe.get("gate")
    if gate is not None:
        alpha = gate.alpha.data
        steps = alpha.shape[0]
        # row t attends over prefix steps 0..t; later entries are masked to exactly 0
        assert all(np.all(alpha[t, ..., t + 1:] == 0) for t in range(steps))
        assert np.all(alpha >= 0)
        rows["gate_attention"] = np.concatenate([alpha[t, ..., : t + 1].sum(-1).ravel() for t in range(steps)])
        units["g"] = gate.g.data
    return rows, units


def test_criterion_2_distribution_invariants(report):
    raw = generate_toy_corpus(21, 40)
    vocab = Vocab.for_examples(raw)
    exs = [encode_example(e, vocab, 48) for e in raw]
    worst = 0.0
    bad_unit = 0
    passes = 0
    seen = set()
    for i in range(200):
        stage = 1 + i % 2
        cfg = tiny_config(**{"model.max_len": 48, "model.J": 2})
        model = BCTN(cfg, len(vocab), stage=stage, seed=1000 + i)
        rows, units = _collect_distributions(model, stage, exs[i % len(exs)])
        for name, arr in rows.items():
            if name == "gate_attention":
                dev = np.abs(arr - 1.0).max()
            else:
                assert np.all(arr >= 0), name
                dev = np.abs(arr.sum(-1) - 1.0).max()
            worst = max(worst, float(dev))
            seen.add(name)
        for name, arr in units.items():
            bad_unit += int(np.sum((arr <= 0) | (arr >= 1)))
            seen.add(name)
        passes += 1
    need = {"p_vocab", "p_copy", "p_final", "reverse.gamma", "reverse.eta", "inertial.gamma",
            "inertial.eta", "gate_attention", "switch", "g"}
    ok = worst <= 1e-6 and bad_unit == 0 and need <= seen and passes == 200
    report(2, ok, f"{passes} passes, max |sum-1| = {worst:.2e}, gate/switch outside (0,1): {bad_unit}")
    assert need <= seen
    assert worst <= 1e-6
    assert bad_unit == 0


# -- 3 ----------------------------------------------------------------------

OVERFIT = {"model.h": 16, "model.heads": 2, "model.gate_heads": 2, "model.layers": 1,
           "model.max_len": 48, "model.dropout": 0.0, "decoder.layers": 1, "decoder.heads": 2,
           "train.lr": 3e-3, "train.batch": 10, "train.epochs": 10_000, "train.max_steps": 600}


@pytest.fixture(scope="module")
def overfit():
    raw = generate_toy_corpus(7, 50)
    vocab = Vocab.for_examples(raw)
    cfg = Config()
    cfg.update(OVERFIT)
    exs = [encode_example(e, vocab, cfg.model.max_len) for e in raw]
    t0 = time.perf_counter()
    s1 = stage1_train(exs, cfg, vocab)
    s2 = stage2_train(exs, s1.checkpoint, cfg, vocab)
    acc1 = token_accuracy(s1.model, 1, exs)
    acc2 = token_accuracy(s2.model, 2, exs)
    preds = decode_all(s2.model, 2, exs)
    exact = sum(p == list(e.answer) for p, e in zip(preds, exs))
    elapsed = time.perf_counter() - t0
    steps = len(s1.losses) + len(s2.losses)
    return dict(raw=raw, s2=s2, acc1=acc1, acc2=acc2, exact=exact, elapsed=elapsed, steps=steps)


def test_criterion_3_overfit(report, overfit):
    o = overfit
    ok = o["acc1"] > 0.95 and o["acc2"] > 0.95 and o["exact"] >= 45 and o["elapsed"] < 600 and o["steps"] <= 2000
    report(3, ok, f"token acc stage1 {o['acc1']:.3f} stage2 {o['acc2']:.3f}, exact {o['exact']}/50, "
                  f"{o['steps']} steps, {o['elapsed']:.0f}s")
    assert o["acc1"] > 0.95 and o["acc2"] > 0.95
    assert o["exact"] >= 45
    assert o["steps"] <= 2000
    assert o["elapsed"] < 600


def test_overfit_checkpoint_generates_training_answer(overfit, tmp_path, capsys):
    save_checkpoint(overfit["s2"].checkpoint, tmp_path / "s2.ckpt")
    ex = overfit["raw"][0]
    capsys.readouterr()
    assert main(["generate", "--ckpt", str(tmp_path / "s2.ckpt"), "--passage", ex.passage,
                 "--question", ex.question]) == 0
    assert capsys.readouterr().out.strip() == ex.answer


# -- 4 ----------------------------------------------------------------------

ABLATION = {"model.h": 32, "model.heads": 4, "model.gate_heads": 4, "model.layers": 1,
            "model.max_len": 48, "model.dropout": 0.1, "decoder.layers": 1, "decoder.heads": 4,
            "train.lr": 2e-3, "train.batch": 16, "train.epochs": 10}
ABLATION_CELLS = ("full", "no_gate", "no_reverse", "alpha0_beta1")


def test_criterion_4_bidirectional_direction(report):
    cfg = Config()
    cfg.update(ABLATION)
    raw = generate_toy_corpus(11, 600)
    grid = [c for c in DEFAULT_GRID if c["name"] in ABLATION_CELLS]
    t0 = time.perf_counter()
    results = {r.name: r for r in run_grid(cfg, grid, [0, 1, 2], raw[:500], raw[500:])}
    elapsed = time.perf_counter() - t0
    rl = {n: r.mean_rouge_l for n, r in results.items()}
    ordering = rl["full"] >= rl["no_gate"] >= rl["no_reverse"]
    reverse_gain = rl["full"] - rl["no_reverse"]
    balance_gain = rl["full"] - rl["alpha0_beta1"]
    ok = ordering and reverse_gain > 0 and balance_gain > 0.10 and elapsed < 3600
    per_seed = "; ".join(f"{n} {rl[n]:.4f} {[round(x, 4) for x in results[n].rouge_l]}" for n in ABLATION_CELLS)
    report(4, ok, f"ROUGE-L {per_seed}; full-no_reverse {reverse_gain:+.4f} (>0), "
                  f"(0.8,0.2)-(0,1) {balance_gain:+.4f} (>0.10), {elapsed:.0f}s")
    assert elapsed < 3600
    assert ordering, rl
    assert reverse_gain > 0
    assert balance_gain > 0.10


# -- 5 ----------------------------------------------------------------------


def test_criterion_5_metric_correctness(report):
    cases = {
        "rouge cat": (rouge_l(S("the cat sat"), S("the cat ate")), oracles.rouge_l(S("the cat sat"), S("the cat ate"))),
        "rouge identical": (rouge_l(S("a b c d"), S("a b c d")), oracles.rouge_l(S("a b c d"), S("a b c d"))),
        "bleu identical": (bleu4([S("a b c d e")], [S("a b c d e")]), oracles.bleu4([S("a b c d e")], [S("a b c d e")])),
        "bleu disjoint": (bleu4([S("the cat sat")], [S("a dog ran")]), oracles.bleu4([S("the cat sat")], [S("a dog ran")])),
    }
    agree = all(abs(a - b) < 1e-12 for a, b in cases.values())
    ok = (abs(cases["rouge cat"][0] - 0.6667) <= 1e-4 and cases["rouge identical"][0] == 1.0
          and cases["bleu identical"][0] == 1.0 and cases["bleu disjoint"][0] < 0.05 and agree)
    report(5, ok, "rouge cat {:.4f}, identical rouge {} bleu {}, disjoint bleu {:.4f}, oracle agreement {}".format(
        cases["rouge cat"][0], cases["rouge identical"][0], cases["bleu identical"][0],
        cases["bleu disjoint"][0], agree))
    assert ok


# -- 6 ----------------------------------------------------------------------


def test_criterion_6_determinism_and_persistence(report, tmp_path):
    save_jsonl(generate_toy_corpus(5, 12), tmp_path / "d.jsonl")
    conf = {"model": {"h": 8, "heads": 2, "gate_heads": 2, "layers": 1, "max_len": 48, "dropout": 0.1},
            "decoder": {"layers": 1, "heads": 2}, "train": {"epochs": 2, "batch": 4, "seed": 3}}
    (tmp_path / "c.json").write_text(json.dumps(conf))
    env = {**os.environ, "PYTHONHASHSEED": "random"}
    for run in ("a", "b"):
        subprocess.run([sys.executable, "-m", "bctn.cli", "train", "--stage", "1", "--config",
                        str(tmp_path / "c.json"), "--data", str(tmp_path / "d.jsonl"), "--out",
                        str(tmp_path / run)], check=True, env=env, capture_output=True)
    csv_same = (tmp_path / "a" / "stage1_loss.csv").read_bytes() == (tmp_path / "b" / "stage1_loss.csv").read_bytes()

    ckpt = load_checkpoint(tmp_path / "a" / "stage1.ckpt")
    save_checkpoint(ckpt, tmp_path / "copy.ckpt")
    again = load_checkpoint(tmp_path / "copy.ckpt")
    round_trip = ((tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "a" / "stage1.ckpt").read_bytes()
                  and all(again.tensors[n].tobytes() == a.tobytes() for n, a in ckpt.tensors.items()))

    cfg = Config.from_dict(ckpt.config["config"])
    cfg.train.max_steps = 6
    vocab = Vocab(ckpt.config["vocab"][6:])
    exs = [encode_example(e, vocab, cfg.model.max_len) for e in load_jsonl(tmp_path / "d.jsonl")]
    s2 = stage2_train(exs, ckpt, cfg, vocab)
    frozen = all(s2.model.store[n].data.tobytes() == a.tobytes() for n, a in ckpt.tensors.items())
    fresh = BCTN(cfg, len(vocab), stage=2)
    trained = s2.model.store["decoder2.vocab.w"].data.tobytes() != fresh.store["decoder2.vocab.w"].data.tobytes()
    ok = csv_same and round_trip and frozen and trained
    report(6, ok, f"loss CSVs identical {csv_same}, checkpoint bit-exact {round_trip}, "
                  f"theta frozen in stage 2 {frozen} ({len(ckpt.tensors)} tensors)")
    assert csv_same and round_trip and frozen and trained


# -- 7 ----------------------------------------------------------------------


def test_criterion_7_ablation_plumbing(report):
    raw = generate_toy_corpus(9, 6)
    vocab = Vocab.for_examples(raw)
    exs = [encode_example(e, vocab, 48) for e in raw]

    # gate disabled: g == 1 and u_new == u_tilde exactly
    cfg = tiny_config(**{"model.max_len": 48, "ablate.gate_enabled": False})
    model = BCTN(cfg, len(vocab), stage=1, seed=4)
    gate_identity = True
    for ex in exs:
        prep = model.prepare(1, ex.answer, ex.passage)
        u_tilde = model.reverse.reason(prep.enc.U, prep.enc.V_tilde)
        u_new, g = model.reverse.apply_gate(prep.enc.U, u_tilde, T.zeros((3, cfg.model.h)), enabled=False)
        r = prep.memory_fn(T.zeros((3, cfg.model.h)))
        gate_identity &= bool(np.all(g.data == 1.0))
        gate_identity &= all(np.array_equal(u_new.data[t], u_tilde.data) for t in range(3))
        gate_identity &= np.array_equal(prep.probe["u_new"].data[0], u_tilde.data)

    # beta = 0: perturbing every reverse-thinker parameter leaves the stage-2 outputs bitwise unchanged
    cfg = tiny_config(**{"model.max_len": 48, "fusion.beta": 0.0})
    model = BCTN(cfg, len(vocab), stage=2, seed=5)
    before = [model.teacher_forced(2, ex)[0].p_final.data.copy() for ex in exs]
    rng = np.random.default_rng(0)
    for n in model.store.names("reverse_thinker."):
        model.store[n].data += rng.standard_normal(model.store[n].data.shape).astype(np.float32)
    after = [model.teacher_forced(2, ex)[0].p_final.data for ex in exs]
    beta_independent = all(np.array_equal(a, b) for a, b in zip(before, after))

    # control: with beta > 0 the same perturbation does reach the outputs
    cfg = tiny_config(**{"model.max_len": 48})
    model = BCTN(cfg, len(vocab), stage=2, seed=5)
    base = model.teacher_forced(2, exs[0])[0].p_final.data.copy()
    model.store["reverse_thinker.W_a"].data += 0.5
    control = not np.array_equal(base, model.teacher_forced(2, exs[0])[0].p_final.data)

    ok = gate_identity and beta_independent and control
    report(7, ok, f"gate off gives g==1 and u_new==u_tilde {gate_identity}; beta=0 outputs bitwise "
                  f"independent of reverse thinker {beta_independent}; beta>0 control differs {control}")
    assert gate_identity and beta_independent and control
