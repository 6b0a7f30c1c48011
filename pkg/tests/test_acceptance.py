"""End-to-end acceptance criteria.

Each test appends one ``PASS``/``FAIL`` line to ``REPORT``; conftest prints
them in the terminal summary. Criteria 5, 6 and 8 share one set of trained
BiCA models (five seeds, naive and MAML) on the 20-class keyword fixture.
"""

import json
import shutil
import time

import numpy as np
import pytest
import torch

from fewmatch import cli
from fewmatch import metalearn as ML
from fewmatch.analysis import cov_score, head_layer_sweep
from fewmatch.episode import sample_episode
from fewmatch.matchers import Matcher, TransformerConfig, episode_loss
from fewmatch.synthetic import KeywordCorpusConfig, keyword_task_data, write_keyword_corpus

from helpers import KINDS, REPORT, batch, random_seq, small_matcher
from test_episode import check_invariants, make_pool
from test_matchers import finite_difference_check

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
# desk-scale budget for the keyword fixture: 3 meta-tasks per batch, 100 batches per epoch
FIXTURE_TRAINING = dict(batch_size=3, train_batches=100, val_batches=20, test_batches=40, max_epochs=6, patience=3)


def report(number, ok, detail):
    REPORT.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---- 1. gradients ----

def test_criterion_01_gradients():
    t = time.time()
    errors = {kind: finite_difference_check(kind)[0] for kind in KINDS}
    elapsed = time.time() - t
    ok = max(errors.values()) < 1e-4 and elapsed < 120
    report(1, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.0f}s")
    assert ok, errors


# ---- 2. second-order MAML ----

def test_criterion_02_second_order():
    outer = {}
    for second_order in (True, False):
        p = {"theta": torch.tensor(1.0, dtype=torch.float64, requires_grad=True)}
        adapted = ML.inner_adapt(lambda q: q["theta"] ** 2 / 2, p, 0.1, second_order=second_order)
        (g,) = torch.autograd.grad(adapted["theta"] ** 2 / 2, p["theta"])
        outer[second_order] = g.item()
    closed_form = abs(outer[True] - 0.81) < 1e-15 and abs(outer[False] - 0.90) < 1e-15

    rng = np.random.default_rng(0)
    worst = 0.0
    for kind in ("bica", "ca", "sn", "owp"):
        m = small_matcher(kind, vocab_size=20, dim=4)
        p0 = ML.cast_params(m.init_params(2), torch.float64)
        ref = batch([random_seq(rng, 20, 5)])
        sup, qry = batch([random_seq(rng, 20, 5) for _ in range(2)]), batch([random_seq(rng, 20, 5) for _ in range(2)])
        y = torch.tensor([1, 0])

        def composed(p):
            adapted = ML.inner_adapt(lambda q: episode_loss(m, q, ref, sup, y, positives=sup),
                                     p, 0.5, 1, True)
            return episode_loss(m, adapted, ref, qry, y, positives=sup)

        grads = torch.autograd.grad(composed(p0), list(p0.values()))
        for (name, v), g in zip(p0.items(), grads):
            idx = rng.choice(v.numel(), min(4, v.numel()), replace=False)
            an, fd = [], []
            for i in idx:
                vals = []
                for sign in (1, -1):
                    q = {k: t.detach().clone().requires_grad_(True) for k, t in p0.items()}
                    with torch.no_grad():
                        q[name].view(-1)[i] += sign * 1e-5
                    vals.append(composed(q).item())
                fd.append((vals[0] - vals[1]) / 2e-5)
                an.append(g.reshape(-1)[i].item())
            an, fd = np.array(an), np.array(fd)
            scale = max(np.linalg.norm(an), np.linalg.norm(fd))
            if scale > 1e-8:
                worst = max(worst, np.linalg.norm(an - fd) / scale)
    ok = closed_form and worst < 1e-3
    report(2, ok, f"quadratic {outer[True]:.15g} / {outer[False]:.15g}; composed-map FD rel err {worst:.1e}")
    assert ok


# ---- 3. Cov_Score ----

def loop_cov_score(F):
    d, n = F.shape
    mu = [sum(F[i, s] for s in range(n)) / n for i in range(d)]
    total = 0.0
    for i in range(d):
        for j in range(d):
            total += abs(sum((F[i, s] - mu[i]) * (F[j, s] - mu[j]) for s in range(n)) / (n - 1))
    return total / d**2


def test_criterion_03_cov_score():
    rng = np.random.default_rng(3)
    oracle_err = 0.0
    for _ in range(100):
        d, n = int(rng.integers(1, 21)), int(rng.integers(2, 51))
        F = rng.normal(size=(d, n)) * rng.uniform(0.1, 3)
        oracle_err = max(oracle_err, abs(cov_score(F) - loop_cov_score(F)))
    two = cov_score(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    scale_err = 0.0
    for _ in range(100):
        F, c = rng.normal(size=(int(rng.integers(1, 21)), int(rng.integers(2, 51)))), rng.uniform(-10, 10)
        base = cov_score(F)
        scale_err = max(scale_err, abs(cov_score(c * F) - c * c * base) / max(c * c * base, 1.0))
    ok = oracle_err <= 1e-10 and two == 2.0 and scale_err <= 1e-9
    report(3, ok, f"oracle err {oracle_err:.1e}; 2x2 -> {two!r}; scaling err {scale_err:.1e}")
    assert ok


# ---- 4. episode invariants ----

def test_criterion_04_episode_invariants():
    pools = {k: make_pool(n_classes=k, per_class=30, seed=k) for k in (2, 5, 12)}
    rng = np.random.default_rng(4)
    violations = 0
    for i in range(10_000):
        pool = pools[(2, 5, 12)[i % 3]]
        classes = list(pool)
        pos = classes[int(rng.integers(len(classes)))]
        negs = [c for c in classes if c != pos][: int(rng.integers(1, len(classes)))]
        n = int(rng.integers(1, 11))
        ep = sample_episode(pool, pos, negs, n=n, rng_seed=i, stratify=bool(i % 2))
        try:
            check_invariants(ep, pool, n, n)
            labels = [y for _, y in ep.support + ep.query]
            assert labels.count(1) == n and labels.count(0) == n
        except AssertionError:
            violations += 1
    report(4, violations == 0, f"10000 episodes, {violations} violations")
    assert violations == 0


# ---- 5, 6, 8. BiCA on the keyword fixture ----

@pytest.fixture(scope="session")
def bica_runs():
    data, vocab = keyword_task_data(KeywordCorpusConfig())
    m = Matcher("bica", vocab_size=len(vocab))
    runs = []
    for seed in SEEDS:
        row = {}
        for method in ("naive", "maml"):
            cfg = ML.classical_config(method, seed=seed, **FIXTURE_TRAINING)
            t = time.time()
            trained = ML.fit(m, data, cfg, vocab.vectors)
            full = ML.adapt_and_evaluate(m, trained.params, data.stream("test", cfg), cfg)
            one = ML.adapt_and_evaluate(m, trained.params, data.stream("test", cfg, n_support=1), cfg)
            row[method] = {"f1": full.final["macro_f1"], "loss": [s["loss"] for s in full.steps],
                           "f1_support1": one.final["macro_f1"], "seconds": time.time() - t}
        runs.append(row)
    return runs


def test_criterion_05_maml_beats_finetune(bica_runs):
    wins = sum(r["maml"]["f1"] >= r["naive"]["f1"] for r in bica_runs)
    slowest = max(r[k]["seconds"] for r in bica_runs for k in r)
    pairs = ", ".join(f"{r['maml']['f1']:.3f}/{r['naive']['f1']:.3f}" for r in bica_runs)
    ok = wins >= 4 and slowest < 15 * 60
    report(5, ok, f"MAML >= finetune in {wins}/5 seeds (maml/naive F1 {pairs}); slowest run {slowest:.0f}s")
    assert ok


def test_criterion_06_one_step_drop(bica_runs):
    drop = lambda r: r["loss"][0] - r["loss"][1]
    wins = sum(drop(r["maml"]) > drop(r["naive"]) for r in bica_runs)
    pairs = ", ".join(f"{drop(r['maml']):.2f}/{drop(r['naive']):.2f}" for r in bica_runs)
    report(6, wins >= 4, f"MAML step-1 drop larger in {wins}/5 seeds (maml/naive {pairs})")
    assert wins >= 4


def test_criterion_08_support_size(bica_runs):
    wins = sum(r["maml"]["f1"] > r["maml"]["f1_support1"] for r in bica_runs)
    pairs = ", ".join(f"{r['maml']['f1']:.3f}/{r['maml']['f1_support1']:.3f}" for r in bica_runs)
    report(8, wins >= 4, f"support 10 > support 1 in {wins}/5 seeds (F1 {pairs})")
    assert wins >= 4


# ---- 7. Cov_Score over heads and layers ----

def test_criterion_07_cov_trend():
    data, vocab = keyword_task_data(KeywordCorpusConfig())
    m = Matcher("transformer", vocab_size=len(vocab), transformer=TransformerConfig(d_model=64))
    cfg = ML.transformer_config("maml", batch_size=3, train_batches=30, val_batches=5, max_epochs=2, patience=2)
    sweep = head_layer_sweep(m, data, cfg, heads=[1, 4, 16], layers=[1, 4], seeds=[0, 1, 2],
                             embeddings=vocab.vectors)
    mean = {(r["layers"], r["heads"]): r["mean"] for r in sweep.summary(["layers", "heads"])}
    by_heads = all(mean[(layers, 16)] > mean[(layers, 1)] for layers in (1, 4))
    by_layers = all(mean[(4, h)] > mean[(1, h)] for h in (1, 4, 16))
    cells = ", ".join(f"L{l}H{h} {v:.3g}" for (l, h), v in sorted(mean.items()))
    report(7, by_heads and by_layers, f"heads trend {by_heads}, layers trend {by_layers} ({cells})")
    assert by_heads and by_layers


# ---- 9. determinism ----

def test_criterion_09_cli_determinism(tmp_path):
    write_keyword_corpus(tmp_path / "raw", KeywordCorpusConfig(n_classes=12, per_class=30, dim=8, n_filler=40))
    tiny = ["--batch-size", "2", "--n", "2", "--train-batches", "3", "--val-batches", "1", "--test-batches", "2",
            "--epochs", "1", "--dtype", "float64"]
    differing = []
    d = tmp_path / "run"
    for name in ("first", "second"):
        steps = [
            ["prepare", "--corpus", tmp_path / "raw/corpus.jsonl", "--embeddings", tmp_path / "raw/vectors.txt",
             "--split", '{"ratio": [5, 3, 4]}', "--out", d / "bundle"],
            ["train", "--data", d / "bundle", "--matcher", "bica", "--method", "maml", "--out", d / "train", *tiny],
            ["eval", "--checkpoint", d / "train/checkpoint.npz", "--runs", 2, "--dump-features", "--out", d / "eval"],
            ["analyze", "cov", d / "eval/features.csv", "--out", d / "cov"],
            ["analyze", "pca", d / "eval/features.csv", "--k", 2, "--out", d / "pca"],
            ["sweep", "support", "--data", d / "bundle", "--matcher", "owp", "--method", "naive", "--sizes", "1,2",
             "--seeds", "0,1", "--out", d / "support", *tiny],
            ["sweep", "heads", "--data", d / "bundle", "--heads", "1,2", "--layers", "1", "--d-model", 8,
             "--d-ff", 8, "--seeds", "0", "--batches", 1, "--out", d / "heads", *tiny],
        ]
        for argv in steps:
            assert cli.main([str(a) for a in ["--seed", 11, *argv]]) == 0, argv
        shutil.move(d, tmp_path / name)  # both runs write to the same paths
    outputs = ["bundle/manifest.json", "train/metrics.json", "eval/metrics.json", "cov/metrics.json",
               "pca/metrics.json", "support/metrics.json", "heads/metrics.json"]
    for rel in outputs:
        a, b = (tmp_path / "first" / rel).read_bytes(), (tmp_path / "second" / rel).read_bytes()
        json.loads(a)
        if a != b:
            differing.append(rel)
    report(9, not differing, f"{len(outputs)} metrics files compared, differing: {differing or 'none'}")
    assert not differing


# ---- 10. PAD invariance ----

def test_criterion_10_pad_invariance():
    rng = np.random.default_rng(10)
    models = {k: (small_matcher(k), small_matcher(k).init_params(k == "transformer")) for k in KINDS}
    changed = 0
    for _ in range(1000):
        r, c = random_seq(rng, 30), random_seq(rng, 30)
        er, ec = int(rng.integers(0, 9)), int(rng.integers(0, 9))
        for m, p in models.values():
            base = m.forward(p, batch([r]), batch([c])).logits
            if not torch.equal(m.forward(p, batch([r.padded(er)]), batch([c.padded(ec)])).logits, base):
                changed += 1
    report(10, changed == 0, f"1000 pairs x {len(KINDS)} matchers, {changed} logit changes")
    assert changed == 0
