"""Acceptance criteria 1-12, each run at its stated tolerance and budget.

The conftest hook prints one PASS/FAIL line per criterion at the end of
the session.
"""

import json
import time

import numpy as np
import pytest

from conftest import FIXTURES
from oracles import (
    all_lambda_settings,
    brute_force_pipeline,
    lm_loss_ld,
    random_nbest_dicts,
    sru_scalar,
    wer_table,
)
from sruasr.acoustic import FrontendConfig, MultistreamConfig, MultistreamModel, TdnnfLayer, impulse_support, receptive_field
from sruasr.cli import main
from sruasr.errors import ConfigurationError
from sruasr.lm import LmConfig, LmModel, SruCell, conditional_logprobs, sru_cell_forward
from sruasr.lm.model import loss_and_grads
from sruasr.rescoring import Hypothesis, Lambdas, NBestList, edit_align, grid_search, rescore
from sruasr.synthetic import mbr_example
from sruasr.tensor import Rng
from sruasr.training import grad_check


@pytest.mark.criterion(1, "SRU recurrence matches the scalar oracle bitwise")
def test_c01_sru_bitwise(record_property):
    rng = Rng(2024)
    start = time.perf_counter()
    for _ in range(100):
        d, T = 1 + rng.integers(16), 1 + rng.integers(32)
        cell = SruCell(rng.normal(d), rng.normal(d), rng.normal(d, 0.5), rng.normal(d, 0.5))
        x, u, c0 = rng.normal((T, d)), rng.normal((T, 3 * d), 2.0), rng.normal(d)
        h, c = sru_cell_forward(x, cell, u, c0)
        h_ref, c_ref = sru_scalar(x, u, cell.v, cell.v_prime, cell.b, cell.b_prime, c0)
        assert np.array_equal(h, h_ref) and np.array_equal(c, c_ref)
    elapsed = time.perf_counter() - start
    record_property("detail", f"100 instances in {elapsed:.2f}s")
    assert elapsed < 5.0


@pytest.mark.criterion(2, "LM gradients pass central finite differences")
def test_c02_lm_gradient_check(record_property):
    cfg = LmConfig(vocab_size=20, d=8, layers=2, heads=2, d_proj=8)
    model = LmModel.init(cfg, seed=5)
    rng = Rng(6)
    # small nonzero biases so no gate sits at an exact symmetry point
    for name, p in model.params.items():
        if p.ndim == 1:
            p += rng.normal(p.shape, 0.1)
    ids = [0] + [int(3 + rng.integers(17)) for _ in range(12)]
    inputs, targets = np.array([ids[:-1]]), np.array([ids[1:]])
    start = time.perf_counter()
    _, analytic = loss_and_grads(model, inputs, targets, np.ones((1, 12)))
    report = grad_check(lambda p: lm_loss_ld(p, cfg, ids), model.params, analytic, eps=1e-5)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {report.max_rel_error:.2e} over {model.n_params()} params, {elapsed:.1f}s")
    assert set(report.per_param) == set(model.params)
    assert report.max_rel_error < 1e-6, str(report.worst)
    assert elapsed < 60.0


@pytest.mark.criterion(3, "hidden dimensions evolve independently")
def test_c03_hidden_dimension_independence(record_property):
    rng = Rng(31)
    checked = 0
    for _ in range(20):
        d, T = 2 + rng.integers(15), 1 + rng.integers(32)
        cell = SruCell(rng.normal(d), rng.normal(d), rng.normal(d, 0.5), rng.normal(d, 0.5))
        x, u, c0 = rng.normal((T, d)), rng.normal((T, 3 * d)), rng.normal(d)
        h, c = sru_cell_forward(x, cell, u, c0)
        for j in range(d):
            c0b = c0.copy()
            c0b[j] += 1.0 + rng.uniform(1)[0]
            h2, c2 = sru_cell_forward(x, cell, u, c0b)
            others = [k for k in range(d) if k != j]
            assert np.array_equal(h[:, others], h2[:, others])
            assert np.array_equal(c[:, others], c2[:, others])
            assert c[0, j] != c2[0, j]
            checked += 1
    record_property("detail", f"{checked} perturbations")


@pytest.mark.criterion(4, "LM conditionals are causal")
def test_c04_causality(record_property):
    model = LmModel.init(LmConfig(vocab_size=20, d=8, layers=2, heads=2, d_proj=8), seed=41)
    rng = Rng(42)
    for _ in range(50):
        T = 2 + rng.integers(19)
        ids = [int(3 + rng.integers(17)) for _ in range(T)]
        t = rng.integers(T - 1)
        changed = list(ids)
        for s in range(t + 1, T):
            changed[s] = int(3 + rng.integers(17))
        changed[t + 1] = 3 + (ids[t + 1] - 3 + 1) % 17
        # row t + 1 is the first one to see position t + 1, rows 0..t may not move
        a, b = conditional_logprobs(model, ids), conditional_logprobs(model, changed)
        assert np.array_equal(a[: t + 1], b[: t + 1])
        assert not np.array_equal(a[t + 2], b[t + 2])
    record_property("detail", "50 probes")


@pytest.mark.criterion(5, "impulse support equals the analytic receptive field")
def test_c05_receptive_field(record_property):
    start = time.perf_counter()
    configs = {
        "r=3 stream": MultistreamConfig(frontend=FrontendConfig((), ()), dilations=(3,)),
        "defaults": MultistreamConfig(),
        "r=12 stream": MultistreamConfig(frontend=FrontendConfig((), ()), dilations=(12,)),
    }
    expected = {"r=3 stream": 51, "defaults": 209, "r=12 stream": 204}
    found = []
    for name, cfg in configs.items():
        ctx = receptive_field(cfg)
        assert ctx == (expected[name], expected[name])
        model = MultistreamModel.init(cfg, seed=3, positive=True)
        T = 2 * ctx[0] + 21
        assert impulse_support(model, T, T // 2) == ctx
        found.append(f"{name} +-{ctx[0]}")
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(found) + f" in {elapsed:.1f}s")
    assert elapsed < 30.0


@pytest.mark.criterion(6, "dilation rates must be multiples of 3")
def test_c06_dilation_validation(record_property):
    rng = Rng(0)
    for r in (1, 2, 4, 5, 7):
        with pytest.raises(ConfigurationError):
            TdnnfLayer.init(r, 4, 2, 4, rng)
    for r in (3, 6, 9, 12):
        assert TdnnfLayer.init(r, 4, 2, 4, rng).r == r
    record_property("detail", "rejects 1 2 4 5 7, accepts 3 6 9 12")


@pytest.mark.criterion(7, "rescoring pipeline matches a brute-force oracle")
def test_c07_rescoring_oracle(record_property):
    rng = Rng(77)
    settings = all_lambda_settings()
    assert len(settings) == 27
    sizes = []
    for _ in range(25):
        dicts = random_nbest_dicts(rng, 10)
        sizes.append(len(dicts))
        nbest = NBestList("u", [Hypothesis(d["words"], d["am"], dict(d["lm"]), d["rank"]) for d in dicts])
        for lam in settings:
            res = rescore(nbest, Lambdas(*lam), top_k=20)
            want, expected = brute_force_pipeline(dicts, *lam, top_k=20)
            assert [h.original_rank for h in res.hypotheses] == want
            assert np.max(np.abs(np.array(res.expected_errors) - np.array(expected))) < 1e-12
    record_property("detail", f"25 lists (N {min(sizes)}..{max(sizes)}) x 27 settings")


@pytest.mark.criterion(8, "expected-error reranking overturns the MAP choice")
def test_c08_mbr_overturn(record_property):
    recs = mbr_example()
    nbest = NBestList("mbr", [Hypothesis(tuple(r["text"].split()), r["am_logp"], {}, r["rank"]) for r in recs])
    res = rescore(nbest, Lambdas(0.0, 1.0, 1.0))
    assert np.max(np.abs(res.posteriors - [0.35, 0.33, 0.32])) < 1e-12
    assert res.ranked[0].text == "A B"
    errs = np.array(res.expected_errors)
    assert np.max(np.abs(errs - [0.485, 0.335, 0.515])) < 1e-12
    assert res.hypotheses[0].text == "C B"
    record_property("detail", "expected errors " + "/".join(f"{e:.3f}" for e in errs))


def planted_corpus():
    """The reference has the worse AM score but a much better LM score in every list."""
    corpus = []
    for i in range(6):
        ref = ("A", "B", "C", "D")[: 2 + i % 3]
        wrong = ref[:-1] + ("X",)
        hyps = [
            Hypothesis(wrong, -10.0, {"sru_bpe": -9.0, "sru_word": -9.0, "tdnn_lstm": -9.0}, 0),
            Hypothesis(ref, -11.0, {"sru_bpe": -2.0, "sru_word": -2.0, "tdnn_lstm": -2.0}, 1),
        ]
        corpus.append(NBestList(f"u{i}", hyps, ref))
    return corpus


@pytest.mark.criterion(9, "grid search finds the planted optimum and breaks ties lexicographically")
def test_c09_grid_search(record_property):
    corpus = planted_corpus()
    # only the tdnn_lstm stream carries the signal, so beta = 1 hides it
    for nb in corpus:
        for h in nb.hypotheses:
            h.lm_logps["sru_bpe"] = h.lm_logps["sru_word"] = -5.0
    grid = {"alpha": [0.0, 2.0], "beta": [1.0, 0.0], "gamma": [0.5, 0.0]}
    res = grid_search(corpus, grid)
    assert len(res.table) == 8
    zero = [lam for lam, edits, _ in res.table if edits == 0]
    assert all(lam.alpha == 2.0 and lam.beta == 0.0 for lam in zero)
    # the forced tie between gamma 0.5 and gamma 0 goes to the smaller triple
    assert sorted(lam.gamma for lam in zero) == [0.0, 0.5]
    assert res.best == Lambdas(2.0, 0.0, 0.0) and res.best_wer == 0.0
    record_property("detail", f"best {res.best.alpha:g}/{res.best.beta:g}/{res.best.gamma:g} among {len(zero)} tied")


@pytest.mark.criterion(10, "WER alignment matches the full DP-table oracle")
def test_c10_wer_oracle(record_property):
    rng = Rng(1010)
    for _ in range(1000):
        hyp = ["ABCD"[rng.integers(4)] for _ in range(rng.integers(21))]
        ref = ["ABCD"[rng.integers(4)] for _ in range(rng.integers(21))]
        a = edit_align(hyp, ref)
        assert (a.distance, a.substitutions, a.insertions, a.deletions) == wer_table(hyp, ref)
        assert a.ref_len == len(ref)
    record_property("detail", "1000 pairs")


def run_cli(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr().out
    assert code == 0, out
    return out


@pytest.mark.criterion(11, "toy character LM beats the add-1 bigram, reproducibly")
def test_c11_toy_lm(tmp_path, capsys, record_property):
    outs, times = [], []
    for name in ("run1", "run2"):
        start = time.perf_counter()
        text = run_cli(["train-lm", "--corpus", FIXTURES / "char_train.txt", "--dev", FIXTURES / "char_dev.txt",
                        "--tokenizer", "char", "--config", FIXTURES / "char_lm_config.json", "--seed", 0,
                        "--out", tmp_path / name], capsys)
        times.append(time.perf_counter() - start)
        outs.append(text)
    lines = {line.split(":")[0]: line for line in outs[0].splitlines()}
    final = float(lines["steps"].split("final dev perplexity:")[1])
    bigram = float(lines["add-1 bigram dev perplexity"].split(":")[1].split()[0])
    for f in ("weights.bin", "manifest.json", "vocab.txt", "curve.csv"):
        assert (tmp_path / "run1" / f).read_bytes() == (tmp_path / "run2" / f).read_bytes(), f
    manifest = json.loads((tmp_path / "run1" / "manifest.json").read_text())
    record_property("detail", f"dev ppl {final:.3f} vs bigram {bigram:.3f}, {max(times):.0f}s per run")
    assert (manifest["config"]["d"], manifest["config"]["layers"]) == (64, 2)
    assert final < bigram
    assert max(times) < 600.0


@pytest.mark.criterion(12, "end-to-end pipeline with non-increasing staged WER")
def test_c12_pipeline(tmp_path, capsys, record_property):
    t = tmp_path
    run_cli(["train-bpe", "--corpus", FIXTURES / "lm_train.txt", "--vocab-size", 120, "--out", t / "bpe"], capsys)
    run_cli(["train-lm", "--corpus", FIXTURES / "lm_train.txt", "--dev", FIXTURES / "lm_dev.txt",
             "--tokenizer", t / "bpe", "--config", FIXTURES / "lm_config.json", "--out", t / "lm_bpe"], capsys)
    run_cli(["train-lm", "--corpus", FIXTURES / "lm_train.txt", "--dev", FIXTURES / "lm_dev.txt",
             "--tokenizer", "word", "--config", FIXTURES / "lm_config.json", "--out", t / "lm_word"], capsys)
    for split in ("dev", "test"):
        run_cli(["score-nbest", "--nbest", FIXTURES / f"nbest_{split}.jsonl", "--lm-checkpoint", t / "lm_bpe",
                 "--field", "sru_bpe", "--out", t / f"{split}_bpe.jsonl"], capsys)
        run_cli(["score-nbest", "--nbest", t / f"{split}_bpe.jsonl", "--lm-checkpoint", t / "lm_word",
                 "--field", "sru_word", "--out", t / f"{split}_scored.jsonl"], capsys)
    run_cli(["grid-search", "--nbest", t / "dev_scored.jsonl", "--refs", FIXTURES / "refs_dev.txt",
             "--out", t / "grid"], capsys)
    run_cli(["rescore", "--nbest", t / "test_scored.jsonl", "--refs", FIXTURES / "refs_test.txt",
             "--lambdas-file", t / "grid" / "best_lambdas.json", "--out", t / "final"], capsys)
    stages = json.loads((t / "final" / "report.json").read_text())["stages"]
    best = json.loads((t / "grid" / "best_lambdas.json").read_text())
    record_property("detail", "lambdas {alpha:g}/{beta:g}/{gamma:g}, ".format(**best)
                    + " >= ".join(f"{k} {100 * stages[k]:.2f}%" for k in ("am_only", "lm_fused", "mbr")))
    assert stages["am_only"] >= stages["lm_fused"] >= stages["mbr"]
