import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from oracles import LD, sru_forward_ld
from sruasr.errors import DataError, TrainingError, UsageError
from sruasr.lm import LmConfig, LmModel, SruCell, perplexity, sru_cell_backward, sru_record
from sruasr.tensor import Rng
from sruasr.text import CharTokenizer, read_corpus
from sruasr.training import (
    CosineSchedule,
    CurveRow,
    RAdamState,
    TrainConfig,
    clip_global_norm,
    grad_check,
    lr_at,
    pad_batch,
    radam_step,
    read_curve,
    train_lm,
    window_means,
    write_curve,
)


def radam_scalar(w, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float RAdam on f(w) = w^2 / 2, written from the published update rule."""
    m = v = 0.0
    rho_inf = 2 / (1 - b2) - 1
    path = [w]
    for t in range(1, steps + 1):
        g = w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        rho = rho_inf - 2 * t * b2**t / (1 - b2**t)
        if rho > 4:
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            w = w - lr * r * m_hat / (math.sqrt(v / (1 - b2**t)) + eps)
        else:
            w = w - lr * m_hat
        path.append(w)
    return path


# RAdam --------------------------------------------------------------------------

def test_zero_gradients_are_a_fixed_point():
    params = {"w": Rng(1).normal(5)}
    before = params["w"].copy()
    state = RAdamState(lr=0.1)
    for _ in range(10):
        radam_step(state, params, {"w": np.zeros(5)})
    assert np.array_equal(params["w"], before)


def test_first_step_is_plain_momentum():
    state = RAdamState(lr=0.01)
    assert state.rho(1) <= 4
    w = np.array([1.0, -2.0])
    g = np.array([0.5, 3.0])
    params = {"w": w.copy()}
    radam_step(state, params, {"w": g})
    # bias-corrected momentum after one step is g itself
    assert np.array_equal(params["w"], w - 0.01 * ((1 - 0.9) * g / (1 - 0.9)))


def test_rectification_switches_on_at_step_5():
    state = RAdamState()
    assert [state.rho(t) > 4 for t in range(1, 8)] == [False] * 4 + [True] * 3


@given(st.integers(0, 2**32), st.integers(1, 20))
def test_zero_learning_rate_is_identity(seed, steps):
    rng = Rng(seed)
    params = {"a": rng.normal((2, 3)), "b": rng.normal(4)}
    before = {k: v.copy() for k, v in params.items()}
    state = RAdamState(lr=0.0)
    for _ in range(steps):
        radam_step(state, params, {k: rng.normal(v.shape) for k, v in params.items()})
    assert all(np.array_equal(params[k], before[k]) for k in params)


def test_quadratic_matches_scalar_oracle_and_converges():
    # start from w0 = 0.1: from larger starts lr 1e-2 cannot cover the distance in 200 steps
    w0 = 0.1
    ref = radam_scalar(w0, 200, 1e-2)
    params = {"w": np.array([w0])}
    state = RAdamState(lr=1e-2)
    norms = [abs(w0)]
    for _ in range(200):
        radam_step(state, params, {"w": params["w"].copy()})
        norms.append(abs(float(params["w"][0])))
    assert np.max(np.abs(np.array(norms) - np.abs(ref))) < 1e-15
    first_below = next(i for i, n in enumerate(norms) if n < 1e-3 * w0)
    assert all(b <= a for a, b in zip(norms[:first_below], norms[1 : first_below + 1]))
    assert norms[-1] < 1e-3 * w0


def test_non_finite_gradient_names_parameter():
    params = {"good": np.zeros(2), "bad": np.zeros(2)}
    with pytest.raises(TrainingError, match="bad"):
        radam_step(RAdamState(), params, {"good": np.zeros(2), "bad": np.array([0.0, np.nan])})


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == 5.0
    assert np.allclose(grads["a"], 0.6) and np.allclose(grads["b"], 0.8)
    grads = {"a": np.array([0.3])}
    clip_global_norm(grads, None)
    assert grads["a"][0] == 0.3


# schedule -----------------------------------------------------------------------

def test_lr_examples():
    s = CosineSchedule(base_lr=1.0, total_steps=110, min_lr=0.1, warmup_steps=10)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 10) == 1.0
    assert lr_at(s, 110) == pytest.approx(0.1, abs=1e-15)
    assert lr_at(s, 60) == pytest.approx(0.55, abs=1e-15)
    assert lr_at(s, 5) == 0.5


@given(st.integers(0, 50), st.integers(1, 200), st.floats(0, 1))
def test_lr_continuous_and_non_increasing_after_warmup(warmup, extra, min_frac):
    s = CosineSchedule(2.0, warmup + extra, 2.0 * min_frac, warmup)
    if warmup:
        # the ramp's limit at the boundary equals the cosine start
        assert abs(s.base_lr * (warmup - 1e-9) / warmup - lr_at(s, warmup)) < 1e-8
    values = [lr_at(s, t) for t in range(warmup, warmup + extra + 1)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_lr_errors():
    s = CosineSchedule(1.0, 10)
    with pytest.raises(UsageError):
        lr_at(s, 11)
    with pytest.raises(UsageError):
        lr_at(s, -1)
    with pytest.raises(UsageError):
        CosineSchedule(1.0, 10, warmup_steps=10)
    with pytest.raises(UsageError):
        CosineSchedule(1.0, 10, min_lr=2.0)


# gradient check -----------------------------------------------------------------

def test_grad_check_quadratic():
    params = {"w": np.array([3.0])}
    rep = grad_check(lambda p: 0.5 * float(p["w"][0]) ** 2, params, {"w": np.array([3.0])})
    assert rep.max_rel_error < 1e-9 and not rep.flagged
    assert params["w"][0] == 3.0


def sru_mse_setup(d=8, T=12, seed=0):
    rng = Rng(seed)
    cell = SruCell(rng.normal(d), rng.normal(d), rng.normal(d, 0.5), rng.normal(d, 0.5), rng.normal((d, 3 * d), 0.4))
    x, target = rng.normal((T, d)), rng.normal((T, d))
    params = {"w": cell.w, "v": cell.v, "v_prime": cell.v_prime, "b": cell.b, "b_prime": cell.b_prime}
    u = x @ cell.w
    h, tape = sru_record(x, cell, u, np.zeros(d))
    g = sru_cell_backward(tape, cell, (h - target) / h.size)
    analytic = {k: g[k] for k in ("v", "v_prime", "b", "b_prime")}
    analytic["w"] = x.T @ g["u"]

    def loss(p):
        u_ld = np.asarray(x, dtype=LD) @ np.asarray(p["w"], dtype=LD)
        hh, _ = sru_forward_ld(x, u_ld, p["v"], p["v_prime"], p["b"], p["b_prime"], np.zeros(d))
        return ((hh - np.asarray(target, dtype=LD)) ** 2).sum() / (2 * h.size)

    return params, analytic, loss


def test_grad_check_sru_mse():
    params, analytic, loss = sru_mse_setup()
    rep = grad_check(loss, params, analytic)
    assert rep.max_rel_error < 1e-6, str(rep)


def test_grad_check_flags_corrupted_coordinate():
    params, analytic, loss = sru_mse_setup(d=3, T=4, seed=1)
    analytic["v"][1] *= 1.10
    rep = grad_check(loss, params, analytic)
    assert [(n, i) for n, i, _, _ in rep.flagged] == [("v", (1,))]
    assert rep.per_param["v"] > 1e-2


# training loop ------------------------------------------------------------------

def test_train_config_rejects_unknown_keys():
    assert TrainConfig.from_dict({"lr": 0.1}).lr == 0.1
    with pytest.raises(UsageError):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_truncation_applies_to_training_batches_only():
    corpus = [list(range(3, 13))]
    inputs, targets, weights = pad_batch(corpus, [0], 0, 1, 4)
    assert inputs.shape == (1, 4) and weights.sum() == 4
    full = pad_batch(corpus, [0], 0, 1, None)
    assert full[0].shape == (1, 11)
    # a model trained with max_len 4 still scores all 11 predictions
    m = LmModel.init(LmConfig(vocab_size=14, d=4, layers=1, heads=1, d_proj=4), 0)
    m.params["out_w"][:] = 0.0
    assert abs(perplexity(m, corpus) - 14) < 1e-12


def test_empty_corpus_errors():
    cfg = LmConfig(vocab_size=6, d=4, layers=1, heads=1, d_proj=4)
    with pytest.raises(DataError):
        train_lm([], [[3]], cfg, TrainConfig())
    with pytest.raises(DataError):
        train_lm([[3]], [], cfg, TrainConfig())


def overfit_run(seed=0):
    tok = CharTokenizer.build(["THE CAT SAT"])
    ids = tok.encode("THE CAT SAT")
    cfg = LmConfig(vocab_size=len(tok.vocab), d=16, layers=1, heads=2, d_proj=16)
    train = TrainConfig(batch_size=8, epochs=150, lr=1e-2, eval_every=50, seed=seed)
    return train_lm([ids] * 16, [ids], cfg, train), ids


def test_overfits_a_repeated_sentence():
    result, ids = overfit_run()
    assert result.curve[-1].dev_ppl < 1.1
    assert result.curve[-1].step == 300 and [r.step for r in result.curve][:2] == [50, 100]


def test_training_is_reproducible():
    a, _ = overfit_run(seed=3)
    b, _ = overfit_run(seed=3)
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    assert a.curve == b.curve
    c, _ = overfit_run(seed=4)
    assert not np.array_equal(a.model.params["embed"], c.model.params["embed"])


def test_smoothed_loss_decreases_over_first_epoch():
    lines = read_corpus(FIXTURES / "char_train.txt")
    tok = CharTokenizer.build(lines)
    corpus = [tok.encode(s) for s in lines]
    cfg = LmConfig(vocab_size=len(tok.vocab), d=32, layers=2, heads=2, d_proj=32)
    result = train_lm(corpus, corpus[:20], cfg, TrainConfig(batch_size=8, epochs=1, lr=1e-2, eval_every=10**6))
    means = window_means(result.step_losses, 50)
    assert len(means) >= 5
    rises = [(a, b) for a, b in zip(means, means[1:]) if b > a]
    assert len(rises) <= 0.05 * (len(means) - 1)
    assert all(b < 1.01 * a for a, b in rises)


def test_window_means():
    assert window_means(list(range(10)), 4) == [1.5, 5.5]


def test_curve_round_trip(tmp_path):
    rows = [CurveRow(200, 2.5, 11.25), CurveRow(400, 1.0 / 3.0, 7.0)]
    write_curve(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "step,train_loss,dev_ppl"
    assert read_curve(tmp_path / "c.csv") == rows
