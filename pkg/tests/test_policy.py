import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tmslab.errors import (
    EmptyBatchError,
    EnumerationBudgetError,
    MalformedSequenceError,
    NumericError,
    VocabError,
)
from tmslab.policy import (
    DecodePolicy,
    Policy,
    Vocab,
    context_mean_nll,
    enumerate_dist,
    kl_policies,
    kl_samples,
    logprob_seq,
    nll_grad,
    sample,
    sgd_step,
)
from tmslab.rng import stream

from conftest import random_policy

BIG = 1e9


def test_vocab_rejects_bad_specials():
    with pytest.raises(VocabError):
        Vocab(("a", "b", "c", "d"), eos_id=1, bos_id=1)
    with pytest.raises(VocabError):
        Vocab(("a", "a", "c"), eos_id=2)
    with pytest.raises(VocabError):
        Vocab(("a", "b"), eos_id=5)


def test_lab_vocab_is_full(vocab):
    assert vocab.is_full
    assert len({vocab.bos_id, vocab.eos_id, vocab.ans_id, vocab.pad_id}) == 4


def test_uniform_logprob():
    v = Vocab.toy(4)  # V = 5
    pol = Policy(v, 2)
    assert logprob_seq(pol, (0,), (1, 2, v.eos_id)) == pytest.approx(-3 * math.log(5), abs=1e-12)


def test_saturated_logprob():
    v = Vocab.toy(3)
    ref = (2, 0, v.eos_id)
    pol = Policy(v, 1)
    rows = {}
    for ctx, tok in zip(pol.contexts_for((1,), ref), ref):
        row = np.zeros(v.size)
        row[tok] = BIG
        rows[ctx] = row
    pol = Policy(v, 1, rows)
    assert logprob_seq(pol, (1,), ref) == pytest.approx(0.0, abs=1e-9)


def test_hand_softmax_logprob():
    v = Vocab.toy(1)  # token0, eos
    row = np.array([math.log(3), math.log(1)])
    pol = Policy(v, 1, {(c,): row for c in (-1, 0, 1)})
    got = logprob_seq(pol, (), (0, v.eos_id))
    assert got == pytest.approx(math.log(0.75) + math.log(0.25), abs=1e-12)


def test_logprob_errors():
    v = Vocab.toy(2)
    pol = Policy(v, 2)
    with pytest.raises(MalformedSequenceError):
        logprob_seq(pol, (), (0, 1))
    with pytest.raises(MalformedSequenceError):
        logprob_seq(pol, (), (v.eos_id, 0, v.eos_id))
    with pytest.raises(VocabError):
        logprob_seq(pol, (), (7, v.eos_id))


def test_forced_termination_logprob():
    v = Vocab.toy(1)
    pol = Policy(v, 1)
    # with max_len=2 the final EOS of a two-token completion is forced
    assert logprob_seq(pol, (), (0, v.eos_id), max_len=2) == pytest.approx(math.log(0.5))
    with pytest.raises(MalformedSequenceError):
        logprob_seq(pol, (), (0, 0, v.eos_id), max_len=2)


def test_sample_eos_saturated():
    v = Vocab.toy(3)
    row = np.zeros(v.size)
    row[v.eos_id] = BIG
    pol = Policy(v, 1, {(c,): row for c in range(-1, v.size)})
    assert sample(pol, (0, 1), DecodePolicy(max_len=5), stream(0, "t")) == (v.eos_id,)


def test_greedy_is_argmax():
    v = Vocab.toy(3)
    pol = random_policy(v, 1, 3)
    dec = DecodePolicy(temperature=1e-7, max_len=6)
    y = sample(pol, (), dec, stream(0, "g"))
    ctx = pol.initial_context(())
    for tok in y[:-1]:
        assert tok == int(np.argmax(pol.row(ctx)))
        ctx = (tok,)
    assert y[-1] == v.eos_id


def test_sample_first_token_frequencies():
    v = Vocab.toy(3)  # V = 4
    pol = Policy(v, 2)
    rng = stream(11, "freq")
    n = 10_000
    counts = np.zeros(v.size)
    for _ in range(n):
        counts[sample(pol, (), DecodePolicy(max_len=4), rng)[0]] += 1
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n * 0.25) <= 4 * sigma)


def test_sample_deterministic_and_terminal():
    v = Vocab.toy(3)
    pol = random_policy(v, 2, 5)
    dec = DecodePolicy(max_len=5)
    a = [sample(pol, (1,), dec, stream(3, "s", i)) for i in range(50)]
    b = [sample(pol, (1,), dec, stream(3, "s", i)) for i in range(50)]
    assert a == b
    assert all(y[-1] == v.eos_id and len(y) <= 5 and v.eos_id not in y[:-1] for y in a)


def test_top_p_keeps_only_nucleus():
    v = Vocab.toy(3)
    row = np.log(np.array([0.6, 0.3, 0.05, 0.05]))
    pol = Policy(v, 1, {(c,): row for c in range(-1, v.size)})
    dec = DecodePolicy(top_p=0.8, max_len=2)
    rng = stream(0, "p")
    firsts = {sample(pol, (), dec, rng)[0] for _ in range(500)}
    assert firsts == {0, 1}


def test_decode_policy_validation():
    with pytest.raises(ValueError):
        DecodePolicy(temperature=0.0)
    with pytest.raises(ValueError):
        DecodePolicy(top_p=0.0)
    with pytest.raises(ValueError):
        DecodePolicy(max_len=0)


def test_enumerate_two_symbol_example():
    v = Vocab.toy(1)
    dist = enumerate_dist(Policy(v, 1), (), 2)
    assert dist == pytest.approx({(v.eos_id,): 0.5, (0, v.eos_id): 0.5})


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4))
def test_enumerate_sums_to_one(seed, order, max_len):
    v = Vocab.toy(2)
    dist = enumerate_dist(random_policy(v, order, seed, 2.0), (0,), max_len)
    assert math.fsum(dist.values()) == pytest.approx(1.0, abs=1e-10)
    assert all(len(y) <= max_len and y[-1] == v.eos_id for y in dist)


def test_enumerate_budget():
    v = Vocab.toy(3)
    with pytest.raises(EnumerationBudgetError):
        enumerate_dist(Policy(v, 1), (), 11)
    with pytest.raises(EnumerationBudgetError):
        enumerate_dist(Policy(v, 1), (), 3, budget=10)


@pytest.mark.parametrize("seed", range(5))
def test_enumerate_marginals_match_softmax(seed):
    # P(next = tok | prefix) recovered from the enumerated law equals the row softmax
    v = Vocab.toy(2)
    pol = random_policy(v, 2, seed)
    dist = enumerate_dist(pol, (1,), 4)
    for prefix in [(), (0,), (1, 0)]:
        mass = sum(m for y, m in dist.items() if y[:len(prefix)] == prefix)
        ctx = pol.initial_context((1,) + prefix)
        for tok in range(v.size):
            joint = sum(m for y, m in dist.items() if y[:len(prefix) + 1] == prefix + (tok,))
            assert joint / mass == pytest.approx(pol.probs(ctx)[tok], abs=1e-12)


def test_enumerate_matches_monte_carlo():
    v = Vocab.toy(2)
    pol = random_policy(v, 2, 8)
    dist = enumerate_dist(pol, (0,), 4)
    f = lambda y: float(len(y))  # noqa: E731
    exact = sum(m * f(y) for y, m in dist.items())
    var = sum(m * (f(y) - exact) ** 2 for y, m in dist.items())
    rng = stream(1, "mc")
    n = 100_000
    dec = DecodePolicy(max_len=4)
    mc = np.mean([f(sample(pol, (0,), dec, rng)) for _ in range(n)])
    assert abs(mc - exact) <= 3 * math.sqrt(var / n)


def test_nll_grad_zero_at_saturation():
    v = Vocab.toy(2)
    ref = (1, 0, v.eos_id)
    base = Policy(v, 2)
    rows = {}
    for ctx, tok in zip(base.contexts_for((0,), ref), ref):
        row = np.full(v.size, -BIG / 2)
        row[tok] = BIG / 2
        rows[ctx] = row
    grad = nll_grad(Policy(v, 2, rows), [((0,), ref)])
    assert all(np.max(np.abs(g)) <= 1e-9 for g in grad.values())


def test_nll_grad_single_pair():
    v = Vocab.toy(1)
    pol = Policy(v, 1)
    grad = nll_grad(pol, [((), (0, v.eos_id))])
    first = grad[pol.initial_context(())]
    np.testing.assert_allclose(first, [-0.5, 0.5])


def test_nll_grad_empty_batch():
    with pytest.raises(EmptyBatchError):
        nll_grad(Policy(Vocab.toy(1), 1), [])


def _random_batch(v, rng, n_pairs=3, max_len=4):
    out = []
    for _ in range(n_pairs):
        prompt = tuple(int(t) for t in rng.integers(0, v.size - 1, size=rng.integers(0, 3)))
        body = tuple(int(t) for t in rng.integers(0, v.size - 1, size=rng.integers(0, max_len)))
        out.append((prompt, body + (v.eos_id,)))
    return out


def central_difference(pol, batch, ctx, j, h=1e-5):
    up = pol.row(ctx).copy()
    dn = up.copy()
    up[j] += h
    dn[j] -= h
    f_up = context_mean_nll(pol.with_rows({ctx: up}), batch)
    f_dn = context_mean_nll(pol.with_rows({ctx: dn}), batch)
    return (f_up - f_dn) / (2 * h)


def test_nll_grad_matches_finite_differences():
    v = Vocab.toy(3)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pol = random_policy(v, 2, seed)
        batch = _random_batch(v, rng)
        grad = nll_grad(pol, batch)
        for ctx, g in grad.items():
            for j in range(v.size):
                fd = central_difference(pol, batch, ctx, j)
                worst = max(worst, abs(fd - g[j]) / max(abs(g[j]), 1e-3))
    assert worst < 1e-6


def test_sgd_step_arithmetic():
    v = Vocab.toy(1)
    pol = Policy(v, 1)
    ctx = (-1,)
    new = sgd_step(pol, {ctx: np.array([-0.5, 0.5])}, 1.0)
    np.testing.assert_array_equal(new.row(ctx), [0.5, -0.5])
    assert not new.has_row((0,))
    assert pol.row(ctx).tolist() == [0.0, 0.0]


def test_sgd_zero_grad_is_fixed_point():
    v = Vocab.toy(2)
    pol = random_policy(v, 2, 0)
    new = sgd_step(pol, {c: np.zeros(v.size) for c in pol.contexts()}, 0.3)
    assert new.same_logits(pol)


def test_sgd_non_finite_grad():
    v = Vocab.toy(1)
    with pytest.raises(NumericError):
        sgd_step(Policy(v, 1), {(-1,): np.array([np.nan, 0.0])}, 0.1)


@given(st.integers(0, 10_000), st.floats(1e-3, 0.1))
def test_sgd_step_decreases_example_nll(seed, lr):
    v = Vocab.toy(3)
    rng = np.random.default_rng(seed)
    pol = random_policy(v, 2, seed)
    pair = _random_batch(v, rng, n_pairs=1)[0]
    new = sgd_step(pol, nll_grad(pol, [pair]), lr)
    assert -logprob_seq(new, *pair) < -logprob_seq(pol, *pair)


@given(st.integers(0, 10_000))
def test_single_reference_step_pushes_down_other_tokens(seed):
    v = Vocab.toy(3)
    rng = np.random.default_rng(seed)
    pol = random_policy(v, 1, seed)
    prompt, ref = _random_batch(v, rng, n_pairs=1)[0]
    new = sgd_step(pol, nll_grad(pol, [(prompt, ref)]), 0.05)
    ctx = pol.contexts_for(prompt, ref)[0]
    targets = {tok for c, tok in zip(pol.contexts_for(prompt, ref), ref) if c == ctx}
    for tok in range(v.size):
        if tok not in targets:
            assert new.row(ctx)[tok] < pol.row(ctx)[tok]


def test_kl_self_is_zero():
    v = Vocab.toy(2)
    pol = random_policy(v, 2, 1)
    for mode in ("exact", "markov"):
        assert kl_policies(pol, pol, [(0,), (1, 0)], mode=mode, max_len=4) == pytest.approx(0.0, abs=1e-10)


def test_kl_nonnegative_on_random_pairs():
    v = Vocab.toy(2)
    for seed in range(1000):
        p = random_policy(v, 1, 2 * seed)
        q = random_policy(v, 1, 2 * seed + 1)
        assert kl_policies(p, q, [()], mode="exact", max_len=3) >= 0.0


@pytest.mark.parametrize("order", [1, 2, 3])
def test_markov_kl_equals_exact(order):
    v = Vocab.toy(2)
    p = random_policy(v, order, 10 + order, 1.5)
    q = random_policy(v, order, 20 + order, 1.5)
    prompts = [(0,), (1, 1)]
    exact = kl_policies(p, q, prompts, mode="exact", max_len=4)
    assert kl_policies(p, q, prompts, mode="markov", max_len=4) == pytest.approx(exact, rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_monte_carlo_kl_within_three_sigma(seed):
    v = Vocab.toy(2)  # V = 3
    p = random_policy(v, 2, 100 + seed)
    q = random_policy(v, 2, 200 + seed)
    exact = kl_policies(p, q, [(0,)], mode="exact", max_len=3)
    n = 4000
    draws = kl_samples(p, q, (0,), 3, n, stream(seed, "kl_mc", 0))
    mc = kl_policies(p, q, [(0,)], mode="monte_carlo", n_samples=n, max_len=3, seed=seed)
    assert mc == pytest.approx(draws.mean())
    assert abs(mc - exact) <= 3 * draws.std(ddof=1) / math.sqrt(n)


def test_kl_signals_infinity():
    v = Vocab.toy(1)
    q_row = np.array([BIG, -BIG])  # q never stops at the first step
    p = Policy(v, 1)
    q = Policy(v, 1, {(c,): q_row for c in (-1, 0, 1)})
    for mode in ("exact", "markov"):
        assert kl_policies(p, q, [()], mode=mode, max_len=3) == math.inf


def test_forced_eos_carries_no_gradient(toy3):
    from tmslab.policy import compile_batch, logprob_seq

    pol = random_policy(toy3, 1, 0)
    capped = compile_batch(pol, [((0,), (1, 1, 2))], max_len=3)
    assert (1,) in capped.contexts and capped.counts.sum() == 2
    free = compile_batch(pol, [((0,), (1, 1, 2))])
    assert free.counts.sum() == 3
    # the capped objective is exactly the capped log-likelihood
    lp = logprob_seq(pol, (0,), (1, 1, 2), max_len=3)
    assert lp == pytest.approx(logprob_seq(pol, (0,), (1, 1, 2)) - pol.log_probs((1,))[2])
    assert not compile_batch(pol, [((0,), (2,))], max_len=1).contexts
    with pytest.raises(MalformedSequenceError):
        compile_batch(pol, [((0,), (1, 1, 2))], max_len=2)
