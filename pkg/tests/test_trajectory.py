import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from tmslab.errors import IncompleteBufferError
from tmslab.policy import Checkpoint, DecodePolicy, Vocab, check_completion
from tmslab.trajectory import (
    InfeasibleWindowError,
    MixtureSpec,
    TrajectoryBuffer,
    dist_total,
    harvest,
    make_ckpt_dist,
    mixture_dist_exact,
    sample_target,
)

from conftest import random_policy


def test_checkpoint_dists_t10():
    assert make_ckpt_dist("uniform", 10).weights == (0.1,) * 10
    assert make_ckpt_dist("early", 10).weights == (1 / 3,) * 3 + (0.0,) * 7
    assert make_ckpt_dist("late", 10).weights == (0.0,) * 6 + (0.25,) * 4


@pytest.mark.parametrize("T", range(1, 65))
def test_checkpoint_dist_windows(T):
    late = make_ckpt_dist("late", T).weights
    start = -(-2 * T // 3)
    assert [t for t in range(1, T + 1) if late[t - 1] > 0] == list(range(start, T + 1))
    if T < 3:
        with pytest.raises(InfeasibleWindowError):
            make_ckpt_dist("early", T)
    else:
        early = make_ckpt_dist("early", T).weights
        assert [t for t in range(1, T + 1) if early[t - 1] > 0] == list(range(1, T // 3 + 1))
    for kind in ("uniform", "late") + (("early",) if T >= 3 else ()):
        assert abs(sum(make_ckpt_dist(kind, T).weights) - 1) < 1e-12


def test_bad_distributions():
    with pytest.raises(ValueError):
        make_ckpt_dist("custom", 3, [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        make_ckpt_dist("custom", 2, [1.5, -0.5])
    with pytest.raises(ValueError):
        make_ckpt_dist("bogus", 3)
    with pytest.raises(ValueError):
        MixtureSpec(1.5, 10, make_ckpt_dist("uniform", 10))
    with pytest.raises(ValueError):
        MixtureSpec(0.5, 9, make_ckpt_dist("uniform", 10))


def toy_buffer(T, pid="x", distinct=True):
    return TrajectoryBuffer({(t, pid): [(t if distinct else 0, 2)] for t in range(1, T + 1)}, T, [pid])


def test_mixture_dist_merges_and_sums():
    mix = MixtureSpec.default()
    d = mixture_dist_exact(toy_buffer(10), "x", mix, (1, 2))
    assert d[(1, 2)] == pytest.approx(0.25 + 0.075)
    assert d[(5, 2)] == pytest.approx(0.075)
    assert dist_total(d) == pytest.approx(1.0, abs=1e-12)
    late = MixtureSpec(0.0, 10, make_ckpt_dist("late", 10))
    assert set(mixture_dist_exact(toy_buffer(10), "x", late, (0, 2))) == {(t, 2) for t in range(7, 11)}


@given(st.floats(0, 1), st.lists(st.floats(0, 10), min_size=1, max_size=12), st.booleans())
def test_mixture_dist_is_a_distribution(alpha, raw, distinct):
    if sum(raw) <= 0:
        raw = [1.0] * len(raw)
    w = np.array(raw) / sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0:
        return
    T = len(raw)
    mix = MixtureSpec(alpha, T, make_ckpt_dist("custom", T, w))
    d = mixture_dist_exact(toy_buffer(T, distinct=distinct), "x", mix, (99, 2))
    assert abs(dist_total(d) - 1.0) < 1e-12
    assert all(m > 0 for m in d.values())


def test_sampler_limits():
    buf = toy_buffer(10)
    rng = np.random.default_rng(0)
    sft = MixtureSpec(1.0, 10, make_ckpt_dist("uniform", 10))
    assert all(sample_target(buf, "x", (7, 7), sft, rng) == (7, 7) for _ in range(200))
    final = MixtureSpec(0.0, 10, make_ckpt_dist("custom", 10, [0] * 9 + [1]))
    assert all(sample_target(buf, "x", (7, 7), final, rng) == (10, 2) for _ in range(200))


def test_missing_cell_raises():
    buf = TrajectoryBuffer({(t, "x"): [(0, 2)] for t in (1, 2, 4)}, 4, ["x"])
    with pytest.raises(IncompleteBufferError) as err:
        buf.check_complete(["x"])
    assert (err.value.t, err.value.prompt_id) == (3, "x")
    with pytest.raises(IncompleteBufferError):
        buf.cell(1, "y")


def chi2_pvalue(buf, mix, ref, draws, seed):
    exact = mixture_dist_exact(buf, "x", mix, ref)
    keys = sorted(exact)
    index = {k: i for i, k in enumerate(keys)}
    counts = np.zeros(len(keys))
    rng = np.random.default_rng(seed)
    for _ in range(draws):
        counts[index[sample_target(buf, "x", ref, mix, rng)]] += 1
    return chisquare(counts, draws * np.array([exact[k] for k in keys])).pvalue


@pytest.mark.parametrize("kind", ["uniform", "early", "late"])
def test_sampler_matches_exact_mixture(kind):
    mix = MixtureSpec(0.25, 10, make_ckpt_dist(kind, 10))
    assert chi2_pvalue(toy_buffer(10), mix, (0, 2), 20000, seed=1) > 0.001


def test_harvest_and_round_trip(tmp_path):
    vocab = Vocab.toy(3)
    ckpts = [Checkpoint(s, random_policy(vocab, 2, s)) for s in range(1, 5)]
    prompts = [("a", (0,)), ("b", (1, 2))]
    dec = DecodePolicy(max_len=5, seed=3)
    buf = harvest(ckpts, prompts, dec)
    buf.check_complete(["a", "b"])
    assert len(buf) == 8
    for _, seqs in buf.items():
        for s in seqs:
            check_completion(s, vocab, max_len=5)
    again = harvest(ckpts, list(reversed(prompts)), dec)
    assert again.to_text() == buf.to_text()
    assert harvest(ckpts, prompts, dec, subset=["b"]).to_text() == TrajectoryBuffer(
        {k: v for k, v in buf.items() if k[1] == "b"}, 4, ["b"], seed=3).to_text()
    path = tmp_path / "buffer.txt"
    buf.save(path)
    back = TrajectoryBuffer.load(path)
    assert back.to_text() == buf.to_text()
    assert back[(2, "b")] == buf[(2, "b")]
    with pytest.raises(ValueError):
        harvest(ckpts, prompts + [("a", (2,))], dec)
    with pytest.raises(ValueError):
        harvest([], prompts, dec)


def test_harvest_multiple_samples():
    vocab = Vocab.toy(3)
    ckpts = [Checkpoint(1, random_policy(vocab, 1, 0))]
    buf = harvest(ckpts, [("a", (0,))], DecodePolicy(max_len=4), samples_per_cell=5)
    assert len(buf.cell(1, "a")) == 5
    mix = MixtureSpec(0.0, 1, make_ckpt_dist("uniform", 1))
    d = mixture_dist_exact(buf, "a", mix, (0, 3))
    assert dist_total(d) == pytest.approx(1.0)


def test_exact_mixture_small_cases():
    uni2 = MixtureSpec(0.0, 2, make_ckpt_dist("uniform", 2))
    assert mixture_dist_exact(toy_buffer(2), "x", uni2, (9, 2)) == {(1, 2): 0.5, (2, 2): 0.5}
    assert mixture_dist_exact(toy_buffer(2, distinct=False), "x", uni2, (9, 2)) == {(0, 2): 1.0}
    half = MixtureSpec(0.5, 1, make_ckpt_dist("uniform", 1))
    assert mixture_dist_exact(toy_buffer(1), "x", half, (9, 2)) == {(9, 2): 0.5, (1, 2): 0.5}


def test_selection_frequencies():
    buf = toy_buffer(10)
    rng = np.random.default_rng(11)
    uni = MixtureSpec(0.0, 10, make_ckpt_dist("uniform", 10))
    draws = [sample_target(buf, "x", (0, 2), uni, rng)[0] for _ in range(100_000)]
    freq = np.bincount(draws, minlength=11)[1:] / len(draws)
    assert np.all(np.abs(freq - 0.1) <= 0.005)
    mix = MixtureSpec.default()
    refs = sum(sample_target(buf, "x", (0, 2), mix, rng) == (0, 2) for _ in range(100_000))
    assert abs(refs / 100_000 - 0.25) <= 0.005


def test_harvest_size_and_streams():
    vocab = Vocab.toy(3)
    pol = random_policy(vocab, 2, 0, scale=0.1)
    ckpts = [Checkpoint(s, pol) for s in (1, 2, 3)]
    prompts = [(f"p{i}", (i % 3,)) for i in range(5)]
    buf = harvest(ckpts, prompts, DecodePolicy(max_len=6, seed=0))
    assert len(buf) == 15
    # identical checkpoints still draw from distinct per-cell streams
    assert len({buf[(t, p)] for t in (1, 2, 3) for p, _ in prompts}) > 5
