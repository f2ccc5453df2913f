"""Drift, divergence and diversity diagnostics."""
from __future__ import annotations

import math
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBenchmarkError, EstimatorDomainError
from .policy import DecodePolicy, Policy, TokenSeq, enumerate_dist, kl_policies, logprob_seq, sample
from .rng import stream
from .tasks import Example, Verifier, extract_answer, verify

PINSKER_TOL = 1e-12
THEOREM_TOL = 1e-9


# --------------------------------------------------------------------------- supervision divergence


def pld_exact(policy: Policy, q_dists: Mapping[str, Mapping[TokenSeq, float]], prompts: Mapping[str, TokenSeq],
              max_len: int | None = None) -> float:
    """``E_x KL(q(.|x) || pi(.|x))`` for finite-support supervision ``q``."""
    if not q_dists:
        raise ValueError("no prompts")
    total = 0.0
    for pid, q in q_dists.items():
        prompt = prompts[pid]
        for y, m in q.items():
            if m <= 0:
                continue
            lp = logprob_seq(policy, prompt, y, max_len)
            if math.exp(lp) == 0.0:
                return math.inf
            total += m * (math.log(m) - lp)
    return total / len(q_dists)


def pld_val(policy: Policy, split: Sequence[Example]) -> float:
    """Reference NLL on a held-out split: ``-(1/N) sum log pi(y*|x)``."""
    if len(split) == 0:
        raise EmptyBenchmarkError("empty validation split")
    total = 0.0
    for ex in split:
        total += -logprob_seq(policy, ex.prompt, ex.reference)
    return total / len(split)


def delta_supervision(split: Sequence[Example]) -> tuple[dict[str, dict[TokenSeq, float]], dict[str, TokenSeq]]:
    return {ex.prompt_id: {ex.reference: 1.0} for ex in split}, {ex.prompt_id: ex.prompt for ex in split}


# --------------------------------------------------------------------------- forgetting and transfer


def forgetting_score(deltas: Sequence[float]) -> float:
    """Mean of the negative parts of the score deltas; never positive."""
    if len(deltas) == 0:
        raise ValueError("no retention deltas")
    return sum(min(d, 0.0) for d in deltas) / len(deltas)


def xfer_score(base: Mapping[str, float], post: Mapping[str, float]) -> float:
    if set(base) != set(post):
        raise ValueError(f"benchmark sets differ: {sorted(base)} vs {sorted(post)}")
    if not base:
        raise ValueError("no benchmarks")
    return sum(post[k] - base[k] for k in sorted(base)) / len(base)


# --------------------------------------------------------------------------- finite distributions


def _aligned(P, Q) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(P, Mapping) or isinstance(Q, Mapping):
        keys = sorted(set(P) | set(Q))
        return np.array([P.get(k, 0.0) for k in keys]), np.array([Q.get(k, 0.0) for k in keys])
    p, q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support")
    return p, q


def tv_distance(P, Q) -> float:
    p, q = _aligned(P, Q)
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def _phi(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``x - log(1 + x)`` at ``x = (q - p) / p``, with a series near zero to avoid cancellation."""
    x = (q - p) / p
    small = np.abs(x) < 1e-2
    xs = np.where(small, x, 0.0)
    series = sum((-1) ** k * xs ** k / k for k in range(2, 10))
    return np.where(small, series, x - (np.log(q) - np.log(p)))


def kl_divergence(P, Q) -> float:
    """``KL(P || Q)`` in nats; ``inf`` when ``Q`` misses part of ``P``'s support.

    For normalised inputs ``sum p log(p/q) = sum_{p>0} p * phi((q - p) / p) +
    sum_{p=0} q`` with ``phi(x) = x - log(1 + x) >= 0``.  Every term is
    non-negative, so nearly equal pairs keep full relative precision instead
    of cancelling, and rounding in the normalisation of P and Q cannot leak in.
    """
    p, q = _aligned(P, Q)
    m = p > 0
    if np.any(q[m] == 0):
        return math.inf
    pm, qm = p[m], q[m]
    terms = pm * _phi(pm, qm)
    return float(terms.sum() + q[~m].sum())


def pinsker_check(P, Q) -> tuple[float, float, bool]:
    tv = tv_distance(P, Q)
    bound = math.sqrt(kl_divergence(P, Q) / 2.0)
    return tv, bound, tv <= bound + PINSKER_TOL


@dataclass(frozen=True)
class Theorem1Report:
    lhs: float
    rhs: float
    corollary_rhs: float
    holds: bool


def theorem1_check(policy: Policy, base: Policy, verifier: Callable[[TokenSeq, TokenSeq], int],
                   prompts: Sequence[TokenSeq], max_len: int) -> Theorem1Report:
    """Exact check that score drift is bounded by KL drift.

    ``lhs = |E_x E_pi f - E_x E_base f|``, ``rhs = E_x sqrt(2 KL_x)`` and
    ``corollary_rhs = sqrt(2 E_x KL_x)``, all by enumeration.
    """
    if len(prompts) == 0:
        raise ValueError("no prompts")
    gap = 0.0
    roots = 0.0
    kls = 0.0
    for prompt in prompts:
        dp = enumerate_dist(policy, prompt, max_len)
        db = enumerate_dist(base, prompt, max_len)
        gap += sum(m * verifier(prompt, y) for y, m in dp.items()) - sum(m * verifier(prompt, y) for y, m in db.items())
        kl = kl_policies(policy, base, [prompt], mode="exact", max_len=max_len)
        roots += math.sqrt(2.0 * kl)
        kls += kl
    n = len(prompts)
    lhs = abs(gap / n)
    rhs = roots / n
    cor = math.sqrt(2.0 * kls / n)
    return Theorem1Report(lhs, rhs, cor, lhs <= rhs + THEOREM_TOL and rhs <= cor + THEOREM_TOL)


def kl_to_base(policy: Policy, base: Policy, prompts: Sequence[TokenSeq], mode: str = "markov",
               max_len: int = 8, n_samples: int = 1000, seed: int = 0) -> float:
    return kl_policies(policy, base, prompts, mode=mode, n_samples=n_samples, max_len=max_len, seed=seed)


# --------------------------------------------------------------------------- diversity


def pass_at_k(n: int, c: int, k: int, any_of_k: bool = False) -> float:
    """Unbiased ``1 - C(n-c, k) / C(n, k)``; ``any_of_k`` gives the plain ``c > 0`` indicator."""
    if not 0 <= c <= n:
        raise EstimatorDomainError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise EstimatorDomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    if any_of_k:
        return 1.0 if c > 0 else 0.0
    if n - c < k:
        return 1.0
    # product form avoids huge binomials
    return 1.0 - float(np.prod(1.0 - k / np.arange(n - c + 1, n + 1)))


def answer_entropy(answers: Sequence[str | None]) -> float:
    """Shannon entropy (nats) of the empirical answer law; ``None`` is one bucket."""
    if not answers:
        raise ValueError("no answers")
    counts = np.array(list(Counter(answers).values()), dtype=np.float64)
    p = counts / counts.sum()
    return float(max(0.0, -(p * np.log(p)).sum()))


def majority_index(answers: Sequence[str | None]) -> int:
    """Index of the first sample carrying the most frequent answer."""
    counts = Counter(answers)
    best = max(counts.values())
    for i, a in enumerate(answers):
        if counts[a] == best:
            return i
    raise ValueError("no answers")


@dataclass
class DiversityReport:
    pass_at_k: dict[int, float]
    sc_acc: float
    ans_entropy: float
    n_samples: int
    per_prompt_entropy: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "pass_at": {str(k): v for k, v in sorted(self.pass_at_k.items())},
            "sc_acc": self.sc_acc,
            "ans_entropy": self.ans_entropy,
        }


def diversity_suite(policy: Policy, bench: Sequence[Example], verifier: Verifier, decode: DecodePolicy, K: int,
                    ks: Sequence[int] = (1, 10, 100), seed: int | None = None, any_of_k: bool = False) -> DiversityReport:
    """Pass@k, majority-vote accuracy and answer entropy from K samples per prompt.

    Sample ``j`` for prompt ``x`` uses the stream ``(seed, "diversity", x, j)``,
    so every policy is evaluated under the same protocol.  Majority voting
    groups samples by extracted answer and scores the earliest sample of the
    winning group with the verifier.
    """
    if K < 1:
        raise EstimatorDomainError("K must be >= 1")
    if len(bench) == 0:
        raise EmptyBenchmarkError("empty benchmark split")
    ks = sorted(set(ks))
    if ks and ks[-1] > K:
        raise EstimatorDomainError(f"k={ks[-1]} exceeds K={K}")
    seed = decode.seed if seed is None else seed
    vocab = policy.vocab
    pass_sum = {k: 0.0 for k in ks}
    sc = 0.0
    ents = []
    for ex in bench:
        samples = []
        for j in range(K):
            samples.append(sample(policy, ex.prompt, decode, stream(seed, "diversity", ex.prompt_id, j)))
        correct = [verify(verifier, ex.prompt, y) for y in samples]
        answers = [extract_answer(y, vocab) for y in samples]
        c = sum(correct)
        for k in ks:
            pass_sum[k] += pass_at_k(K, c, k, any_of_k)
        sc += correct[majority_index(answers)]
        ents.append(answer_entropy(answers))
    n = len(bench)
    return DiversityReport({k: v / n for k, v in pass_sum.items()}, sc / n, float(np.mean(ents)), K, ents)


# --------------------------------------------------------------------------- report


RL_METHODS = ("reinforce", "grpo")
# RL policies are never trained on the reference labels, so their PLD only ranks against SFT-style runs
PLD_SCOPE_SFT = "sft-family"
PLD_SCOPE_RL = "SFT-family-comparable only"


@dataclass
class EvalReport:
    method: str
    seed: int
    base_target: dict[str, float]
    target: dict[str, float]
    base_retention: dict[str, float]
    retention: dict[str, float]
    kl_to_base: float
    pld_val: float
    diversity: DiversityReport | None = None
    primary_target: str | None = None

    @property
    def deltas(self) -> dict[str, float]:
        return {b: self.retention[b] - self.base_retention[b] for b in sorted(self.retention)}

    @property
    def forgetting(self) -> float:
        return forgetting_score(list(self.deltas.values()))

    @property
    def xfer(self) -> float:
        others = [b for b in sorted(self.target) if b != self.primary_target]
        if not others:
            return 0.0
        return xfer_score({b: self.base_target[b] for b in others}, {b: self.target[b] for b in others})

    @property
    def target_avg(self) -> float:
        return sum(self.target.values()) / len(self.target)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "target": dict(sorted(self.target.items())),
            "retention": dict(sorted(self.retention.items())),
            "base": {"target": dict(sorted(self.base_target.items())),
                     "retention": dict(sorted(self.base_retention.items()))},
            "deltas": self.deltas,
            "forgetting": self.forgetting,
            "xfer": self.xfer,
            "kl_to_base": json_float(self.kl_to_base),
            "pld_val": json_float(self.pld_val),
            "pld_scope": PLD_SCOPE_RL if self.method in RL_METHODS else PLD_SCOPE_SFT,
            "diversity": None if self.diversity is None else self.diversity.to_json(),
        }


INF_SENTINEL = "inf"


def json_float(x: float):
    """Infinite divergences are censored to a string sentinel so JSON stays valid."""
    return INF_SENTINEL if math.isinf(x) else x
