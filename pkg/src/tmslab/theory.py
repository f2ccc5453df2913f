"""Randomised checks of the drift bounds on instances small enough to enumerate.

Each trial ``i`` of seed ``s`` builds one instance from the stream
``(s, "theory", i)``: a toy vocabulary with at most four symbols, a random
base policy, a policy at a random distance from it, one to three prompts,
completions of at most three tokens and a random 0/1 verifier.  The
instance is a pure function of ``(s, i)``, so any failing trial replays
exactly from those two numbers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import Theorem1Report, pinsker_check, theorem1_check
from .policy import Policy, TokenSeq, Vocab, enumerate_dist
from .rng import stream

MAX_CONTENT = 3  # plus EOS gives V <= 4
MAX_LEN = 3


@dataclass(frozen=True)
class Instance:
    seed: int
    trial: int
    vocab: Vocab
    order: int
    max_len: int
    prompts: tuple[TokenSeq, ...]
    base: Policy
    policy: Policy
    labels: dict[tuple[TokenSeq, TokenSeq], int]

    def verifier(self, prompt: TokenSeq, completion: TokenSeq) -> int:
        return self.labels[(tuple(prompt), tuple(completion))]

    def describe(self) -> dict:
        return {"seed": self.seed, "trial": self.trial, "V": self.vocab.size, "order": self.order,
                "max_len": self.max_len, "prompts": [list(p) for p in self.prompts]}


def make_instance(seed: int, trial: int) -> Instance:
    rng = stream(seed, "theory", trial)
    n_content = int(rng.integers(1, MAX_CONTENT + 1))
    vocab = Vocab.toy(n_content)
    order = int(rng.integers(1, 3))
    max_len = int(rng.integers(1, MAX_LEN + 1))
    prompts = tuple(tuple(int(x) for x in rng.integers(0, n_content, size=int(rng.integers(1, 3))))
                    for _ in range(int(rng.integers(1, 4))))
    base = Policy.random(vocab, order, rng, scale=float(rng.uniform(0.1, 3.0)))
    if rng.random() < 0.1:
        policy = base
    else:
        # log-uniform drift scale so near-zero drift, where the tolerance bites, is well covered
        eps = float(10 ** rng.uniform(-4, 0.5))
        policy = base.with_rows({ctx: row + rng.normal(0.0, eps, size=row.shape) for ctx, row in base.items()})
    labels = {}
    for prompt in prompts:
        for y in sorted(enumerate_dist(base, prompt, max_len)):
            labels[(prompt, y)] = int(rng.integers(0, 2))
    return Instance(seed, trial, vocab, order, max_len, prompts, base, policy, labels)


@dataclass(frozen=True)
class TrialResult:
    instance: Instance
    theorem: Theorem1Report
    pinsker_gap: float  # max over prompts of tv - sqrt(kl / 2)
    pinsker_holds: bool

    @property
    def holds(self) -> bool:
        return self.theorem.holds and self.pinsker_holds


def run_trial(seed: int, trial: int) -> TrialResult:
    inst = make_instance(seed, trial)
    rep = theorem1_check(inst.policy, inst.base, inst.verifier, list(inst.prompts), inst.max_len)
    gap = -np.inf
    ok = True
    for prompt in inst.prompts:
        tv, bound, holds = pinsker_check(enumerate_dist(inst.policy, prompt, inst.max_len),
                                         enumerate_dist(inst.base, prompt, inst.max_len))
        gap = max(gap, tv - bound)
        ok = ok and holds
    return TrialResult(inst, rep, float(gap), ok)


@dataclass(frozen=True)
class VerifySummary:
    seed: int
    trials: int
    max_lhs_minus_rhs: float
    max_rhs_minus_corollary: float
    max_pinsker_gap: float
    violations: list[TrialResult]

    def to_json(self) -> dict:
        return {"seed": self.seed, "trials": self.trials, "max_lhs_minus_rhs": self.max_lhs_minus_rhs,
                "max_rhs_minus_corollary": self.max_rhs_minus_corollary, "max_pinsker_gap": self.max_pinsker_gap,
                "violations": [violation_json(v) for v in self.violations]}


def violation_json(res: TrialResult) -> dict:
    t = res.theorem
    return {**res.instance.describe(), "lhs": t.lhs, "rhs": t.rhs, "corollary_rhs": t.corollary_rhs,
            "pinsker_gap": res.pinsker_gap}


def verify(seed: int, trials: int, first: int = 0) -> VerifySummary:
    """Run trials ``first .. first + trials - 1`` and collect every violation."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lhs_gap = cor_gap = pin_gap = -np.inf
    bad = []
    for i in range(first, first + trials):
        res = run_trial(seed, i)
        lhs_gap = max(lhs_gap, res.theorem.lhs - res.theorem.rhs)
        cor_gap = max(cor_gap, res.theorem.rhs - res.theorem.corollary_rhs)
        pin_gap = max(pin_gap, res.pinsker_gap)
        if not res.holds:
            bad.append(res)
    return VerifySummary(seed, trials, float(lhs_gap), float(cor_gap), float(pin_gap), bad)
