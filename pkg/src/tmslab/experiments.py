"""Multi-seed experiments behind the directional checks: knee point, mode collapse, drift ordering.

Each function takes a :class:`LabConfig` (see ``configs/``), runs every
replicate seed and returns per-seed numbers plus the verdict.  Nothing is
written to disk.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LabConfig
from .metrics import diversity_suite
from .pipeline import Runner, build_lab, evaluate

MIN_SEEDS = 4  # of 5
KNEE_RISE = 0.05


@dataclass(frozen=True)
class KneeSeed:
    seed: int
    steps: list[int]
    train_nll: list[float]
    val_nll: list[float]

    @property
    def train_monotone(self) -> bool:
        return bool(np.all(np.diff(self.train_nll) <= 0.0))

    @property
    def argmin(self) -> int:
        return int(np.argmin(self.val_nll))

    @property
    def interior_min(self) -> bool:
        return 0 < self.argmin < len(self.val_nll) - 1

    @property
    def rise(self) -> float:
        """Final validation NLL relative to its minimum, minus one."""
        return float(self.val_nll[-1] / self.val_nll[self.argmin] - 1.0)

    @property
    def ok(self) -> bool:
        return self.train_monotone and self.interior_min and self.rise >= KNEE_RISE


def knee_point(cfg: LabConfig) -> list[KneeSeed]:
    """Full SFT run per seed, logged every ``eval_every`` steps."""
    out = []
    for seed in cfg.lab.seeds:
        lab = build_lab(cfg, seed)
        drift = Runner(lab).sft().drift
        out.append(KneeSeed(seed, [d.step for d in drift], [d.train_nll for d in drift], [d.val_nll for d in drift]))
    return out


@dataclass(frozen=True)
class CollapseSeed:
    seed: int
    ans_entropy: dict[str, float]  # base, sft, tms
    pass_at: dict[str, float]  # pass@K
    pass_at_1: dict[str, float]

    @property
    def ok(self) -> bool:
        h, p = self.ans_entropy, self.pass_at
        return h["base"] > h["tms"] > h["sft"] and p["tms"] >= p["sft"]


def mode_collapse(cfg: LabConfig) -> list[CollapseSeed]:
    """Answer entropy and coverage of base, SFT and TMS under one sampling protocol."""
    ev = cfg.eval
    out = []
    for seed in cfg.lab.seeds:
        lab = build_lab(cfg, seed)
        runner = Runner(lab)
        policies = {"base": lab.base, "sft": runner.run("sft").result.policy, "tms": runner.run("tms").result.policy}
        bench = lab.target.split(ev.diversity_split)
        reps = {name: diversity_suite(pol, bench, lab.target.verifier(), lab.eval_decode(), ev.K, (1, ev.K), seed=seed)
                for name, pol in policies.items()}
        out.append(CollapseSeed(seed, {k: r.ans_entropy for k, r in reps.items()},
                                {k: r.pass_at_k[ev.K] for k, r in reps.items()},
                                {k: r.pass_at_k[1] for k, r in reps.items()}))
    return out


def collapse_verdict(seeds: list[CollapseSeed]) -> bool:
    mean = {k: float(np.mean([s.ans_entropy[k] for s in seeds])) for k in ("base", "sft", "tms")}
    return mean["base"] > mean["tms"] > mean["sft"] and sum(s.ok for s in seeds) >= MIN_SEEDS


@dataclass(frozen=True)
class DriftSeed:
    seed: int
    kl_to_base: dict[str, float]  # sft, tms, grpo
    forgetting: dict[str, float]
    target_avg: dict[str, float]

    @property
    def ok(self) -> bool:
        kl, f = self.kl_to_base, self.forgetting
        return kl["sft"] > kl["tms"] and kl["sft"] > kl["grpo"] and abs(f["sft"]) > abs(f["tms"])


def drift_ordering(cfg: LabConfig, methods=("sft", "tms", "grpo")) -> list[DriftSeed]:
    """Final-step KL-to-base and retention forgetting per method and seed."""
    out = []
    for seed in cfg.lab.seeds:
        lab = build_lab(cfg, seed)
        runner = Runner(lab)
        reps = {m: evaluate(lab, runner.run(m).result.policy, m) for m in methods}
        out.append(DriftSeed(seed, {m: r.kl_to_base for m, r in reps.items()},
                             {m: r.forgetting for m, r in reps.items()}, {m: r.target_avg for m, r in reps.items()}))
    return out


def drift_verdict(seeds: list[DriftSeed]) -> bool:
    kl = {m: float(np.mean([s.kl_to_base[m] for s in seeds])) for m in ("sft", "tms", "grpo")}
    return kl["sft"] > kl["tms"] and kl["sft"] > kl["grpo"] and sum(s.ok for s in seeds) >= MIN_SEEDS


def knee_verdict(seeds: list[KneeSeed]) -> bool:
    return sum(s.ok for s in seeds) >= MIN_SEEDS
