"""Post-training procedures sharing one SGD path.

Every trainer returns a :class:`TrainResult` ``(policy, checkpoints, drift)``.
Checkpoints are taken at steps ``floor(t * steps / T)`` for ``t = 1..T``, and
drift points at step 0, every ``eval_every`` steps and the last step.
"""
from __future__ import annotations

import csv
import io
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import EmptyBatchError, NumericError, TrainingDivergedError
from .metrics import kl_to_base, pld_val
from .policy import (
    Checkpoint,
    CompiledBatch,
    DecodePolicy,
    GradTable,
    Policy,
    TokenSeq,
    add_grads,
    compile_batch,
    grad_from_compiled,
    mean_seq_nll,
    sample,
    sgd_step,
)
from .rng import stream
from .tasks import Example, Verifier, score_benchmark, verify
from .trajectory import MixtureSpec, TrajectoryBuffer, sample_target

DRIFT_HEADER = ("step", "train_nll", "val_nll", "kl_to_base", "target_acc", "retention_acc")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    steps: int = 1000
    batch_size: int = 0  # 0 means full batch
    ckpt_count: int = 10
    eval_every: int = 0  # 0 logs only the first and last step
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.ckpt_count < 1:
            raise ValueError("ckpt_count must be >= 1")
        if self.steps < self.ckpt_count:
            raise ValueError("steps must be >= ckpt_count")
        if self.batch_size < 0 or self.eval_every < 0:
            raise ValueError("batch_size and eval_every must be non-negative")

    def ckpt_steps(self) -> list[int]:
        return [t * self.steps // self.ckpt_count for t in range(1, self.ckpt_count + 1)]


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 4
    baseline_decay: float = 0.9
    kl_beta: float = 0.01
    std_eps: float = 1e-8
    temperature: float = 1.0
    max_len: int = 8

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if not self.std_eps > 0:
            raise ValueError("std_eps must be positive")


@dataclass(frozen=True)
class DriftPoint:
    step: int
    train_nll: float
    val_nll: float
    kl_to_base: float
    target_acc: float
    retention_acc: float


class TrainResult(NamedTuple):
    policy: Policy
    checkpoints: list[Checkpoint]
    drift: list[DriftPoint]


@dataclass
class Monitor:
    """What a trainer measures at each drift point.  Empty parts log NaN."""

    base: Policy | None = None
    train: Sequence[Example] = ()
    val: Sequence[Example] = ()
    target: Sequence[Example] = ()
    target_verifier: Verifier | None = None
    retention: Sequence[tuple[Sequence[Example], Verifier]] = ()
    kl_prompts: Sequence[TokenSeq] = ()
    kl_mode: str = "markov"
    max_len: int = 8

    def point(self, step: int, policy: Policy) -> DriftPoint:
        nan = float("nan")
        dec = DecodePolicy(max_len=self.max_len)
        train_nll = mean_seq_nll(policy, [(e.prompt, e.reference) for e in self.train]) if self.train else nan
        val_nll = pld_val(policy, self.val) if self.val else nan
        kl = nan
        if self.base is not None and self.kl_prompts:
            kl = kl_to_base(policy, self.base, self.kl_prompts, mode=self.kl_mode, max_len=self.max_len)
        tgt = score_benchmark(policy, self.target, dec, self.target_verifier) if self.target else nan
        ret = nan
        if self.retention:
            ret = float(np.mean([score_benchmark(policy, ex, dec, v) for ex, v in self.retention]))
        return DriftPoint(step, train_nll, val_nll, kl, tgt, ret)


def drift_csv(points: Sequence[DriftPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DRIFT_HEADER)
    for p in points:
        w.writerow([p.step] + [repr(float(getattr(p, k))) for k in DRIFT_HEADER[1:]])
    return buf.getvalue()


def _loop(init: Policy, cfg: TrainConfig, grad_at: Callable[[Policy, int], GradTable], monitor: Monitor | None,
          tag: str) -> TrainResult:
    ckpt_at = {s: t for t, s in enumerate(cfg.ckpt_steps(), start=1)}
    policy = init
    checkpoints: list[Checkpoint] = []
    drift: list[DriftPoint] = []
    if monitor is not None:
        drift.append(monitor.point(0, policy))
    for step in range(1, cfg.steps + 1):
        try:
            policy = sgd_step(policy, grad_at(policy, step), cfg.lr)
        except NumericError as err:
            last = checkpoints[-1] if checkpoints else Checkpoint(0, init, f"{tag}-init")
            raise TrainingDivergedError(f"{tag} diverged at step {step}: {err}", last_good=last) from err
        if step in ckpt_at:
            checkpoints.append(Checkpoint(step, policy, f"{tag}-{ckpt_at[step]}"))
        if monitor is not None and ((cfg.eval_every and step % cfg.eval_every == 0) or step == cfg.steps):
            drift.append(monitor.point(step, policy))
    return TrainResult(policy, checkpoints, drift)


def _batch_indices(n: int, cfg: TrainConfig, step: int) -> np.ndarray | None:
    """Minibatch rows for a step, or None for a full batch."""
    if cfg.batch_size == 0 or cfg.batch_size >= n:
        return None
    return np.sort(stream(cfg.seed, "batch", step).choice(n, size=cfg.batch_size, replace=False))


def _supervised(init: Policy, pairs: Sequence[tuple[TokenSeq, TokenSeq]], cfg: TrainConfig,
                monitor: Monitor | None, tag: str, max_len: int | None) -> TrainResult:
    if len(pairs) == 0:
        raise EmptyBatchError("no training pairs")
    full: CompiledBatch = compile_batch(init, pairs, max_len)

    def grad_at(policy, step):
        idx = _batch_indices(len(pairs), cfg, step)
        if idx is None:
            return grad_from_compiled(policy, full)
        return grad_from_compiled(policy, compile_batch(policy, [pairs[i] for i in idx], max_len))

    return _loop(init, cfg, grad_at, monitor, tag)


def train_sft(init: Policy, data: Sequence[Example], cfg: TrainConfig, monitor: Monitor | None = None,
              max_len: int | None = None) -> TrainResult:
    """Token-NLL SGD on the references.

    ``max_len`` marks the generation cap: a target of exactly that length ends
    in a forced EOS, which carries no loss.
    """
    return _supervised(init, [(e.prompt, e.reference) for e in data], cfg, monitor, "sft", max_len)


def distill(init: Policy, teacher_outputs: Sequence[tuple[TokenSeq, TokenSeq]], cfg: TrainConfig,
            monitor: Monitor | None = None, tag: str = "distill", max_len: int | None = None) -> TrainResult:
    """Same optimisation as :func:`train_sft` with teacher targets."""
    return _supervised(init, list(teacher_outputs), cfg, monitor, tag, max_len)


def teacher_targets(teacher: Policy, data: Sequence[Example], decode: DecodePolicy, seed: int,
                    tag: str = "teacher") -> list[tuple[TokenSeq, TokenSeq]]:
    """One sample per prompt from ``teacher`` on the stream ``(seed, tag, prompt_id)``."""
    return [(e.prompt, sample(teacher, e.prompt, decode, stream(seed, tag, e.prompt_id))) for e in data]


def train_tms_student(init: Policy, data: Sequence[Example], buffer: TrajectoryBuffer, mix: MixtureSpec,
                      cfg: TrainConfig, monitor: Monitor | None = None, max_len: int | None = None) -> TrainResult:
    """Token NLL on a fresh mixture target per example per visit.

    Target draws use their own stream ``(seed, "tms_target", step, prompt_id)``,
    so minibatch selection is shared with :func:`train_sft`.
    """
    if len(data) == 0:
        raise EmptyBatchError("no training examples")
    if mix.T != buffer.T:
        raise ValueError(f"mixture T={mix.T} does not match buffer T={buffer.T}")
    buffer.check_complete([e.prompt_id for e in data])
    data = list(data)

    def grad_at(policy, step):
        idx = _batch_indices(len(data), cfg, step)
        rows = data if idx is None else [data[i] for i in idx]
        pairs = [(e.prompt, sample_target(buffer, e.prompt_id, e.reference, mix,
                                          stream(cfg.seed, "tms_target", step, e.prompt_id))) for e in rows]
        return grad_from_compiled(policy, compile_batch(policy, pairs, max_len))

    return _loop(init, cfg, grad_at, monitor, "tms")


# --------------------------------------------------------------------------- policy gradient


def grpo_advantages(rewards: Sequence[float], std_eps: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()) / (r.std() + std_eps)


def baseline_update(b: float, mean_reward: float, decay: float) -> float:
    return decay * b + (1.0 - decay) * mean_reward


def _score_grad(policy: Policy, prompt: TokenSeq, rollout: TokenSeq, weight: float, max_len: int,
                out: GradTable) -> None:
    """Accumulate ``weight * d(-log pi(rollout))/d logits`` into ``out``.

    A forced final EOS carries no gradient.
    """
    forced = len(rollout) == max_len
    ctxs = policy.contexts_for(prompt, rollout)
    for i, (ctx, tok) in enumerate(zip(ctxs, rollout)):
        if forced and i == len(rollout) - 1:
            break
        g = policy.probs(ctx).copy()
        g[tok] -= 1.0
        g *= weight
        if ctx in out:
            out[ctx] += g
        else:
            out[ctx] = g


def _kl_grad(policy: Policy, base: Policy, prompt: TokenSeq, rollout: TokenSeq, weight: float, max_len: int,
             out: GradTable) -> None:
    """Accumulate ``weight * grad KL(pi_c || base_c)`` at each context visited by the rollout."""
    forced = len(rollout) == max_len
    ctxs = policy.contexts_for(prompt, rollout)
    for i, ctx in enumerate(ctxs):
        if forced and i == len(rollout) - 1:
            break
        lp = policy.log_probs(ctx)
        lb = base.log_probs(ctx)
        p = np.exp(lp)
        kl = float(p @ (lp - lb))
        g = weight * p * (lp - lb - kl)
        if ctx in out:
            out[ctx] += g
        else:
            out[ctx] = g


def _rl_loop(init: Policy, prompts: Sequence[tuple[str, TokenSeq]], verifier: Verifier, cfg: TrainConfig,
             rl: RLConfig, monitor: Monitor | None, tag: str, group: int,
             advantages: Callable[[list[float], int], list[float]]) -> TrainResult:
    if len(prompts) == 0:
        raise EmptyBatchError("no prompts")
    prompts = list(prompts)
    decode = DecodePolicy(temperature=rl.temperature, max_len=rl.max_len)

    def grad_at(policy, step):
        idx = _batch_indices(len(prompts), cfg, step)
        rows = prompts if idx is None else [prompts[i] for i in idx]
        rollouts = []
        for pid, prompt in rows:
            rng = stream(cfg.seed, f"{tag}_rollout", step, pid)
            for _ in range(group):
                y = sample(policy, prompt, decode, rng)
                rollouts.append((prompt, y, float(verify(verifier, prompt, y))))
        adv = advantages([r for _, _, r in rollouts], step)
        n = len(rollouts)
        pg: GradTable = {}
        for (prompt, y, _), a in zip(rollouts, adv):
            if a != 0.0:
                _score_grad(policy, prompt, y, a / n, rl.max_len, pg)
        if rl.kl_beta > 0:
            klg: GradTable = {}
            for prompt, y, _ in rollouts:
                _kl_grad(policy, init, prompt, y, 1.0 / n, rl.max_len, klg)
            return add_grads(pg, klg, weights=[1.0, rl.kl_beta])
        return pg

    return _loop(init, cfg, grad_at, monitor, tag)


def train_reinforce(init: Policy, prompts: Sequence[tuple[str, TokenSeq]], verifier: Verifier, cfg: TrainConfig,
                    rl: RLConfig, monitor: Monitor | None = None) -> TrainResult:
    """One rollout per prompt; advantage ``r - b`` with a moving-average baseline updated after use."""
    state = {"b": 0.0}

    def advantages(rewards, step):
        b = state["b"]
        state["b"] = baseline_update(b, float(np.mean(rewards)), rl.baseline_decay)
        return [r - b for r in rewards]

    return _rl_loop(init, prompts, verifier, cfg, rl, monitor, "reinforce", 1, advantages)


def train_grpo(init: Policy, prompts: Sequence[tuple[str, TokenSeq]], verifier: Verifier, cfg: TrainConfig,
               rl: RLConfig, monitor: Monitor | None = None) -> TrainResult:
    """``G`` rollouts per prompt with group-normalised advantages."""
    G = rl.group_size

    def advantages(rewards, step):
        out = []
        for i in range(0, len(rewards), G):
            out.extend(grpo_advantages(rewards[i:i + G], rl.std_eps).tolist())
        return out

    return _rl_loop(init, prompts, verifier, cfg, rl, monitor, "grpo", G, advantages)
