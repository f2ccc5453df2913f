"""Checkpoint harvesting, the trajectory buffer and mixture supervision.

The mixture target for prompt ``x`` is

    q_alpha(.|x) = alpha * delta(reference) + (1 - alpha) * sum_t p(t) * delta(buffer[t, x])

where ``p(t)`` is a law over checkpoint indices ``1..T``.
"""
from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IncompleteBufferError
from .policy import Checkpoint, DecodePolicy, TokenSeq, Vocab, check_completion, sample
from .rng import stream

CKPT_KINDS = ("uniform", "early", "late", "custom")


class InfeasibleWindowError(ValueError):
    pass


@dataclass(frozen=True)
class CheckpointDist:
    kind: str
    weights: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in CKPT_KINDS:
            raise ValueError(f"unknown checkpoint distribution {self.kind!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "_cum", np.cumsum(w))

    @property
    def T(self) -> int:
        return len(self.weights)


def make_ckpt_dist(kind: str, T: int, weights: Sequence[float] | None = None) -> CheckpointDist:
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "uniform":
        w = [1.0 / T] * T
    elif kind == "early":
        n = T // 3
        if n < 1:
            raise InfeasibleWindowError(f"early window is empty for T={T}")
        w = [1.0 / n if t <= n else 0.0 for t in range(1, T + 1)]
    elif kind == "late":
        start = -(-2 * T // 3)
        w = [1.0 / (T - start + 1) if t >= start else 0.0 for t in range(1, T + 1)]
    elif kind == "custom":
        if weights is None or len(weights) != T:
            raise ValueError("custom distribution needs T weights")
        w = [float(x) for x in weights]
    else:
        raise ValueError(f"unknown checkpoint distribution {kind!r}")
    return CheckpointDist(kind, tuple(w))


@dataclass(frozen=True)
class MixtureSpec:
    alpha: float
    T: int
    ckpt_dist: CheckpointDist

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.ckpt_dist.T != self.T:
            raise ValueError(f"checkpoint distribution has {self.ckpt_dist.T} weights, T={self.T}")

    @classmethod
    def default(cls, T: int = 10, alpha: float = 0.25, kind: str = "uniform") -> MixtureSpec:
        return cls(alpha, T, make_ckpt_dist(kind, T))


class TrajectoryBuffer:
    """Immutable map ``(t, prompt_id) -> tuple of harvested sequences``."""

    def __init__(self, entries: Mapping[tuple[int, str], Sequence[TokenSeq]], T: int, prompt_ids: Sequence[str],
                 decode: DecodePolicy | None = None, seed: int = 0):
        self.T = int(T)
        self.prompt_ids = tuple(prompt_ids)
        self.decode = decode
        self.seed = int(seed)
        self._entries = {(int(t), str(p)): tuple(tuple(s) for s in seqs) for (t, p), seqs in entries.items()}

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def __contains__(self, key) -> bool:
        return key in self._entries

    def cell(self, t: int, prompt_id: str) -> tuple[TokenSeq, ...]:
        seqs = self._entries.get((t, prompt_id))
        if not seqs:
            raise IncompleteBufferError(t, prompt_id)
        return seqs

    def __getitem__(self, key: tuple[int, str]) -> TokenSeq:
        return self.cell(*key)[0]

    def check_complete(self, prompt_ids: Sequence[str]) -> None:
        for pid in prompt_ids:
            for t in range(1, self.T + 1):
                self.cell(t, pid)

    def items(self):
        for key in sorted(self._entries):
            yield key, self._entries[key]

    def to_text(self) -> str:
        lines = [f"TMSBUF1 T={self.T} prompts={len(self.prompt_ids)} seed={self.seed}"]
        for (t, pid), seqs in self.items():
            for seq in seqs:
                lines.append(f"{t}\t{pid}\t{' '.join(map(str, seq))}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> TrajectoryBuffer:
        lines = text.splitlines()
        head = lines[0].split()
        if head[0] != "TMSBUF1":
            raise ValueError("not a trajectory buffer file")
        fields = dict(kv.split("=", 1) for kv in head[1:])
        entries: dict[tuple[int, str], list[TokenSeq]] = {}
        order: list[str] = []
        for line in lines[1:]:
            t, pid, ids = line.split("\t")
            if pid not in order:
                order.append(pid)
            entries.setdefault((int(t), pid), []).append(tuple(int(i) for i in ids.split()))
        if len(order) != int(fields["prompts"]):
            raise ValueError("buffer prompt count does not match its header")
        return cls(entries, int(fields["T"]), order, None, int(fields["seed"]))

    @classmethod
    def load(cls, path: str | Path) -> TrajectoryBuffer:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def harvest(
    checkpoints: Sequence[Checkpoint],
    prompts: Sequence[tuple[str, TokenSeq]],
    decode: DecodePolicy,
    seed: int | None = None,
    samples_per_cell: int = 1,
    subset: Sequence[str] | None = None,
) -> TrajectoryBuffer:
    """Sample from every checkpoint on every prompt.

    Cell ``(t, x)`` uses the stream ``(seed, "harvest", t, x)`` so the buffer
    does not depend on iteration order.  ``subset`` restricts harvesting to
    the named prompt ids.
    """
    if len(checkpoints) < 1:
        raise ValueError("need at least one checkpoint")
    if len(prompts) == 0:
        raise ValueError("no prompts to harvest")
    if samples_per_cell < 1:
        raise ValueError("samples_per_cell must be >= 1")
    ids = [pid for pid, _ in prompts]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate prompt ids")
    if subset is not None:
        keep = set(subset)
        prompts = [(pid, p) for pid, p in prompts if pid in keep]
        ids = [pid for pid, _ in prompts]
    seed = decode.seed if seed is None else seed
    entries = {}
    for t, ckpt in enumerate(checkpoints, start=1):
        for pid, prompt in prompts:
            rng = stream(seed, "harvest", t, pid)
            entries[(t, pid)] = [sample(ckpt.params, prompt, decode, rng) for _ in range(samples_per_cell)]
    return TrajectoryBuffer(entries, len(checkpoints), ids, decode, seed)


def sample_target(buffer: TrajectoryBuffer, prompt_id: str, reference: TokenSeq, mix: MixtureSpec,
                  rng: np.random.Generator) -> TokenSeq:
    """Bernoulli(alpha) picks the reference, otherwise ``t ~ p(t)`` picks a buffer entry."""
    if mix.T != buffer.T:
        raise ValueError(f"mixture T={mix.T} does not match buffer T={buffer.T}")
    if rng.random() < mix.alpha:
        return tuple(reference)
    t = min(int(np.searchsorted(mix.ckpt_dist._cum, rng.random(), side="right")), mix.T - 1) + 1
    while mix.ckpt_dist.weights[t - 1] == 0.0:  # guards the cumsum tail against rounding
        t -= 1
    seqs = buffer.cell(t, prompt_id)
    if len(seqs) == 1:
        return seqs[0]
    return seqs[int(rng.integers(len(seqs)))]


def mixture_dist_exact(buffer: TrajectoryBuffer, prompt_id: str, mix: MixtureSpec,
                       reference: TokenSeq) -> dict[TokenSeq, float]:
    """Explicit ``q_alpha(.|x)`` with identical sequences merged and zero atoms dropped."""
    if mix.T != buffer.T:
        raise ValueError(f"mixture T={mix.T} does not match buffer T={buffer.T}")
    dist: dict[TokenSeq, float] = {}
    if mix.alpha > 0:
        dist[tuple(reference)] = mix.alpha
    for t in range(1, mix.T + 1):
        seqs = buffer.cell(t, prompt_id)
        w = (1.0 - mix.alpha) * mix.ckpt_dist.weights[t - 1] / len(seqs)
        if w == 0.0:
            continue
        for s in seqs:
            dist[s] = dist.get(s, 0.0) + w
    return {s: m for s, m in dist.items() if m > 0}


def validate_buffer(buffer: TrajectoryBuffer, vocab: Vocab) -> None:
    for _, seqs in buffer.items():
        for s in seqs:
            check_completion(s, vocab)


def dist_total(dist: Mapping[TokenSeq, float]) -> float:
    return math.fsum(dist.values())
