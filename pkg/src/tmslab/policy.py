"""Tabular autoregressive sequence policy.

A policy of order ``n`` keeps one logit row per context, where a context is
the last ``n`` token ids of ``prompt + completion-so-far`` padded on the left
with the BOS id.  Rows that were never written read as zeros (uniform).

Completion distributions use a forced-termination rule: if ``max_len - 1``
tokens have been produced without EOS, the ``max_len``-th token is EOS with
probability one.  Every sequence measure built here is therefore proper.
"""
from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyBatchError,
    EnumerationBudgetError,
    MalformedSequenceError,
    NumericError,
    VocabError,
)
from .rng import stream

TokenSeq = tuple[int, ...]
Context = tuple[int, ...]
GradTable = dict[Context, np.ndarray]

GREEDY_TEMPERATURE = 1e-6
DENSE_LIMIT = 2**23
DEFAULT_ENUM_BUDGET = 10**6
NO_BOS = -1


@dataclass(frozen=True)
class Vocab:
    """Output alphabet plus special ids.

    ``eos_id`` is mandatory.  The other specials may be left as ``None`` for
    toy alphabets (two or three symbols) used in unit checks; task vocabularies
    set all four, and :attr:`is_full` reports that.
    """

    tokens: tuple[str, ...]
    eos_id: int
    bos_id: int | None = None
    ans_id: int | None = None
    pad_id: int | None = None
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(toks) < 2:
            raise VocabError("vocabulary needs at least two symbols")
        if len(set(toks)) != len(toks):
            raise VocabError("vocabulary symbols must be unique")
        specials = [s for s in (self.bos_id, self.eos_id, self.ans_id, self.pad_id) if s is not None]
        for s in specials:
            if not 0 <= s < len(toks):
                raise VocabError(f"special id {s} out of range for V={len(toks)}")
        if len(set(specials)) != len(specials):
            raise VocabError("special ids must be distinct")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(toks)})

    @classmethod
    def toy(cls, n_content: int) -> Vocab:
        """``n_content`` plain symbols followed by EOS."""
        toks = tuple(f"t{i}" for i in range(n_content)) + ("<eos>",)
        return cls(toks, eos_id=n_content)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def is_full(self) -> bool:
        return self.size >= 4 and None not in (self.bos_id, self.ans_id, self.pad_id)

    @property
    def pad_context_id(self) -> int:
        return NO_BOS if self.bos_id is None else self.bos_id

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise VocabError(f"unknown symbol {symbol!r}") from None

    def encode(self, symbols: Iterable[str]) -> TokenSeq:
        return tuple(self.id(s) for s in symbols)

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < self.size:
                raise VocabError(f"token id {i} out of range")
            out.append(self.tokens[i])
        return out

    def check_ids(self, ids: Iterable[int]) -> None:
        for i in ids:
            if not 0 <= int(i) < self.size:
                raise VocabError(f"token id {i} out of range for V={self.size}")


def is_terminal(seq: Sequence[int], vocab: Vocab) -> bool:
    return len(seq) > 0 and seq[-1] == vocab.eos_id and vocab.eos_id not in seq[:-1]


def check_completion(seq: Sequence[int], vocab: Vocab, max_len: int | None = None, strict: bool = False) -> None:
    """Raise unless ``seq`` is a terminal completion.

    ``strict`` also rejects PAD, which stored data never contains; sampled
    sequences may legitimately include it since the policy covers all of V.
    """
    vocab.check_ids(seq)
    if not is_terminal(seq, vocab):
        raise MalformedSequenceError(f"completion is not terminated by a single EOS: {tuple(seq)}")
    if strict and vocab.pad_id is not None and vocab.pad_id in seq:
        raise MalformedSequenceError("PAD appears before EOS")
    if max_len is not None and len(seq) > max_len:
        raise MalformedSequenceError(f"completion length {len(seq)} exceeds max_len={max_len}")


@dataclass(frozen=True)
class DecodePolicy:
    temperature: float = 1.0
    top_p: float = 1.0
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    @property
    def greedy(self) -> bool:
        return self.temperature < GREEDY_TEMPERATURE

    def as_greedy(self) -> DecodePolicy:
        return DecodePolicy(temperature=GREEDY_TEMPERATURE / 2, top_p=1.0, max_len=self.max_len, seed=self.seed)


@dataclass(frozen=True)
class Checkpoint:
    step: int
    params: "Policy"
    tag: str = ""

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("checkpoint step must be non-negative")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class Policy:
    """Immutable snapshot of a tabular order-``n`` policy.

    Rows are never modified in place; :func:`sgd_step` and :meth:`with_rows`
    return new snapshots that share unchanged rows.
    """

    __slots__ = ("vocab", "order", "_rows", "_zero", "_lp_cache", "_dist_cache", "_dense")

    def __init__(self, vocab: Vocab, order: int = 2, rows: Mapping[Context, np.ndarray] | None = None):
        if order < 1:
            raise ValueError("policy order must be >= 1")
        self.vocab = vocab
        self.order = int(order)
        self._zero = np.zeros(vocab.size)
        self._zero.flags.writeable = False
        self._rows: dict[Context, np.ndarray] = {}
        self._lp_cache: dict[Context, np.ndarray] = {}
        self._dist_cache: dict = {}
        self._dense = None
        for ctx, row in (rows or {}).items():
            ctx = tuple(int(c) for c in ctx)
            self._check_ctx(ctx)
            arr = np.array(row, dtype=np.float64)
            if arr.shape != (vocab.size,):
                raise ValueError(f"logit row for {ctx} has shape {arr.shape}, expected ({vocab.size},)")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite logit in row {ctx}")
            arr.flags.writeable = False
            self._rows[ctx] = arr

    def _check_ctx(self, ctx: Context) -> None:
        if len(ctx) != self.order:
            raise ValueError(f"context {ctx} has length {len(ctx)}, order is {self.order}")
        pad = self.vocab.pad_context_id
        for c in ctx:
            if c != pad and not 0 <= c < self.vocab.size:
                raise VocabError(f"context id {c} out of range")

    @classmethod
    def zeros(cls, vocab: Vocab, order: int = 2) -> Policy:
        return cls(vocab, order)

    @classmethod
    def random(cls, vocab: Vocab, order: int, rng: np.random.Generator, scale: float = 1.0) -> Policy:
        """Fill every reachable context with N(0, scale^2) logits."""
        alphabet = [vocab.pad_context_id] + [i for i in range(vocab.size) if i != vocab.pad_context_id]
        rows = {}
        for ctx in itertools.product(alphabet, repeat=order):
            rows[ctx] = rng.normal(0.0, scale, size=vocab.size)
        return cls(vocab, order, rows)

    @property
    def V(self) -> int:
        return self.vocab.size

    def __len__(self) -> int:
        return len(self._rows)

    def contexts(self) -> list[Context]:
        return sorted(self._rows)

    def items(self):
        for ctx in sorted(self._rows):
            yield ctx, self._rows[ctx]

    def row(self, ctx: Context) -> np.ndarray:
        return self._rows.get(ctx, self._zero)

    def has_row(self, ctx: Context) -> bool:
        return ctx in self._rows

    def log_probs(self, ctx: Context) -> np.ndarray:
        lp = self._lp_cache.get(ctx)
        if lp is None:
            lp = _log_softmax(self.row(ctx))
            lp.flags.writeable = False
            self._lp_cache[ctx] = lp
        return lp

    def probs(self, ctx: Context) -> np.ndarray:
        return np.exp(self.log_probs(ctx))

    def initial_context(self, prompt: Sequence[int]) -> Context:
        pad = self.vocab.pad_context_id
        tail = tuple(prompt[-self.order:]) if self.order <= len(prompt) else tuple(prompt)
        return (pad,) * (self.order - len(tail)) + tail

    def contexts_for(self, prompt: Sequence[int], completion: Sequence[int]) -> list[Context]:
        """Context seen before each completion token."""
        ctx = self.initial_context(prompt)
        out = []
        for tok in completion:
            out.append(ctx)
            ctx = ctx[1:] + (int(tok),)
        return out

    def with_rows(self, updates: Mapping[Context, np.ndarray]) -> Policy:
        if not updates:
            return self._with_matrix([], np.zeros((0, self.V)))
        ctxs = list(updates)
        return self._with_matrix(ctxs, np.vstack([np.asarray(updates[c], dtype=np.float64) for c in ctxs]))

    def _with_matrix(self, ctxs: Sequence[Context], mat: np.ndarray) -> Policy:
        """New snapshot with row ``i`` of ``mat`` installed at ``ctxs[i]``."""
        if not np.all(np.isfinite(mat)):
            bad = ctxs[int(np.flatnonzero(~np.isfinite(mat).all(axis=1))[0])]
            raise NumericError(f"non-finite logit in row {bad}")
        mat = np.array(mat, dtype=np.float64)
        mat.flags.writeable = False
        new = Policy.__new__(Policy)
        new.vocab = self.vocab
        new.order = self.order
        new._zero = self._zero
        new._lp_cache = {}
        new._dist_cache = {}
        new._dense = None
        rows = dict(self._rows)
        rows.update(zip(ctxs, mat))
        new._rows = rows
        return new

    def dense_log_probs(self) -> np.ndarray | None:
        """Log-probabilities for every context, indexed by context code.

        The code of ``(c_1..c_n)`` is ``sum (c_j + 1) * (V + 1)^(n - j)``.
        Returns None when the table would exceed :data:`DENSE_LIMIT` entries.
        """
        base = self.V + 1
        if base ** self.order * self.V > DENSE_LIMIT:
            return None
        if self._dense is None:
            table = np.tile(_log_softmax(self._zero), (base ** self.order, 1))
            if self._rows:
                ctxs = np.array(list(self._rows), dtype=np.int64)
                table[_ctx_codes(ctxs, base)] = _log_softmax(np.vstack(list(self._rows.values())))
            table.flags.writeable = False
            self._dense = table
        return self._dense

    def same_logits(self, other: Policy) -> bool:
        """Bit-level equality of every materialised row (zeros rows count as absent)."""
        if self.order != other.order or self.V != other.V:
            return False
        keys = set(self._rows) | set(other._rows)
        return all(np.array_equal(self.row(k), other.row(k)) for k in keys)

    # sampling distribution at a context under a decode policy (temperature / top-p)
    def decode_dist(self, ctx: Context, temperature: float, top_p: float) -> np.ndarray:
        key = (ctx, temperature, top_p)
        cum = self._dist_cache.get(key)
        if cum is None:
            z = self.row(ctx) / temperature
            p = np.exp(z - z.max())
            p /= p.sum()
            if top_p < 1.0:
                order = np.argsort(-p, kind="stable")
                csum = np.cumsum(p[order])
                keep = int(np.searchsorted(csum, top_p - 1e-12)) + 1
                mask = np.zeros_like(p)
                mask[order[:keep]] = 1.0
                p = p * mask
                p /= p.sum()
            cum = np.cumsum(p)
            cum[-1] = 1.0
            self._dist_cache[key] = cum
        return cum


def logprob_seq(policy: Policy, prompt: Sequence[int], completion: Sequence[int], max_len: int | None = None) -> float:
    """Log-probability of a terminal completion.

    With ``max_len`` given, a completion of exactly ``max_len`` tokens ends in
    a forced EOS whose log-probability is 0.
    """
    policy.vocab.check_ids(prompt)
    check_completion(completion, policy.vocab, max_len)
    forced = max_len is not None and len(completion) == max_len
    total = 0.0
    ctxs = policy.contexts_for(prompt, completion)
    last = len(completion) - 1
    for i, (ctx, tok) in enumerate(zip(ctxs, completion)):
        if forced and i == last:
            break
        total += float(policy.log_probs(ctx)[tok])
    return total


def sample(policy: Policy, prompt: Sequence[int], decode: DecodePolicy, rng: np.random.Generator | None = None) -> TokenSeq:
    """Draw one terminal completion; deterministic given ``rng``'s state."""
    if rng is None:
        rng = stream(decode.seed, "sample")
    eos = policy.vocab.eos_id
    ctx = policy.initial_context(prompt)
    out: list[int] = []
    for pos in range(decode.max_len):
        if pos == decode.max_len - 1:
            out.append(eos)
            break
        if decode.greedy:
            tok = int(np.argmax(policy.row(ctx)))
        else:
            cum = policy.decode_dist(ctx, decode.temperature, decode.top_p)
            tok = int(np.searchsorted(cum, rng.random(), side="right"))
            if tok >= len(cum):
                tok = len(cum) - 1
        out.append(tok)
        if tok == eos:
            break
        ctx = ctx[1:] + (tok,)
    return tuple(out)


def greedy(policy: Policy, prompt: Sequence[int], max_len: int) -> TokenSeq:
    return sample(policy, prompt, DecodePolicy(max_len=max_len).as_greedy(), None)


def _enumerate_log(policy: Policy, prompt: Sequence[int], max_len: int, budget: int) -> dict[TokenSeq, float]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if policy.V ** max_len > budget:
        raise EnumerationBudgetError(f"V^max_len = {policy.V}^{max_len} exceeds the enumeration budget {budget}")
    eos = policy.vocab.eos_id
    out: dict[TokenSeq, float] = {}
    stack: list[tuple[TokenSeq, Context, float]] = [((), policy.initial_context(prompt), 0.0)]
    while stack:
        prefix, ctx, lp = stack.pop()
        if len(prefix) == max_len - 1:
            out[prefix + (eos,)] = lp
            continue
        row = policy.log_probs(ctx)
        for tok in range(policy.V):
            step = lp + float(row[tok])
            if step == -math.inf or math.exp(step) == 0.0:
                continue
            if tok == eos:
                out[prefix + (tok,)] = step
            else:
                stack.append((prefix + (tok,), ctx[1:] + (tok,), step))
    return out


def enumerate_dist(policy: Policy, prompt: Sequence[int], max_len: int, budget: int = DEFAULT_ENUM_BUDGET) -> dict[TokenSeq, float]:
    """Exact completion distribution; zero-probability completions are omitted."""
    return {seq: math.exp(lp) for seq, lp in _enumerate_log(policy, prompt, max_len, budget).items()}


# --------------------------------------------------------------------------- gradients


@dataclass
class CompiledBatch:
    """Per-context target counts of a batch of (prompt, target) pairs."""

    contexts: list[Context]
    counts: np.ndarray  # (n_contexts, V)
    n_examples: int

    @property
    def occurrences(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def compile_batch(policy: Policy, batch: Sequence[tuple[Sequence[int], Sequence[int]]],
                  max_len: int | None = None) -> CompiledBatch:
    """Count target tokens per context.

    With ``max_len`` set, the final EOS of a target of exactly ``max_len``
    tokens is forced rather than chosen, so it is left out as in
    :func:`logprob_seq`.
    """
    if len(batch) == 0:
        raise EmptyBatchError("empty batch")
    index: dict[Context, int] = {}
    rows: list[np.ndarray] = []
    for prompt, target in batch:
        policy.vocab.check_ids(prompt)
        check_completion(target, policy.vocab, max_len)
        chosen = target[:-1] if max_len is not None and len(target) == max_len else target
        for ctx, tok in zip(policy.contexts_for(prompt, chosen), chosen):
            j = index.get(ctx)
            if j is None:
                j = index[ctx] = len(rows)
                rows.append(np.zeros(policy.V))
            rows[j][tok] += 1.0
    ctxs = list(index)
    return CompiledBatch(ctxs, np.vstack(rows) if rows else np.zeros((0, policy.V)), len(batch))


def _stack(policy: Policy, ctxs: Sequence[Context]) -> np.ndarray:
    return np.vstack([policy.row(c) for c in ctxs])


def grad_from_compiled(policy: Policy, cb: CompiledBatch) -> GradTable:
    if not cb.contexts:
        return {}
    z = _stack(policy, cb.contexts)
    p = np.exp(_log_softmax(z))
    g = p - cb.counts / cb.occurrences[:, None]
    return dict(zip(cb.contexts, g))


def nll_grad(policy: Policy, batch: Sequence[tuple[Sequence[int], Sequence[int]]]) -> GradTable:
    """Logit gradient of token NLL, averaged per context.

    For every visited context the row gradient is the mean over that
    context's occurrences of ``softmax(logits) - onehot(target)``; this is
    the exact gradient of :func:`context_mean_nll`.
    """
    return grad_from_compiled(policy, compile_batch(policy, batch))


def context_mean_nll(policy: Policy, batch: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Sum over visited contexts of the mean target NLL at that context."""
    cb = compile_batch(policy, batch)
    lp = _log_softmax(_stack(policy, cb.contexts))
    return float(np.sum(-(cb.counts * lp).sum(axis=1) / cb.occurrences))


def mean_seq_nll(policy: Policy, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """``-(1/N) sum log pi(target | prompt)``."""
    if len(pairs) == 0:
        raise EmptyBatchError("empty batch")
    total = 0.0
    for prompt, target in pairs:
        total += -logprob_seq(policy, prompt, target)
    return total / len(pairs)


def sgd_step(policy: Policy, grad: Mapping[Context, np.ndarray], lr: float) -> Policy:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not grad:
        return policy
    ctxs = list(grad)
    g = np.vstack([np.asarray(grad[c], dtype=np.float64) for c in ctxs])
    if not np.all(np.isfinite(g)):
        bad = ctxs[int(np.flatnonzero(~np.isfinite(g).all(axis=1))[0])]
        raise NumericError(f"non-finite gradient at context {bad}")
    if lr == 0:
        return policy
    return policy._with_matrix(ctxs, _stack(policy, ctxs) - lr * g)


def add_grads(*tables: Mapping[Context, np.ndarray], weights: Sequence[float] | None = None) -> GradTable:
    weights = weights or [1.0] * len(tables)
    out: GradTable = {}
    for w, tab in zip(weights, tables):
        for ctx, g in tab.items():
            if ctx in out:
                out[ctx] = out[ctx] + w * g
            else:
                out[ctx] = w * np.asarray(g, dtype=np.float64)
    return out


# --------------------------------------------------------------------------- divergences between policies

KL_MODES = ("exact", "monte_carlo", "markov")


def _seq_kl_exact(p: Policy, q: Policy, prompt, max_len: int, budget: int) -> float:
    lp = _enumerate_log(p, prompt, max_len, budget)
    total = 0.0
    for seq, a in lp.items():
        b = logprob_seq(q, prompt, seq, max_len)
        if math.exp(b) == 0.0:
            return math.inf
        total += math.exp(a) * (a - b)
    return max(total, 0.0)


def _ctx_codes(ctxs: np.ndarray, base: int) -> np.ndarray:
    codes = np.zeros(len(ctxs), dtype=np.int64)
    for j in range(ctxs.shape[1]):
        codes = codes * base + (ctxs[:, j] + 1)
    return codes


def _ctx_decode(codes: np.ndarray, order: int, base: int) -> np.ndarray:
    out = np.empty((len(codes), order), dtype=np.int64)
    rest = codes.copy()
    for j in range(order - 1, -1, -1):
        rest, out[:, j] = np.divmod(rest, base)
    return out - 1


def _seq_kl_markov(p: Policy, q: Policy, prompts, max_len: int) -> float:
    """Chain-rule KL averaged over prompts: sum over steps of E[row KL] under p's context marginals.

    The sum is linear in the starting mass, so all prompts share one pass
    from the uniform mixture of their initial contexts.  Contexts are tracked
    as integer codes so the recursion stays vectorised; no state is pruned.
    """
    V, n, eos = p.V, p.order, p.vocab.eos_id
    base = V + 1
    span = base ** (n - 1)
    start = _ctx_codes(np.array([p.initial_context(x) for x in prompts], dtype=np.int64), base)
    codes, inv = np.unique(start, return_inverse=True)
    mass = np.bincount(inv, minlength=len(codes)) / len(prompts)
    total = 0.0
    shift = np.arange(1, V + 1, dtype=np.int64)
    dp, dq = p.dense_log_probs(), q.dense_log_probs()
    for _ in range(max_len - 1):
        if mass.size == 0:
            break
        if dp is not None and dq is not None:
            lp, lq = dp[codes], dq[codes]
        else:
            keys = [tuple(c) for c in _ctx_decode(codes, n, base).tolist()]
            lp = _log_softmax(np.vstack([p.row(k) for k in keys]))
            lq = _log_softmax(np.vstack([q.row(k) for k in keys]))
        pp = np.exp(lp)
        if np.any((pp > 0) & (np.exp(lq) == 0)):
            return math.inf
        terms = np.where(pp > 0, pp * (lp - lq), 0.0).sum(axis=1)
        total += float(mass @ terms)
        flow = mass[:, None] * pp
        flow[:, eos] = 0.0
        nxt = ((codes % span)[:, None] * base + shift[None, :]).ravel()
        flow = flow.ravel()
        live = flow > 0
        if dp is not None and dq is not None:
            dense = np.bincount(nxt[live], weights=flow[live], minlength=len(dp))
            codes = np.flatnonzero(dense)
            mass = dense[codes]
        else:
            codes, inv = np.unique(nxt[live], return_inverse=True)
            mass = np.bincount(inv, weights=flow[live], minlength=len(codes))
    return max(total, 0.0)


def kl_samples(p: Policy, q: Policy, prompt, max_len: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample ``log p(y) - log q(y)`` for ``y ~ p``."""
    dec = DecodePolicy(temperature=1.0, top_p=1.0, max_len=max_len)
    out = np.empty(n_samples)
    for i in range(n_samples):
        y = sample(p, prompt, dec, rng)
        out[i] = logprob_seq(p, prompt, y, max_len) - logprob_seq(q, prompt, y, max_len)
    return out


def kl_policies(
    p: Policy,
    q: Policy,
    prompts: Sequence[Sequence[int]],
    mode: str = "exact",
    n_samples: int = 1000,
    max_len: int = 8,
    seed: int = 0,
    budget: int = DEFAULT_ENUM_BUDGET,
) -> float:
    """``E_x KL(p(.|x) || q(.|x))`` over completion sequences.

    ``mode`` is ``"exact"`` (enumeration), ``"markov"`` (forward recursion over
    context states, exact without enumerating sequences) or ``"monte_carlo"``.
    Returns ``inf`` when ``q`` gives zero mass to a completion ``p`` can emit.
    """
    if len(prompts) == 0:
        raise ValueError("no prompts")
    if mode not in KL_MODES:
        raise ValueError(f"unknown KL mode {mode!r}")
    if mode == "markov":
        return _seq_kl_markov(p, q, prompts, max_len)
    vals = []
    for i, prompt in enumerate(prompts):
        if mode == "exact":
            v = _seq_kl_exact(p, q, prompt, max_len, budget)
        else:
            if n_samples < 1:
                raise ValueError("monte_carlo mode needs n_samples >= 1")
            v = float(kl_samples(p, q, prompt, max_len, n_samples, stream(seed, "kl_mc", i)).mean())
        if math.isinf(v):
            return math.inf
        vals.append(v)
    return float(sum(vals) / len(vals))
