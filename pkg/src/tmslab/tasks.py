"""Synthetic tasks: micro-Countdown (target) and copy/reverse/parity (retention).

Every completion ends in ``ANS <answer> EOS``; :func:`extract_answer` reads the
span after the last ``ANS``.

* countdown_micro: prompt ``CD n1 .. nk = <target digits>``, reference
  ``ANS <expression> EOS``.  The answer is the expression itself, so distinct
  valid solutions are distinct answers.
* copy / reverse / parity: prompt ``<marker> d1 .. dk``, reference
  ``<answer> ANS <answer> EOS``.  Writing the answer before the marker lets an
  order-2 policy see the task marker when it chooses the answer.
"""
from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from . import expr
from .errors import EmptyBenchmarkError, GenerationError
from .policy import DecodePolicy, Policy, TokenSeq, Vocab, greedy
from .rng import stream

TASK_KINDS = ("countdown_micro", "copy", "reverse", "parity")
RETENTION_KINDS = ("copy", "reverse", "parity")
MARKERS = {"countdown_micro": "CD", "copy": "CP", "reverse": "RV", "parity": "PA"}
SPLITS = ("train", "val", "test")
MAX_ATTEMPTS = 10**5


def lab_vocab() -> Vocab:
    toks = ["<bos>", "<eos>", "<ans>", "<pad>"]
    toks += [str(d) for d in range(10)]
    toks += ["+", "-", "*", "="]
    toks += [MARKERS[k] for k in TASK_KINDS]
    return Vocab(tuple(toks), eos_id=1, bos_id=0, ans_id=2, pad_id=3)


def canonical_answer(symbols: Sequence[str]) -> str:
    s = "".join(symbols)
    if s.isdigit():
        s = s.lstrip("0") or "0"
    return s


def extract_answer(completion: Sequence[int], vocab: Vocab) -> str | None:
    """Span between the last ANS and the following EOS (or the end), canonicalised."""
    ans = vocab.ans_id
    idx = [i for i, t in enumerate(completion) if t == ans]
    if not idx:
        return None
    span = []
    for t in completion[idx[-1] + 1:]:
        if t == vocab.eos_id:
            break
        if not 0 <= t < vocab.size:
            return None
        span.append(vocab.tokens[t])
    return canonical_answer(span)


@dataclass(frozen=True)
class Example:
    prompt: TokenSeq
    reference: TokenSeq
    gold_answer: str
    task_id: str
    prompt_id: str


@dataclass(frozen=True)
class Verifier:
    task_id: str
    check: Callable[[Sequence[int], Sequence[int]], int]

    def __call__(self, prompt: Sequence[int], completion: Sequence[int]) -> int:
        return verify(self, prompt, completion)


def verify(task: Verifier, prompt: Sequence[int], completion: Sequence[int]) -> int:
    """0/1 score; malformed input scores 0 instead of raising."""
    try:
        return 1 if task.check(prompt, completion) else 0
    except Exception:
        return 0


# --------------------------------------------------------------------------- countdown


def all_solutions(numbers: Sequence[int], target: int) -> list[str]:
    """Every expression string using each number exactly once that evaluates to target."""
    found = set()
    for perm in set(itertools.permutations(numbers)):
        for ops in itertools.product(expr.OPERATORS, repeat=len(numbers) - 1):
            s = expr.render(perm, ops)
            if expr.evaluate(list(s)) == target:
                found.add(s)
    return sorted(found)


def parse_countdown_prompt(prompt: Sequence[int], vocab: Vocab) -> tuple[list[int], int]:
    syms = vocab.decode(prompt)
    if not syms or syms[0] != MARKERS["countdown_micro"] or "=" not in syms:
        raise ValueError("not a countdown prompt")
    eq = syms.index("=")
    numbers = [int(s) for s in syms[1:eq]]
    target_digits = syms[eq + 1:]
    if not numbers or not target_digits or not all(s.isdigit() for s in target_digits):
        raise ValueError("malformed countdown prompt")
    return numbers, int("".join(target_digits))


def expression_segment(completion: Sequence[int], vocab: Vocab) -> list[str]:
    """Tokens after the last ANS (or from the start) up to EOS."""
    comp = list(completion)
    if vocab.ans_id in comp:
        comp = comp[len(comp) - comp[::-1].index(vocab.ans_id):]
    if vocab.eos_id in comp:
        comp = comp[:comp.index(vocab.eos_id)]
    return vocab.decode(comp)


def _countdown_check(vocab: Vocab):
    def check(prompt, completion):
        numbers, target = parse_countdown_prompt(prompt, vocab)
        parsed = expr.parse(expression_segment(completion, vocab))
        return sorted(parsed.numbers) == sorted(numbers) and parsed.value == target

    return check


# --------------------------------------------------------------------------- retention


def retention_answer(kind: str, digits: Sequence[str]) -> list[str]:
    if kind == "copy":
        return list(digits)
    if kind == "reverse":
        return list(reversed(digits))
    if kind == "parity":
        return [str(sum(int(d) for d in digits) % 2)]
    raise ValueError(f"{kind!r} is not a retention task")


def _retention_digits(kind: str) -> str:
    # copy/reverse avoid 0 so canonicalisation never merges distinct answers
    return "0123456789" if kind == "parity" else "123456789"


def prompt_space_size(kind: str, seq_len: int) -> int:
    return len(_retention_digits(kind)) ** seq_len


def _retention_check(kind: str, vocab: Vocab):
    def check(prompt, completion):
        syms = vocab.decode(prompt)
        if not syms or syms[0] != MARKERS[kind]:
            raise ValueError("prompt marker does not match task")
        gold = canonical_answer(retention_answer(kind, syms[1:]))
        return extract_answer(completion, vocab) == gold

    return check


def make_verifier(kind: str, vocab: Vocab, task_id: str | None = None) -> Verifier:
    if kind == "countdown_micro":
        check = _countdown_check(vocab)
    elif kind in RETENTION_KINDS:
        check = _retention_check(kind, vocab)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return Verifier(task_id or kind, check)


# --------------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    size: int
    seed: int = 0
    numbers_per_instance: int = 3
    value_range: tuple[int, int] = (1, 9)
    max_target: int = 99
    seq_len: int = 1
    split_fracs: tuple[float, float, float] = (0.5, 0.25, 0.25)
    name: str | None = None
    vocab: Vocab = field(default_factory=lab_vocab)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.size < 3:
            raise ValueError("size must be >= 3 (one example per split)")
        if not 2 <= self.numbers_per_instance <= 4:
            raise ValueError("numbers_per_instance must lie in [2, 4]")
        lo, hi = self.value_range
        if not 1 <= lo <= hi <= 9:
            raise ValueError("value_range must lie within [1, 9]")
        if self.max_target < 1:
            raise ValueError("max_target must be >= 1")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if len(self.split_fracs) != 3 or min(self.split_fracs) <= 0 or abs(sum(self.split_fracs) - 1) > 1e-9:
            raise ValueError("split_fracs must be three positive numbers summing to 1")
        if not self.vocab.is_full:
            raise ValueError("task vocabularies need bos/eos/ans/pad")

    @property
    def task_id(self) -> str:
        return self.name or self.kind

    def split_sizes(self) -> tuple[int, int, int]:
        n_train = max(1, math.floor(self.size * self.split_fracs[0]))
        n_val = max(1, math.floor(self.size * self.split_fracs[1]))
        n_test = self.size - n_train - n_val
        if n_test < 1:
            raise ValueError(f"size {self.size} leaves no test examples")
        return n_train, n_val, n_test


@dataclass(frozen=True)
class Dataset:
    task_id: str
    kind: str
    vocab: Vocab
    train: tuple[Example, ...]
    val: tuple[Example, ...]
    test: tuple[Example, ...]

    def split(self, name: str) -> tuple[Example, ...]:
        if name == "all":
            return self.train + self.val + self.test
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def verifier(self) -> Verifier:
        return make_verifier(self.kind, self.vocab, self.task_id)


def _countdown_instances(spec: TaskSpec) -> list[tuple[tuple[int, ...], int, str]]:
    rng = stream(spec.seed, "gen_task", spec.kind, spec.task_id)
    lo, hi = spec.value_range
    k = spec.numbers_per_instance
    seen = set()
    out = []
    misses = 0
    while len(out) < spec.size:
        if misses >= MAX_ATTEMPTS:
            raise GenerationError(f"no new multi-solution instance in {MAX_ATTEMPTS} attempts")
        numbers = [int(v) for v in rng.integers(lo, hi + 1, size=k)]
        ops = [expr.OPERATORS[int(i)] for i in rng.integers(0, 3, size=k - 1)]
        target = expr.evaluate(list(expr.render(numbers, ops)))
        key = (tuple(sorted(numbers)), target)
        if not 1 <= target <= spec.max_target or key in seen:
            misses += 1
            continue
        sols = all_solutions(numbers, target)
        if len(sols) < 2:
            misses += 1
            continue
        seen.add(key)
        misses = 0
        out.append((tuple(numbers), target, sols[0]))
    return out


def _countdown_example(vocab, numbers, target, solution, task_id, pid) -> Example:
    prompt = vocab.encode(["CD", *map(str, numbers), "=", *str(target)])
    reference = vocab.encode(["<ans>", *solution, "<eos>"])
    return Example(prompt, reference, solution, task_id, pid)


def _retention_examples(spec: TaskSpec) -> list[tuple[list[str], list[str]]]:
    space = prompt_space_size(spec.kind, spec.seq_len)
    if spec.size > space:
        raise GenerationError(f"{spec.kind} with seq_len={spec.seq_len} has only {space} distinct prompts")
    rng = stream(spec.seed, "gen_task", spec.kind, spec.task_id)
    alphabet = _retention_digits(spec.kind)
    chosen = sorted(rng.choice(space, size=spec.size, replace=False).tolist())
    order = rng.permutation(len(chosen))
    out = []
    for j in order:
        idx = chosen[j]
        digits = []
        for _ in range(spec.seq_len):
            idx, r = divmod(idx, len(alphabet))
            digits.append(alphabet[r])
        digits.reverse()
        out.append((digits, retention_answer(spec.kind, digits)))
    return out


def gen_task(spec: TaskSpec) -> Dataset:
    """Deterministic train/val/test splits, disjoint by prompt."""
    vocab = spec.vocab
    tid = spec.task_id
    n_train, n_val, _ = spec.split_sizes()
    examples = []
    if spec.kind == "countdown_micro":
        for numbers, target, sol in _countdown_instances(spec):
            examples.append((numbers, target, sol))
    else:
        examples = _retention_examples(spec)

    splits = {"train": [], "val": [], "test": []}
    for i, item in enumerate(examples):
        name = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        pid = f"{tid}/{name}/{len(splits[name]):04d}"
        if spec.kind == "countdown_micro":
            ex = _countdown_example(vocab, *item, tid, pid)
        else:
            digits, answer = item
            prompt = vocab.encode([MARKERS[spec.kind], *digits])
            reference = vocab.encode([*answer, "<ans>", *answer, "<eos>"])
            ex = Example(prompt, reference, canonical_answer(answer), tid, pid)
        splits[name].append(ex)
    return Dataset(tid, spec.kind, vocab, tuple(splits["train"]), tuple(splits["val"]), tuple(splits["test"]))


def retention_suite(seq_len: int = 1, seed: int = 0, vocab: Vocab | None = None) -> dict[str, Dataset]:
    """One dataset per retention kind covering that kind's whole prompt space."""
    vocab = vocab or lab_vocab()
    out = {}
    for kind in RETENTION_KINDS:
        size = prompt_space_size(kind, seq_len)
        out[kind] = gen_task(TaskSpec(kind, size, seed=seed, seq_len=seq_len, vocab=vocab))
    return out


def score_benchmark(policy: Policy, bench: Sequence[Example], decode: DecodePolicy, verifier: Verifier | None = None) -> float:
    """Accuracy of one greedy completion per prompt."""
    if len(bench) == 0:
        raise EmptyBenchmarkError("empty benchmark split")
    if verifier is None:
        kinds = {ex.task_id for ex in bench}
        if len(kinds) != 1:
            raise ValueError("mixed-task benchmark needs an explicit verifier")
        kind = next(iter(kinds))
        verifier = make_verifier(kind if kind in TASK_KINDS else "countdown_micro", policy.vocab, kind)
    hits = sum(verify(verifier, ex.prompt, greedy(policy, ex.prompt, decode.max_len)) for ex in bench)
    return hits / len(bench)


# --------------------------------------------------------------------------- dataset file


def dataset_lines(ds: Dataset) -> list[str]:
    lines = []
    for name in SPLITS:
        for ex in ds.split(name):
            lines.append(
                "\t".join([
                    ds.task_id,
                    name,
                    " ".join(map(str, ex.prompt)),
                    " ".join(map(str, ex.reference)),
                    ex.gold_answer,
                ])
            )
    return lines


def save_datasets(datasets: Sequence[Dataset], path: str | Path) -> None:
    lines = []
    for ds in datasets:
        lines += dataset_lines(ds)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_datasets(path: str | Path, vocab: Vocab, kinds: dict[str, str] | None = None) -> dict[str, Dataset]:
    """Read a dataset file; ``kinds`` maps task ids to task kinds when they differ."""
    kinds = kinds or {}
    grouped: dict[str, dict[str, list[Example]]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        tid, name, prompt, ref, gold = line.split("\t")
        bucket = grouped.setdefault(tid, {s: [] for s in SPLITS})[name]
        pid = f"{tid}/{name}/{len(bucket):04d}"
        bucket.append(Example(tuple(map(int, prompt.split())), tuple(map(int, ref.split())), gold, tid, pid))
    out = {}
    for tid, splits in grouped.items():
        kind = kinds.get(tid, tid if tid in TASK_KINDS else "countdown_micro")
        out[tid] = Dataset(tid, kind, vocab, *(tuple(splits[s]) for s in SPLITS))
    return out
