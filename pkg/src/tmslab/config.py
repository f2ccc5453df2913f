"""Lab configuration: ``[section]`` headers with ``key = value`` lines.

Every section is a dataclass; loading validates types and rejects unknown
sections or keys.  :func:`dumps` writes every field, so ``loads(dumps(c)) == c``.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

METHODS = ("sft", "self_sft", "final_sft", "reinforce", "grpo", "tms")


@dataclass(frozen=True)
class LabSection:
    seed: int = 0  # first replicate seed
    replicates: int = 1  # seeds seed, seed + 1, ...
    methods: tuple[str, ...] = ("sft", "tms")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.replicates)]


@dataclass(frozen=True)
class TaskSection:
    kind: str = "countdown_micro"
    size: int = 40
    numbers_per_instance: int = 3
    value_range: tuple[int, ...] = (1, 9)
    max_target: int = 99
    split_fracs: tuple[float, ...] = (0.5, 0.25, 0.25)
    extra_targets: tuple[int, ...] = ()  # numbers_per_instance of extra countdown benchmarks
    retention: tuple[str, ...] = ("copy", "reverse", "parity")
    retention_seq_len: int = 1


@dataclass(frozen=True)
class PolicySection:
    order: int = 3
    max_len: int = 8


@dataclass(frozen=True)
class BaseSection:
    steps: int = 100
    lr: float = 1.0
    pool_size: int = 200
    solutions_per_prompt: int = 3
    retention_weight: int = 20
    include_lab_prompts: bool = True


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.05
    steps: int = 500
    batch_size: int = 0
    ckpt_count: int = 10
    eval_every: int = 50


@dataclass(frozen=True)
class RLSection:
    group_size: int = 4
    baseline_decay: float = 0.9
    kl_beta: float = 0.01
    std_eps: float = 1e-8
    temperature: float = 1.0


@dataclass(frozen=True)
class MixtureSection:
    alpha: float = 0.25
    ckpt_dist: str = "uniform"
    weights: tuple[float, ...] = ()
    harvest_temperature: float = 1.0
    samples_per_cell: int = 1
    buffer_dir: str = ""  # reuse a prior harvest: directory holding <seed>/buffer.txt


@dataclass(frozen=True)
class EvalSection:
    K: int = 100
    ks: tuple[int, ...] = (1, 10, 100)
    temperature: float = 1.0
    top_p: float = 1.0
    kl_mode: str = "markov"
    diversity: bool = True
    diversity_split: str = "test"
    benchmarks: tuple[str, ...] = ("target", "retention")


@dataclass(frozen=True)
class PathsSection:
    workdir: str = "runs"


@dataclass(frozen=True)
class LabConfig:
    lab: LabSection = field(default_factory=LabSection)
    task: TaskSection = field(default_factory=TaskSection)
    policy: PolicySection = field(default_factory=PolicySection)
    base: BaseSection = field(default_factory=BaseSection)
    train: TrainSection = field(default_factory=TrainSection)
    rl: RLSection = field(default_factory=RLSection)
    mixture: MixtureSection = field(default_factory=MixtureSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        validate(self)

    def replace(self, section: str, **changes) -> LabConfig:
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS = {f.name: f for f in dataclasses.fields(LabConfig)}


def _section_type(name: str) -> type:
    return typing.get_type_hints(LabConfig)[name]


def _parse_scalar(raw: str, typ: type, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ.__name__}") from None


def _parse(raw: str, hint, where: str):
    if typing.get_origin(hint) is tuple:
        inner = typing.get_args(hint)[0]
        parts = [p for p in raw.split(",") if p.strip()]
        return tuple(_parse_scalar(p, inner, where) for p in parts)
    return _parse_scalar(raw, hint, where)


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str) -> LabConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"unreadable config: {err}") from None
    sections = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = _section_type(name)
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw in cp.items(name):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            values[key] = _parse(raw, hints[key], f"[{name}] {key}")
        sections[name] = cls(**values)
    try:
        return LabConfig(**sections)
    except ConfigError:
        raise
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None


def load(path: str | Path) -> LabConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return loads(text)


def dumps(cfg: LabConfig) -> str:
    out = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in dataclasses.fields(sec):
            out.append(f"{f.name} = {_render(getattr(sec, f.name))}")
        out.append("")
    return "\n".join(out)


def validate(cfg: LabConfig) -> None:
    """Check every field against the invariants of the object it configures."""
    from .policy import DecodePolicy
    from .tasks import RETENTION_KINDS, TASK_KINDS, TaskSpec
    from .trainers import RLConfig, TrainConfig
    from .trajectory import MixtureSpec, make_ckpt_dist

    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    lab, task, pol, base, train, rl, mix, ev = (cfg.lab, cfg.task, cfg.policy, cfg.base, cfg.train, cfg.rl,
                                                cfg.mixture, cfg.eval)
    need(lab.methods, "[lab] methods must not be empty")
    for m in lab.methods:
        need(m in METHODS, f"[lab] unknown method {m!r}; choose from {', '.join(METHODS)}")
    need(len(set(lab.methods)) == len(lab.methods), "[lab] methods must be distinct")
    need(lab.replicates >= 1, "[lab] replicates must be >= 1")
    need(lab.seed >= 0, "[lab] seed must be non-negative")
    need(task.kind in TASK_KINDS, f"[task] unknown kind {task.kind!r}")
    need(len(task.value_range) == 2, "[task] value_range needs two integers")
    need(len(task.split_fracs) == 3, "[task] split_fracs needs three numbers")
    for r in task.retention:
        need(r in RETENTION_KINDS, f"[task] unknown retention task {r!r}")
    need(task.retention, "[task] at least one retention task is needed for the forgetting score")
    for k in task.extra_targets:
        need(2 <= k <= 4, "[task] extra_targets entries must lie in [2, 4]")
    need(base.steps >= 0 and base.lr >= 0, "[base] steps and lr must be non-negative")
    need(base.pool_size >= 0 and base.solutions_per_prompt >= 1 and base.retention_weight >= 1,
         "[base] pool_size >= 0, solutions_per_prompt >= 1 and retention_weight >= 1 required")
    need(ev.K >= 1, "[eval] K must be >= 1")
    need(all(1 <= k <= ev.K for k in ev.ks), "[eval] every k in ks must lie in [1, K]")
    need(ev.kl_mode in ("exact", "markov", "monte_carlo"), f"[eval] unknown kl_mode {ev.kl_mode!r}")
    need(ev.diversity_split in ("train", "val", "test"), "[eval] diversity_split must be train, val or test")
    need(pol.max_len >= 2 * max((task.numbers_per_instance, *task.extra_targets)) + 1,
         "[policy] max_len is too short for the longest countdown reference")
    need(pol.max_len >= 2 * task.retention_seq_len + 2, "[policy] max_len is too short for the retention references")
    need(set(ev.benchmarks) <= {"target", "retention"}, "[eval] benchmarks must be drawn from target, retention")
    need(mix.samples_per_cell >= 1, "[mixture] samples_per_cell must be >= 1")
    try:
        TaskSpec(task.kind, task.size, numbers_per_instance=task.numbers_per_instance,
                 value_range=tuple(task.value_range), max_target=task.max_target,
                 seq_len=task.retention_seq_len, split_fracs=tuple(task.split_fracs)).split_sizes()
        need(pol.order >= 1, "[policy] order must be >= 1")
        DecodePolicy(temperature=ev.temperature, top_p=ev.top_p, max_len=pol.max_len)
        DecodePolicy(temperature=mix.harvest_temperature, max_len=pol.max_len)
        TrainConfig(lr=train.lr, steps=train.steps, batch_size=train.batch_size, ckpt_count=train.ckpt_count,
                    eval_every=train.eval_every)
        RLConfig(group_size=rl.group_size, baseline_decay=rl.baseline_decay, kl_beta=rl.kl_beta,
                 std_eps=rl.std_eps, temperature=rl.temperature, max_len=pol.max_len)
        MixtureSpec(mix.alpha, train.ckpt_count,
                    make_ckpt_dist(mix.ckpt_dist, train.ckpt_count, mix.weights or None))
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from None
