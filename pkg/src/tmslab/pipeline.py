"""End-to-end lab: data, base model, every post-training method, evaluation and files.

One replicate seed ``s`` fixes everything: its datasets, its base policy and
every rng stream downstream.  All methods of a replicate share the same
splits, base and evaluation decode policy.
"""
from __future__ import annotations

import csv
import io
import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ckptfile
from .config import LabConfig
from .errors import ConfigError
from .metrics import EvalReport, diversity_suite, json_float, kl_to_base, pld_val
from .policy import DecodePolicy, Policy, Vocab
from .rng import stream
from .tasks import (
    Dataset,
    TaskSpec,
    all_solutions,
    gen_task,
    lab_vocab,
    parse_countdown_prompt,
    retention_suite,
    save_datasets,
    score_benchmark,
)
from .trainers import (
    Monitor,
    RLConfig,
    TrainConfig,
    TrainResult,
    distill,
    drift_csv,
    teacher_targets,
    train_grpo,
    train_reinforce,
    train_sft,
    train_tms_student,
)
from .trajectory import MixtureSpec, TrajectoryBuffer, harvest, make_ckpt_dist

PARETO_HEADER = ("method", "seed", "target_avg", "forgetting", "kl_to_base", "pld_val")
SWEEP_HEADER = ("axis_value", "target_avg", "xfer", "forgetting", "kl_to_base")
SWEEP_AXES = ("T", "alpha", "ckpt_dist")


@dataclass
class Lab:
    """Everything one replicate seed fixes before post-training starts."""

    cfg: LabConfig
    seed: int
    vocab: Vocab
    target: Dataset
    extra_targets: dict[str, Dataset]
    retention: dict[str, Dataset]
    base: Policy = field(repr=False)

    @property
    def datasets(self) -> list[Dataset]:
        return [self.target, *self.extra_targets.values(), *self.retention.values()]

    @property
    def train_prompts(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(e.prompt_id, e.prompt) for e in self.target.train]

    @property
    def eval_prompts(self) -> list[tuple[int, ...]]:
        """Prompts that KL-to-base averages over: held-out target plus retention."""
        out = [e.prompt for e in self.target.test]
        for ds in self.retention.values():
            out.extend(e.prompt for e in ds.split("all"))
        return out

    @property
    def max_len(self) -> int:
        return self.cfg.policy.max_len

    def eval_decode(self) -> DecodePolicy:
        ev = self.cfg.eval
        return DecodePolicy(temperature=ev.temperature, top_p=ev.top_p, max_len=self.max_len, seed=self.seed)

    def harvest_decode(self) -> DecodePolicy:
        return DecodePolicy(temperature=self.cfg.mixture.harvest_temperature, max_len=self.max_len, seed=self.seed)

    def train_config(self, **overrides) -> TrainConfig:
        t = self.cfg.train
        kw = dict(lr=t.lr, steps=t.steps, batch_size=t.batch_size, ckpt_count=t.ckpt_count,
                  eval_every=t.eval_every, seed=self.seed)
        kw.update(overrides)
        return TrainConfig(**kw)

    def rl_config(self) -> RLConfig:
        r = self.cfg.rl
        return RLConfig(group_size=r.group_size, baseline_decay=r.baseline_decay, kl_beta=r.kl_beta,
                        std_eps=r.std_eps, temperature=r.temperature, max_len=self.max_len)

    def mixture(self, T: int | None = None, alpha: float | None = None, kind: str | None = None) -> MixtureSpec:
        m = self.cfg.mixture
        T = self.cfg.train.ckpt_count if T is None else T
        kind = m.ckpt_dist if kind is None else kind
        weights = m.weights if kind == "custom" else None
        return MixtureSpec(m.alpha if alpha is None else alpha, T, make_ckpt_dist(kind, T, weights or None))

    def monitor(self) -> Monitor:
        return Monitor(base=self.base, train=self.target.train, val=self.target.val, target=self.target.test,
                       target_verifier=self.target.verifier(),
                       retention=[(ds.split("all"), ds.verifier()) for ds in self.retention.values()],
                       kl_prompts=self.eval_prompts, kl_mode=self.cfg.eval.kl_mode, max_len=self.max_len)


# --------------------------------------------------------------------------- data and base


def _task_spec(cfg: LabConfig, seed: int, numbers: int | None = None, name: str | None = None,
               size: int | None = None) -> TaskSpec:
    t = cfg.task
    return TaskSpec(t.kind, t.size if size is None else size, seed=seed,
                    numbers_per_instance=t.numbers_per_instance if numbers is None else numbers,
                    value_range=tuple(t.value_range), max_target=t.max_target, seq_len=t.retention_seq_len,
                    split_fracs=tuple(t.split_fracs), name=name)


def make_datasets(cfg: LabConfig, seed: int) -> tuple[Dataset, dict[str, Dataset], dict[str, Dataset]]:
    """Primary target, extra countdown targets and the retention suite for one seed."""
    target = gen_task(_task_spec(cfg, seed))
    extras = {}
    for k in cfg.task.extra_targets:
        name = f"countdown_k{k}"
        extras[name] = gen_task(_task_spec(cfg, seed, numbers=k, name=name))
    suite = retention_suite(cfg.task.retention_seq_len, seed)
    retention = {k: suite[k] for k in cfg.task.retention}
    return target, extras, retention


def pretraining_pairs(cfg: LabConfig, seed: int, target: Dataset,
                      retention: dict[str, Dataset]) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Corpus the base policy is fitted to.

    Countdown prompts from a separate pool (and, if enabled, the lab's own
    prompts) each contribute several randomly chosen valid solutions, so the
    base spreads its mass over alternative answers.  Retention references are
    repeated ``retention_weight`` times so the base masters them.
    """
    b = cfg.base
    vocab = target.vocab
    rng = stream(seed, "pretrain_targets")
    lab_prompts = {e.prompt for e in target.split("all")}
    prompts: list[tuple[int, ...]] = []
    if b.pool_size > 0:
        pool = gen_task(_task_spec(cfg, seed, name="pretrain", size=max(b.pool_size, 3)))
        prompts.extend(e.prompt for e in pool.split("all")[:b.pool_size] if e.prompt not in lab_prompts)
    if b.include_lab_prompts:
        prompts.extend(e.prompt for e in target.split("all"))
    pairs = []
    for prompt in prompts:
        numbers, value = parse_countdown_prompt(prompt, vocab)
        sols = all_solutions(numbers, value)
        for j in rng.choice(len(sols), size=min(b.solutions_per_prompt, len(sols)), replace=False):
            pairs.append((prompt, vocab.encode(["<ans>", *sols[int(j)], "<eos>"])))
    for ds in retention.values():
        for e in ds.split("all"):
            pairs.extend([(e.prompt, e.reference)] * b.retention_weight)
    return pairs


def build_base(cfg: LabConfig, seed: int, target: Dataset, retention: dict[str, Dataset]) -> Policy:
    pairs = pretraining_pairs(cfg, seed, target, retention)
    init = Policy.zeros(target.vocab, cfg.policy.order)
    if cfg.base.steps == 0 or not pairs:
        return init
    pre = TrainConfig(lr=cfg.base.lr, steps=cfg.base.steps, ckpt_count=1, seed=seed)
    return distill(init, pairs, pre, tag="base", max_len=cfg.policy.max_len).policy


def build_lab(cfg: LabConfig, seed: int) -> Lab:
    target, extras, retention = make_datasets(cfg, seed)
    base = build_base(cfg, seed, target, retention)
    return Lab(cfg, seed, lab_vocab(), target, extras, retention, base)


# --------------------------------------------------------------------------- methods


@dataclass
class MethodRun:
    method: str
    result: TrainResult
    buffer: TrajectoryBuffer | None = None


class Runner:
    """Runs the methods of one replicate, sharing the SFT trajectory between the methods that need it."""

    def __init__(self, lab: Lab):
        self.lab = lab
        self._sft: TrainResult | None = None

    def sft(self) -> TrainResult:
        if self._sft is None:
            lab = self.lab
            self._sft = train_sft(lab.base, lab.target.train, lab.train_config(), lab.monitor(), lab.max_len)
        return self._sft

    def run(self, method: str) -> MethodRun:
        lab = self.lab
        cfg, mon, L = lab.train_config(), lab.monitor(), lab.max_len
        train = lab.target.train
        if method == "sft":
            return MethodRun(method, self.sft())
        if method == "self_sft":
            teacher = teacher_targets(lab.base, train, lab.harvest_decode(), lab.seed, "self_sft")
            return MethodRun(method, distill(lab.base, teacher, cfg, mon, "self_sft", L))
        if method == "final_sft":
            buf = harvest(self.sft().checkpoints[-1:], lab.train_prompts, lab.harvest_decode(), lab.seed)
            teacher = [(e.prompt, buf[(1, e.prompt_id)]) for e in train]
            return MethodRun(method, distill(lab.base, teacher, cfg, mon, "final_sft", L), buf)
        if method == "reinforce":
            return MethodRun(method, train_reinforce(lab.base, lab.train_prompts, lab.target.verifier(), cfg,
                                                     lab.rl_config(), mon))
        if method == "grpo":
            return MethodRun(method, train_grpo(lab.base, lab.train_prompts, lab.target.verifier(), cfg,
                                                lab.rl_config(), mon))
        if method == "tms":
            return self.tms(lab.mixture())
        raise ConfigError(f"unknown method {method!r}")

    def tms(self, mix: MixtureSpec, ckpt_count: int | None = None) -> MethodRun:
        """Harvest the SFT trajectory (Stage 1 runs first if needed), then train the student."""
        lab = self.lab
        if lab.cfg.mixture.buffer_dir and ckpt_count is None:
            buf = load_prior_buffer(Path(lab.cfg.mixture.buffer_dir), lab.seed)
            if buf.T != mix.T:
                raise ConfigError(f"prior buffer has T={buf.T} but the mixture needs T={mix.T}")
        else:
            if ckpt_count is None or ckpt_count == lab.cfg.train.ckpt_count:
                stage1 = self.sft()
            else:
                stage1 = train_sft(lab.base, lab.target.train, lab.train_config(ckpt_count=ckpt_count), None,
                                   lab.max_len)
            buf = harvest(stage1.checkpoints, lab.train_prompts, lab.harvest_decode(), lab.seed,
                          lab.cfg.mixture.samples_per_cell)
        cfg = lab.train_config(ckpt_count=mix.T)
        return MethodRun("tms", train_tms_student(lab.base, lab.target.train, buf, mix, cfg, lab.monitor(),
                                                  lab.max_len), buf)


def load_prior_buffer(directory: Path, seed: int) -> TrajectoryBuffer:
    path = directory / str(seed) / "buffer.txt"
    try:
        return TrajectoryBuffer.load(path)
    except (OSError, ValueError, IndexError) as err:
        raise ConfigError(f"cannot read prior buffer {path}: {err}") from None


# --------------------------------------------------------------------------- evaluation


def _target_scores(lab: Lab, policy: Policy) -> dict[str, float]:
    dec = lab.eval_decode()
    out = {lab.target.task_id: score_benchmark(policy, lab.target.test, dec, lab.target.verifier())}
    for name, ds in lab.extra_targets.items():
        out[name] = score_benchmark(policy, ds.test, dec, ds.verifier())
    return out


def _retention_scores(lab: Lab, policy: Policy) -> dict[str, float]:
    dec = lab.eval_decode()
    return {name: score_benchmark(policy, ds.split("all"), dec, ds.verifier()) for name, ds in lab.retention.items()}


def evaluate(lab: Lab, policy: Policy, method: str) -> EvalReport:
    ev = lab.cfg.eval
    div = None
    if ev.diversity:
        div = diversity_suite(policy, lab.target.split(ev.diversity_split), lab.target.verifier(), lab.eval_decode(),
                              ev.K, ev.ks, seed=lab.seed)
    kl = kl_to_base(policy, lab.base, lab.eval_prompts, mode=ev.kl_mode, max_len=lab.max_len, seed=lab.seed)
    return EvalReport(method, lab.seed, _target_scores(lab, lab.base), _target_scores(lab, policy),
                      _retention_scores(lab, lab.base), _retention_scores(lab, policy), kl,
                      pld_val(policy, lab.target.val), div, primary_target=lab.target.task_id)


# --------------------------------------------------------------------------- files


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2) + "\n"


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    v = json_float(x)
    return v if isinstance(v, str) else repr(float(v))


def pareto_csv(reports: Sequence[EvalReport]) -> str:
    rows = [(r.method, r.seed, _num(r.target_avg), _num(r.forgetting), _num(r.kl_to_base), _num(r.pld_val))
            for r in reports]
    return _csv(PARETO_HEADER, rows)


def write_cell(workdir: Path, run: MethodRun, report: EvalReport) -> Path:
    """Write ``workdir/<method>/<seed>/`` with checkpoints, buffer, drift log and report."""
    cell = workdir / run.method / str(report.seed)
    cell.mkdir(parents=True, exist_ok=True)
    for old in cell.glob("ckpt_*.bin"):
        old.unlink()
    for t, ckpt in enumerate(run.result.checkpoints, start=1):
        ckptfile.save(ckpt.params, cell / f"ckpt_{t:03d}.bin")
    if run.buffer is not None:
        run.buffer.save(cell / "buffer.txt")
    (cell / "drift.csv").write_text(drift_csv(run.result.drift), encoding="utf-8")
    (cell / "report.json").write_text(report_json(report), encoding="utf-8")
    return cell


def gen_data(cfg: LabConfig, workdir: Path) -> list[Path]:
    """Write each replicate's datasets to ``workdir/data/seed_<s>.tsv``."""
    out = []
    for seed in cfg.lab.seeds:
        target, extras, retention = make_datasets(cfg, seed)
        path = workdir / "data" / f"seed_{seed}.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_datasets([target, *extras.values(), *retention.values()], path)
        out.append(path)
    return out


def run(cfg: LabConfig, workdir: Path) -> list[EvalReport]:
    """Every configured method on every replicate seed; writes cells and ``pareto.csv``."""
    workdir.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in cfg.lab.seeds:
        lab = build_lab(cfg, seed)
        runner = Runner(lab)
        for method in cfg.lab.methods:
            mrun = runner.run(method)
            report = evaluate(lab, mrun.result.policy, method)
            write_cell(workdir, mrun, report)
            reports.append(report)
    (workdir / "pareto.csv").write_text(pareto_csv(reports), encoding="utf-8")
    return reports


def parse_axis_values(axis: str, values: Sequence[str]) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    try:
        if axis == "T":
            out = [int(v) for v in values]
        elif axis == "alpha":
            out = [float(v) for v in values]
        else:
            out = [str(v) for v in values]
    except ValueError as err:
        raise ConfigError(f"bad {axis} value: {err}") from None
    return out


def sweep(cfg: LabConfig, axis: str, values: Sequence, workdir: Path) -> list[tuple]:
    """TMS once per axis value at the configured total step budget.

    Each row averages over the replicate seeds.  Returns the CSV rows and
    writes ``workdir/sweep_<axis>.csv``.
    """
    values = parse_axis_values(axis, [str(v) for v in values])
    per_value: dict[int, list[EvalReport]] = {i: [] for i in range(len(values))}
    for seed in cfg.lab.seeds:
        lab = build_lab(cfg, seed)
        runner = Runner(lab)
        for i, v in enumerate(values):
            try:
                if axis == "T":
                    if v < 1 or v > cfg.train.steps:
                        raise ValueError(f"T={v} must lie in [1, steps]")
                    mrun = runner.tms(lab.mixture(T=v), ckpt_count=v)
                elif axis == "alpha":
                    mrun = runner.tms(lab.mixture(alpha=v))
                else:
                    mrun = runner.tms(lab.mixture(kind=v))
            except ValueError as err:
                raise ConfigError(f"sweep value {axis}={v}: {err}") from None
            per_value[i].append(evaluate(lab, mrun.result.policy, "tms"))
    rows = []
    for i, v in enumerate(values):
        reps = per_value[i]
        rows.append((v, *(float(np.mean([getattr(r, k) for r in reps])) for k in SWEEP_HEADER[1:])))
    workdir.mkdir(parents=True, exist_ok=True)
    text = _csv(SWEEP_HEADER, [(r[0], *(_num(x) for x in r[1:])) for r in rows])
    (workdir / f"sweep_{axis}.csv").write_text(text, encoding="utf-8")
    return rows

