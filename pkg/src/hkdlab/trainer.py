"""Three-tier training: bilingual teachers, cluster-wise teacher-assistants
(selective distillation) and the ultimate multilingual student (adaptive
distillation against every effective teacher-assistant).

Every stage runs through :func:`train_loop`, which owns batching, per-token
gradient normalisation, Adam, step counting and per-epoch checkpointing, so
the stages differ only in the loss they plug in.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import ParallelCorpus, Vocabulary, make_minibatches, upsample
from .distill import (
    DistillationPlan,
    LossResult,
    adaptive_total_loss,
    anneal_lambda2,
    nll_total_loss,
    selective_total_loss,
    teacher_distributions,
    weights_from_perplexities,
)
from .errors import ConfigurationError, DivergenceError, HkdError
from .evaluation import bleu
from .langrep import Clustering, effective_cluster_index
from .model import (
    Batch,
    ModelDims,
    OptimizerState,
    SequenceModel,
    apply_update,
    greedy_decode_batch,
    load_checkpoint,
    perplexity_from_dists,
    save_checkpoint,
    token_accuracy,
)
from .seeds import derive_seed, rng_for

log = logging.getLogger(__name__)

TRAINING_STAGES = ("teachers", "baseline", "tas", "student")
TaKey = tuple[int, int]


class CorpusStore:
    """Corpora keyed by language and split; every read is recorded."""

    def __init__(self, corpora: Mapping[str, Mapping[str, ParallelCorpus]]):
        self._corpora = {l: dict(s) for l, s in corpora.items()}
        self.access_log: list[tuple[str, str, str]] = []

    def get(self, lang: str, split: str, stage: str) -> ParallelCorpus:
        self.access_log.append((stage, lang, split))
        try:
            return self._corpora[lang][split]
        except KeyError:
            raise ConfigurationError(f"no {split} corpus for language {lang!r}") from None

    def sizes(self, split: str = "train") -> dict[str, int]:
        return {l: len(s[split]) for l, s in self._corpora.items() if split in s}


@dataclass
class OptimSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class StageEpochs:
    teacher: int = 10
    ta: int = 10
    student: int = 10


@dataclass
class HkdExperiment:
    languages: list[str]
    vocab: Vocabulary
    corpora: CorpusStore
    clusterings: list[Clustering]
    plan: DistillationPlan = field(default_factory=DistillationPlan)
    dims: ModelDims | None = None
    epochs: StageEpochs = field(default_factory=StageEpochs)
    batch_size: int = 16
    seed: int = 0
    out_dir: Path | None = None
    optim: OptimSettings = field(default_factory=OptimSettings)
    init_scale: float = 0.15
    order: str = "blocked"
    accuracy: str = "bleu"
    upsample: bool = True
    max_decode_len: int | None = None
    exclude_worst_ta: bool = False
    tiers: dict[str, str] = field(default_factory=dict)
    families: dict[str, str] = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        if self.dims is None:
            self.dims = ModelDims(len(self.vocab))
        if self.dims.vocab != len(self.vocab):
            raise ConfigurationError("model vocab size does not match the vocabulary")
        for c in self.clusterings:
            missing = [l for l in self.languages if l not in c.assignment]
            if missing:
                raise ConfigurationError(f"clustering type {c.type_id} does not cover {missing}")
        if self.order not in ("blocked", "mixed"):
            raise ConfigurationError(f"unknown batch order {self.order!r}")
        self.plan.validate()
        for l in self.languages:
            self.vocab.tag_id(l)

    def path(self, *parts) -> Path | None:
        return None if self.out_dir is None else Path(self.out_dir).joinpath(*parts)

    def decode_len(self) -> int:
        if self.max_decode_len:
            return self.max_decode_len
        longest = max(len(y) for l in self.languages for _, y in self.corpora._corpora[l]["train"].pairs)
        return 2 * longest + 5

    def ta_keys(self) -> list[TaKey]:
        return [(c.type_id, k) for c in self.clusterings for k in range(1, c.n + 1)]

    def cluster_members(self, key: TaKey) -> list[str]:
        t, k = key
        c = next(c for c in self.clusterings if c.type_id == t)
        return [l for l in self.languages if c.assignment[l] == k]


@dataclass
class TrainState:
    model: SequenceModel
    opt: OptimizerState
    epoch: int = 0
    step: int = 0
    flags: dict[str, bool] | None = None
    flag_history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        save_checkpoint(
            path,
            self.model,
            self.opt,
            {"epoch": self.epoch, "step": self.step, "flags": self.flags, "flag_history": self.flag_history},
        )

    @classmethod
    def load(cls, path) -> "TrainState":
        model, opt, extra = load_checkpoint(path)
        return cls(model, opt, extra["epoch"], extra["step"], extra.get("flags"), extra.get("flag_history", []))


@dataclass
class FlagState:
    flags: dict[str, bool]
    history: list[dict] = field(default_factory=list)


class StopTraining(HkdError):
    """Raised from an epoch callback to interrupt a stage after its checkpoint was written."""


class StageError(HkdError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.resume_token = stage
        super().__init__(f"stage {stage!r} failed: {cause}; rerun with --resume to continue from {stage!r}")


# ---------------------------------------------------------------------------
# batching and the shared loop
# ---------------------------------------------------------------------------


def stage_corpora(exp: HkdExperiment, langs: Sequence[str], stage: str) -> dict[str, ParallelCorpus]:
    raw = {l: exp.corpora.get(l, "train", stage) for l in langs}
    if exp.upsample and len(raw) > 1:
        return upsample(raw, derive_seed(exp.seed, "upsample"))
    return raw


def epoch_batches(exp: HkdExperiment, corpora: Mapping[str, ParallelCorpus], stream: str, epoch: int) -> list[tuple[str, Batch]]:
    """All minibatches of one epoch, languages in a seeded per-epoch order.

    ``order="blocked"`` visits every batch of one language before the next;
    ``"mixed"`` shuffles batches across languages.
    """
    langs = sorted(corpora)
    order = [langs[i] for i in rng_for(exp.seed, stream, "lang-order", epoch).permutation(len(langs))]
    items = []
    for lang in order:
        tag = exp.vocab.tag_id(lang)
        seed = derive_seed(exp.seed, stream, "batches", epoch, lang)
        for pairs in make_minibatches(corpora[lang], exp.batch_size, seed):
            items.append((lang, Batch.from_pairs(pairs, tag=tag, lang=lang)))
    if exp.order == "mixed":
        perm = rng_for(exp.seed, stream, "mix", epoch).permutation(len(items))
        items = [items[i] for i in perm]
    return items


def steps_per_epoch(exp: HkdExperiment, corpora: Mapping[str, ParallelCorpus]) -> int:
    return sum(math.ceil(len(c) / exp.batch_size) for c in corpora.values())


LossFn = Callable[[SequenceModel, str, Batch, int], LossResult]


def train_loop(
    exp: HkdExperiment,
    state: TrainState,
    corpora: Mapping[str, ParallelCorpus],
    epochs: int,
    stream: str,
    loss_fn: LossFn,
    on_epoch_end: Callable[[TrainState], TrainState | None] | None = None,
    name: str = "",
) -> TrainState:
    """Run epochs ``state.epoch .. epochs-1``.  The summed loss gradient is divided
    by the batch's token count before the Adam step."""
    while state.epoch < epochs:
        model, opt, step = state.model, state.opt, state.step
        for lang, batch in epoch_batches(exp, corpora, stream, state.epoch):
            res = loss_fn(model, lang, batch, step)
            if not math.isfinite(res.value):
                raise DivergenceError(f"{name}: non-finite loss {res.value} at step {step} (language {lang})")
            model, opt = apply_update(model, res.grad / batch.n_tokens, opt)
            step += 1
        state = replace(state, model=model, opt=opt, epoch=state.epoch + 1, step=step)
        log.info("%s: epoch %d/%d done, %d steps", name or stream, state.epoch, epochs, step)
        if on_epoch_end is not None:
            state = on_epoch_end(state) or state
    return state


def fresh_state(exp: HkdExperiment, stream: str) -> TrainState:
    model = SequenceModel.init(exp.dims, derive_seed(exp.seed, stream, "init"), exp.init_scale)
    o = exp.optim
    return TrainState(model, OptimizerState.for_model(model, o.lr, o.beta1, o.beta2, o.eps))


def _resume(path: Path | None, resume: bool) -> TrainState | None:
    if resume and path is not None and path.exists():
        return TrainState.load(path)
    return None


def _save_and_maybe_stop(path: Path | None, stop_after: int | None):
    def cb(state: TrainState):
        if path is not None:
            state.save(path)
        if stop_after is not None and state.epoch >= stop_after:
            raise StopTraining(f"stopped after epoch {state.epoch}")

    return cb


def _nll(model, lang, batch, step) -> LossResult:
    return nll_total_loss(batch, model)


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------


def decode_corpus(exp: HkdExperiment, model: SequenceModel, corpus: ParallelCorpus) -> list[list[int]]:
    tag = exp.vocab.tag_id(corpus.lang)
    return greedy_decode_batch(model, [(tag,) + tuple(x) for x, _ in corpus.pairs], exp.decode_len())


def corpus_bleu(exp: HkdExperiment, model: SequenceModel, corpus: ParallelCorpus) -> float:
    if len(corpus) == 0:
        return 0.0
    return bleu(decode_corpus(exp, model, corpus), [list(y) for _, y in corpus.pairs]).score


def accuracy(exp: HkdExperiment, model: SequenceModel, corpus: ParallelCorpus) -> float:
    if exp.accuracy == "bleu":
        return corpus_bleu(exp, model, corpus)
    if exp.accuracy == "token_accuracy":
        batch = Batch.from_pairs(corpus.pairs, tag=exp.vocab.tag_id(corpus.lang))
        return 100.0 * token_accuracy(model, batch)
    raise ConfigurationError(f"unknown accuracy measure {exp.accuracy!r}")


# ---------------------------------------------------------------------------
# tier 1: bilingual teachers
# ---------------------------------------------------------------------------


def train_teacher(exp: HkdExperiment, lang: str, resume: bool = True) -> SequenceModel:
    path = exp.path("teachers", f"{lang}.ckpt")
    stream = f"teacher/{lang}"
    state = _resume(path, resume) or fresh_state(exp, stream)
    corpora = {lang: exp.corpora.get(lang, "train", "teachers")}
    try:
        state = train_loop(exp, state, corpora, exp.epochs.teacher, stream, _nll,
                           _save_and_maybe_stop(path, None), f"teacher {lang}")
    except DivergenceError as e:
        raise DivergenceError(f"teacher {lang} diverged: {e}") from e
    return state.model


def _teacher_job(args):
    exp, lang, resume = args
    return lang, train_teacher(exp, lang, resume)


def _parallel_map(exp: HkdExperiment, fn, items):
    if exp.jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def train_bilingual_teachers(exp: HkdExperiment, resume: bool = True) -> dict[str, SequenceModel]:
    done = _parallel_map(exp, _teacher_job, [(exp, l, resume) for l in exp.languages])
    for l in exp.languages:
        exp.corpora.access_log.append(("teachers", l, "train"))
    return dict(done)


# ---------------------------------------------------------------------------
# uniform multilingual baseline
# ---------------------------------------------------------------------------


def train_multilingual_nll(
    exp: HkdExperiment,
    langs: Sequence[str] | None = None,
    epochs: int | None = None,
    stream: str = "multilingual",
    state: TrainState | None = None,
    path: Path | None = None,
    resume: bool = True,
    stage: str = "baseline",
) -> TrainState:
    """Plain NLL training of one tagged model over several languages."""
    langs = list(langs or exp.languages)
    epochs = exp.epochs.student if epochs is None else epochs
    if state is None:
        state = _resume(path, resume) or fresh_state(exp, stream)
    corpora = stage_corpora(exp, langs, stage)
    return train_loop(exp, state, corpora, epochs, stream, _nll, _save_and_maybe_stop(path, None), stage)


# ---------------------------------------------------------------------------
# tier 2: selective distillation into teacher-assistants
# ---------------------------------------------------------------------------


def update_flags(
    exp: HkdExperiment,
    ta: SequenceModel,
    teacher_acc: Mapping[str, float],
    dev: Mapping[str, ParallelCorpus],
    threshold: float,
    flags: FlagState,
    epoch: int,
) -> FlagState:
    """Distil language l only while the teacher-assistant trails its teacher by more than ``threshold``."""
    new = dict(flags.flags)
    history = list(flags.history)
    for lang in sorted(dev):
        acc = accuracy(exp, ta, dev[lang])
        new[lang] = bool(acc < teacher_acc[lang] + threshold)
        history.append({"epoch": epoch, "lang": lang, "flag": new[lang],
                        "acc_student": acc, "acc_teacher": teacher_acc[lang]})
    return FlagState(new, history)


def flag_rule(acc_student: float, acc_teacher: float, threshold: float) -> bool:
    return acc_student < acc_teacher + threshold


def ta_stream(key: TaKey) -> str:
    return f"ta/{key[0]}_{key[1]}"


def train_teacher_assistant(
    exp: HkdExperiment,
    key: TaKey,
    teachers: Mapping[str, SequenceModel],
    resume: bool = True,
    stop_after: int | None = None,
    initial_flags: bool = True,
    loss_log: list | None = None,
) -> TrainState:
    """Selective distillation for one cluster.

    Every batch of language l uses ``(1-lam) NLL + lam KD`` against teacher l
    while its flag is up and plain NLL otherwise; flags are recomputed from
    dev accuracy every ``plan.check_every`` epochs.
    """
    langs = exp.cluster_members(key)
    missing = [l for l in langs if l not in teachers]
    if missing:
        raise ConfigurationError(f"teacher-assistant {key}: no trained teacher for {missing}")
    plan = exp.plan
    stream = ta_stream(key)
    path = exp.path("tas", f"{key[0]}_{key[1]}.ckpt")
    state = _resume(path, resume)
    if state is None:
        state = fresh_state(exp, stream)
        state.flags = {l: initial_flags for l in langs}
    corpora = stage_corpora(exp, langs, "tas")
    dev = {l: exp.corpora.get(l, "dev", "tas") for l in langs}
    teacher_acc = {l: accuracy(exp, teachers[l], dev[l]) for l in langs}
    flags_now = dict(state.flags)

    def loss_fn(model, lang, batch, step):
        if flags_now[lang]:
            res = selective_total_loss(batch, model, teachers[lang], plan.lam, plan.temperature)
        else:
            res = nll_total_loss(batch, model)
        if loss_log is not None:
            loss_log.append({"step": step, "lang": lang, "flag": flags_now[lang], "nll": res.nll, "kd": res.kd})
        return res

    def on_epoch_end(s: TrainState):
        if s.epoch % plan.check_every == 0:
            fs = update_flags(exp, s.model, teacher_acc, dev, plan.threshold,
                              FlagState(dict(s.flags), list(s.flag_history)), s.epoch)
            changed = sorted(l for l in fs.flags if fs.flags[l] != flags_now[l])
            if changed:
                log.info("teacher-assistant %s: flags changed at epoch %d for %s", key, s.epoch, changed)
            flags_now.update(fs.flags)
            s = replace(s, flags=fs.flags, flag_history=fs.history)
        _save_and_maybe_stop(path, stop_after)(s)
        return s

    state = train_loop(exp, state, corpora, exp.epochs.ta, stream, loss_fn, on_epoch_end, f"teacher-assistant {key}")
    if path is not None:
        _write_flag_log(exp.path("logs", f"flags_{key[0]}_{key[1]}.csv"), state.flag_history, key)
    return state


def _write_flag_log(path: Path, history: Sequence[dict], key: TaKey) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "ta", "lang", "flag", "acc_student", "acc_teacher"])
        for h in history:
            w.writerow([h["epoch"], f"{key[0]}:{key[1]}", h["lang"], int(h["flag"]),
                        f"{h['acc_student']:.4f}", f"{h['acc_teacher']:.4f}"])


def _ta_job(args):
    exp, key, teachers, resume = args
    return key, train_teacher_assistant(exp, key, teachers, resume).model


def train_all_teacher_assistants(
    exp: HkdExperiment, teachers: Mapping[str, SequenceModel], resume: bool = True
) -> dict[TaKey, SequenceModel]:
    done = _parallel_map(exp, _ta_job, [(exp, k, teachers, resume) for k in exp.ta_keys()])
    out = dict(done)
    if exp.out_dir is not None:
        merge_flag_logs(exp)
    return out


def merge_flag_logs(exp: HkdExperiment) -> None:
    rows = []
    for t, k in exp.ta_keys():
        p = exp.path("logs", f"flags_{t}_{k}.csv")
        if p.exists():
            with open(p, newline="") as f:
                rows += list(csv.reader(f))[1:]
    out = exp.path("logs", "flags.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "ta", "lang", "flag", "acc_student", "acc_teacher"])
        w.writerows(rows)


# ---------------------------------------------------------------------------
# tier 3: adaptive distillation into the ultimate student
# ---------------------------------------------------------------------------


@dataclass
class AlphaRecord:
    step: int
    lang: str
    ta: TaKey
    alpha: float
    perplexity: float


def train_ultimate_student(
    exp: HkdExperiment,
    teacher_assistants: Mapping[TaKey, SequenceModel],
    resume: bool = True,
    stop_after: int | None = None,
    alpha_log: list[AlphaRecord] | None = None,
    stream: str = "multilingual",
) -> TrainState:
    """Adaptive distillation over all languages.

    For every minibatch of language l the effective teacher-assistants (one per
    clustering type) are scored by negative perplexity on that batch, the
    softmax of those scores weights their KD terms, and lambda2 follows the
    configured annealing schedule over global steps.

    The default ``stream`` equals the baseline's so both start from the same
    initialisation and see the same batches.
    """
    plan = exp.plan
    index = effective_cluster_index(exp.languages, exp.clusterings)
    sim = {}
    for lang in exp.languages:
        keys = [tuple(k) for k in index[lang]]
        if not keys:
            raise ConfigurationError(f"language {lang} has no effective clusters")
        missing = [k for k in keys if k not in teacher_assistants]
        if missing:
            raise ConfigurationError(f"missing teacher-assistants {missing} for language {lang}")
        sim[lang] = keys

    path = exp.path("student.ckpt")
    corpora = stage_corpora(exp, exp.languages, "student")
    total = exp.epochs.student * steps_per_epoch(exp, corpora)
    sched = replace(plan.lam2, total_steps=max(1, total))
    records: list[AlphaRecord] = [] if alpha_log is None else alpha_log
    alpha_path = exp.path("logs", "alpha.csv")
    state = _resume(path, resume)
    if state is None:
        state = fresh_state(exp, stream)
    elif alpha_path is not None and alpha_path.exists():
        records[:] = [r for r in read_alpha_log(alpha_path) if r.step < state.step]

    def loss_fn(model, lang, batch, step):
        keys = sim[lang]
        qs = [teacher_distributions(teacher_assistants[k], batch, plan.temperature) for k in keys]
        ppl = [perplexity_from_dists(q) for q in qs]
        if exp.exclude_worst_ta and len(keys) > 1:
            worst = int(np.argmax(ppl))
            keys, qs, ppl = [k for i, k in enumerate(keys) if i != worst], [q for i, q in enumerate(qs) if i != worst], [p for i, p in enumerate(ppl) if i != worst]
        w = weights_from_perplexities(ppl)
        for k, a, p in zip(keys, w.alpha, ppl):
            records.append(AlphaRecord(step, lang, k, float(a), float(p)))
        return adaptive_total_loss(batch, model, qs, w.alpha, plan.lam1, anneal_lambda2(step, sched))

    def on_epoch_end(s: TrainState):
        if alpha_path is not None:
            write_alpha_log(alpha_path, records)
        _save_and_maybe_stop(path, stop_after)(s)

    return train_loop(exp, state, corpora, exp.epochs.student, stream, loss_fn, on_epoch_end, "student")


def write_alpha_log(path: Path, records: Sequence[AlphaRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lang", "type_id:cluster", "alpha", "perplexity"])
        for r in records:
            w.writerow([r.step, r.lang, f"{r.ta[0]}:{r.ta[1]}", repr(r.alpha), repr(r.perplexity)])


def read_alpha_log(path: Path) -> list[AlphaRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            t, k = row["type_id:cluster"].split(":")
            out.append(AlphaRecord(int(row["step"]), row["lang"], (int(t), int(k)), float(row["alpha"]), float(row["perplexity"])))
    return out


# ---------------------------------------------------------------------------
# evaluation and the full pipeline
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    records: list[dict]
    tiers: dict[str, str]
    families: dict[str, str]
    ta_dev_bleu: dict[str, dict[str, float]]
    ta_variance: dict[str, float]
    alpha_mean: dict[str, dict[str, float]]
    family_means: dict[str, dict[str, float]]
    systems: list[str]

    def scores(self, system: str) -> dict[str, float]:
        return {r["lang"]: r["bleu"] for r in self.records if r["system"] == system}


def ta_system_name(type_id: int) -> str:
    return f"ta_type{type_id}"


def evaluate_systems(
    exp: HkdExperiment,
    teachers: Mapping[str, SequenceModel],
    baseline: SequenceModel | None,
    tas: Mapping[TaKey, SequenceModel],
    student: SequenceModel | None,
    alpha_records: Sequence[AlphaRecord] = (),
) -> TrainReport:
    from .evaluation import ta_variance

    index = effective_cluster_index(exp.languages, exp.clusterings)
    systems = ["individual"] + (["multi"] if baseline is not None else [])
    systems += [ta_system_name(c.type_id) for c in exp.clusterings] + (["hkd"] if student is not None else [])
    records = []
    ta_dev: dict[str, dict[str, float]] = {}
    for lang in exp.languages:
        test = exp.corpora.get(lang, "test", "evaluate")
        dev = exp.corpora.get(lang, "dev", "evaluate")
        tier = exp.tiers.get(lang, "all")
        row = {"individual": corpus_bleu(exp, teachers[lang], test)}
        if baseline is not None:
            row["multi"] = corpus_bleu(exp, baseline, test)
        ta_dev[lang] = {}
        for key in index[lang]:
            key = tuple(key)
            row[ta_system_name(key[0])] = corpus_bleu(exp, tas[key], test)
            ta_dev[lang][f"{key[0]}:{key[1]}"] = corpus_bleu(exp, tas[key], dev)
        if student is not None:
            row["hkd"] = corpus_bleu(exp, student, test)
        for s in systems:
            records.append({"system": s, "lang": lang, "tier": tier, "bleu": row[s]})

    alpha_mean: dict[str, dict[str, float]] = {}
    acc: dict[tuple[str, str], list[float]] = {}
    for r in alpha_records:
        acc.setdefault((r.lang, f"{r.ta[0]}:{r.ta[1]}"), []).append(r.alpha)
    for (lang, ta), vals in sorted(acc.items()):
        alpha_mean.setdefault(lang, {})[ta] = float(np.mean(vals))

    family_means: dict[str, dict[str, float]] = {}
    if exp.families:
        for fam in sorted(set(exp.families.values())):
            members = [l for l in exp.languages if exp.families.get(l) == fam]
            family_means[fam] = {
                s: float(np.mean([r["bleu"] for r in records if r["system"] == s and r["lang"] in members]))
                for s in systems
            }
    variance = ta_variance({l: list(v.values()) for l, v in ta_dev.items()})
    return TrainReport(records, {l: exp.tiers.get(l, "all") for l in exp.languages}, dict(exp.families),
                       ta_dev, variance, alpha_mean, family_means, systems)


def run_hkd_pipeline(exp: HkdExperiment, resume: bool = True, train_baseline: bool = True) -> TrainReport:
    """Teachers, then one teacher-assistant per cluster of every clustering type,
    then the student; finally everything is scored on the test split."""
    stage = "teachers"
    try:
        teachers = train_bilingual_teachers(exp, resume)
        baseline = None
        if train_baseline:
            stage = "baseline"
            baseline = train_multilingual_nll(exp, path=exp.path("baseline.ckpt"), resume=resume).model
        stage = "tas"
        tas = train_all_teacher_assistants(exp, teachers, resume)
        stage = "student"
        alpha: list[AlphaRecord] = []
        student = train_ultimate_student(exp, tas, resume, alpha_log=alpha).model
        stage = "evaluate"
        return evaluate_systems(exp, teachers, baseline, tas, student, alpha)
    except (StopTraining, KeyboardInterrupt):
        raise
    except HkdError as e:
        raise StageError(stage, e) from e
