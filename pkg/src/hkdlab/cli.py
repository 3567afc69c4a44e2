"""Command-line entry point.

Every subcommand reads the experiment config, writes a ``resolved_config.toml``
snapshot into the output directory and then runs one stage.  Exit codes: 0 on
success, 1 for usage or validation errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import ConfigError, ExperimentConfig, strip_none, validate_config, validate_mapping, write_snapshot
from .corpus import SyntheticFamilySpec, Vocabulary, build_vocab, encode_raw, generate_synthetic, read_raw_dir
from .errors import HkdError, SpecError
from .evaluation import (
    parse_grid,
    rank_systems,
    read_report_csv,
    render_grid,
    render_ranking,
    write_report_csv,
)
from .langrep import (
    Clustering,
    LanguageVectorSet,
    kmeans,
    learn_language_embeddings,
    random_clustering,
    read_clusterings_csv,
    read_kb_csv,
    svcca_fuse,
    write_clusterings_csv,
)
from .model import ModelDims, SequenceModel
from .seeds import derive_seed
from .trainer import (
    CorpusStore,
    HkdExperiment,
    OptimSettings,
    StageEpochs,
    TaKey,
    TrainReport,
    StageError,
    TrainState,
    evaluate_systems,
    read_alpha_log,
    train_all_teacher_assistants,
    train_bilingual_teachers,
    train_multilingual_nll,
    train_ultimate_student,
)

log = logging.getLogger("hkdlab")

COMMANDS = ("gen-data", "cluster", "train-teachers", "train-baseline", "train-tas", "train-student", "pipeline",
            "evaluate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hkdlab", description="Hierarchical knowledge distillation laboratory")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--output", type=Path, default=None)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--jobs", type=int, default=None)
        s.add_argument("--resume", action="store_true")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------


@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path
    resume: bool

    @property
    def data_dir(self) -> Path:
        if self.cfg.data.source == "synthetic":
            return self.out / "data"
        return Path(self.cfg.data.root)

    def vocab(self) -> Vocabulary:
        p = self.out / "vocab.json"
        if not p.exists():
            raise HkdError(f"{p} is missing; run gen-data first")
        return Vocabulary.load(p)

    def languages_meta(self) -> dict:
        p = self.out / "languages.json"
        return json.loads(p.read_text()) if p.exists() else {"languages": []}

    def experiment(self, clusterings: Sequence[Clustering] = ()) -> HkdExperiment:
        cfg = self.cfg
        vocab = self.vocab()
        meta = self.languages_meta()
        langs = [l["code"] for l in meta["languages"]] or cfg.data.languages or None
        raw = read_raw_dir(self.data_dir, langs)
        langs = list(raw)
        tiers = {l["code"]: ("low" if l["low_resource"] else "high") for l in meta["languages"]}
        tiers.update(cfg.data.tiers)
        families = {l["code"]: l["family"] for l in meta.get("languages", []) if "family" in l}
        families.update(cfg.data.families)
        m, o = cfg.model, cfg.optimizer
        return HkdExperiment(
            languages=langs,
            vocab=vocab,
            corpora=CorpusStore(encode_raw(raw, vocab)),
            clusterings=list(clusterings),
            plan=cfg.plan.to_plan(),
            dims=ModelDims(len(vocab), m.emb, m.hidden),
            epochs=StageEpochs(cfg.epochs.teacher, cfg.epochs.ta, cfg.epochs.student),
            batch_size=cfg.batch_size,
            seed=cfg.seed,
            out_dir=self.out,
            optim=OptimSettings(o.lr, o.beta1, o.beta2, o.eps),
            init_scale=m.init_scale,
            order=cfg.order,
            accuracy=cfg.accuracy,
            upsample=cfg.upsample,
            max_decode_len=cfg.max_decode_len or None,
            exclude_worst_ta=cfg.plan.exclude_worst_ta,
            tiers=tiers,
            families=families,
            jobs=cfg.jobs,
        )

    def clusterings(self) -> list[Clustering]:
        p = self.out / "clusterings.csv"
        if not p.exists():
            raise HkdError(f"{p} is missing; run cluster first")
        return read_clusterings_csv(p)


def _load_model(path: Path) -> SequenceModel:
    if not path.exists():
        raise HkdError(f"{path} is missing; run the stage that produces it first")
    return TrainState.load(path).model


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_gen_data(run: Run) -> None:
    cfg = run.cfg
    run.out.mkdir(parents=True, exist_ok=True)
    if cfg.data.source == "synthetic":
        spec: SyntheticFamilySpec = cfg.data.synthetic.to_spec()
        ds = generate_synthetic(spec, derive_seed(cfg.seed, "data"))
        ds.write(run.data_dir)
        (run.out / "languages.json").write_text(json.dumps(ds.metadata(), indent=1) + "\n")
        ds.vocabulary().save(run.out / "vocab.json")
        log.info("wrote %d synthetic languages to %s", len(ds.languages), run.data_dir)
        return
    raw = read_raw_dir(run.data_dir, cfg.data.languages or None)
    train_text = [[s for pair in by_split["train"] for s in pair] for by_split in raw.values()]
    vocab = build_vocab(train_text, cfg.data.mode).with_tags(list(raw))
    vocab.save(run.out / "vocab.json")
    meta = {"languages": [{"code": l, "low_resource": cfg.data.tiers.get(l) == "low",
                           **({"family": cfg.data.families[l]} if l in cfg.data.families else {})} for l in raw]}
    (run.out / "languages.json").write_text(json.dumps(meta, indent=1) + "\n")
    log.info("built a %d-symbol vocabulary over %d languages", len(vocab), len(raw))


def _probe_model(run: Run, exp: HkdExperiment) -> SequenceModel:
    """The tagged multilingual NLL model whose tag embeddings give the NMT-learned view.

    It is the same model the baseline stage trains, so it is stored as
    ``baseline.ckpt`` and reused there instead of being trained twice.
    """
    path = run.out / "baseline.ckpt"
    return train_multilingual_nll(exp, path=path, resume=run.resume).model


def _kb_view(run: Run, spec_csv: str | None, langs: Sequence[str]) -> LanguageVectorSet:
    path = Path(spec_csv) if spec_csv else run.data_dir / "kb.csv"
    if not path.exists():
        raise SpecError("clustering.kb_csv", f"{path} does not exist")
    return read_kb_csv(path).subset(langs)


def stage_cluster(run: Run) -> list[Clustering]:
    cfg = run.cfg
    if not cfg.clustering:
        raise SpecError("clustering", "at least one clustering type is required")
    exp = run.experiment()
    langs = exp.languages
    out = []
    nmt_view = None
    for c in cfg.clustering:
        seed = derive_seed(cfg.seed, "cluster", c.type_id)
        if c.source == "random":
            out.append(random_clustering(langs, c.n_clusters, seed, c.type_id))
            continue
        views = []
        if c.source in ("kb", "fused"):
            views.append(_kb_view(run, c.kb_csv, langs))
        if c.source in ("nmt", "fused"):
            if nmt_view is None:
                nmt_view = learn_language_embeddings(_probe_model(run, exp), exp.vocab, langs)
            views.append(nmt_view)
        vec = views[0] if len(views) == 1 else svcca_fuse(views[0], views[1], c.keep_fraction)
        out.append(kmeans(vec, c.n_clusters, seed, c.type_id, n_init=c.n_init))
    write_clusterings_csv(run.out / "clusterings.csv", out)
    return out


def stage_teachers(run: Run) -> dict[str, SequenceModel]:
    return train_bilingual_teachers(run.experiment(), resume=run.resume)


def _teachers(exp: HkdExperiment) -> dict[str, SequenceModel]:
    return {l: _load_model(exp.path("teachers", f"{l}.ckpt")) for l in exp.languages}


def stage_tas(run: Run) -> dict[TaKey, SequenceModel]:
    exp = run.experiment(run.clusterings())
    return train_all_teacher_assistants(exp, _teachers(exp), resume=run.resume)


def _tas(exp: HkdExperiment) -> dict[TaKey, SequenceModel]:
    return {k: _load_model(exp.path("tas", f"{k[0]}_{k[1]}.ckpt")) for k in exp.ta_keys()}


def stage_student(run: Run) -> SequenceModel:
    exp = run.experiment(run.clusterings())
    return train_ultimate_student(exp, _tas(exp), resume=run.resume).model


def stage_baseline(run: Run) -> SequenceModel:
    exp = run.experiment()
    return train_multilingual_nll(exp, path=exp.path("baseline.ckpt"), resume=run.resume).model


def stage_evaluate(run: Run) -> TrainReport:
    exp = run.experiment(run.clusterings())
    baseline_path = exp.path("baseline.ckpt")
    baseline = _load_model(baseline_path) if run.cfg.train_baseline or baseline_path.exists() else None
    alpha_path = exp.path("logs", "alpha.csv")
    alpha = read_alpha_log(alpha_path) if alpha_path.exists() else []
    report = evaluate_systems(exp, _teachers(exp), baseline, _tas(exp), _load_model(exp.path("student.ckpt")), alpha)
    write_report_csv(run.out / "report.csv", report.records)
    extras = {
        "systems": report.systems,
        "tiers": report.tiers,
        "families": report.families,
        "ta_dev_bleu": report.ta_dev_bleu,
        "ta_variance": report.ta_variance,
        "alpha_mean": report.alpha_mean,
        "family_means": report.family_means,
    }
    (run.out / "report.json").write_text(json.dumps(extras, indent=1, sort_keys=True) + "\n")
    return report


def render_report(records: Sequence[dict], extras: dict) -> str:
    systems = extras.get("systems") or sorted({r["system"] for r in records})
    langs = list(dict.fromkeys(r["lang"] for r in records))
    parts = ["# Results\n\n## Test BLEU\n\n", render_grid(records, langs, systems)]
    rows: dict[str, dict[str, float]] = {}
    tiers = {}
    for r in records:
        rows.setdefault(r["lang"], {})[r["system"]] = round(r["bleu"], 2)
        tiers[r["lang"]] = r["tier"]
    if len(systems) >= 2:
        parts += ["\n## Share of first and second places\n\n", render_ranking(rank_systems(rows, tiers))]
    fam = extras.get("family_means") or {}
    if fam:
        parts.append("\n## Mean BLEU per family\n\n")
        parts.append("| family | " + " | ".join(systems) + " |\n|" + "---|" * (len(systems) + 1) + "\n")
        for f, means in fam.items():
            parts.append(f"| {f} | " + " | ".join(f"{means[s]:.2f}" for s in systems) + " |\n")
    var = extras.get("ta_variance") or {}
    if var:
        parts.append("\n## Teacher-assistant dev BLEU variance\n\n")
        parts.append("| lang | variance |\n|---|---|\n")
        parts += [f"| {l} | {v:.2f} |\n" for l, v in var.items()]
    alpha = extras.get("alpha_mean") or {}
    if alpha:
        parts.append("\n## Mean contribution weight per teacher-assistant\n\n")
        parts.append("| lang | weights |\n|---|---|\n")
        parts += [f"| {l} | " + ", ".join(f"{k}={v:.3f}" for k, v in a.items()) + " |\n" for l, a in alpha.items()]
    return "".join(parts)


def stage_report(run: Run) -> str:
    csv_path = run.out / "report.csv"
    if not csv_path.exists():
        raise HkdError(f"{csv_path} is missing; run evaluate first")
    records = read_report_csv(csv_path)
    jp = run.out / "report.json"
    extras = json.loads(jp.read_text()) if jp.exists() else {}
    text = render_report(records, extras)
    grid = parse_grid(text)
    for r in records:
        if abs(grid[(r["system"], r["lang"])] - r["bleu"]) > 5e-3:
            raise HkdError(f"report.md disagrees with report.csv for {r['system']}/{r['lang']}")
    (run.out / "report.md").write_text(text)
    return text


def stage_pipeline(run: Run) -> None:
    steps = [("gen-data", stage_gen_data), ("cluster", stage_cluster), ("train-teachers", stage_teachers)]
    if run.cfg.train_baseline:
        # when the cluster stage just trained the baseline as its learned-view probe, reuse it
        probed = any(c.source in ("nmt", "fused") for c in run.cfg.clustering)
        steps.append(("train-baseline", lambda r: stage_baseline(Run(r.cfg, r.out, r.resume or probed))))
    steps += [("train-tas", stage_tas), ("train-student", stage_student), ("evaluate", stage_evaluate),
              ("report", stage_report)]
    for name, fn in steps:
        try:
            fn(run)
        except SpecError:
            raise
        except HkdError as e:
            raise StageError(name, e) from e


STAGES = {
    "gen-data": stage_gen_data,
    "cluster": stage_cluster,
    "train-teachers": stage_teachers,
    "train-baseline": stage_baseline,
    "train-tas": stage_tas,
    "train-student": stage_student,
    "pipeline": stage_pipeline,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def resolve(args) -> ExperimentConfig:
    cfg = validate_config(args.config)
    updates = {}
    if args.output is not None:
        updates["output_dir"] = str(args.output)
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    if updates:
        raw = cfg.model_dump(by_alias=True)
        raw.update(updates)
        cfg = validate_mapping(strip_none(raw))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 1
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return 1
    run = Run(cfg, Path(cfg.output_dir), args.resume)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, run.out / "resolved_config.toml")
        STAGES[args.command](run)
    except SpecError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 1
    except (HkdError, OSError, FloatingPointError) as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
