"""File-driven pipeline runner.

Every stage reads its inputs from files written by earlier stages under
``output_dir`` and writes its own artifacts with a provenance header
(config hash and seeds), so stages can be re-run independently.

    python -m akipred <subcommand> --config pipeline.json [--max-encounters N]

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

from .attribution import aggregate, attribute_population, top_k, write_step_attributions
from .ehr import DEFAULT_RATIOS, CohortSplit, EventStore, Partition, apply_exclusions, ingest_events, split_cohort
from .evalkit import MetricReport, evaluate_rows, youden_threshold
from .features import FeatureConfig, FeatureSchema, RuleSets, featurize_encounter, fit_schema_for, load_raw, save_raw
from .model import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint
from .phenotype import build_stage_timeline, label_windows, read_labels, transition_table, write_labels
from .pipeline import CROSS_SITE_ORDER, calibrate, calibration_tables, fit_model, scored, tensorize, Partitions
from .synth import DEFAULT_PROFILES, SiteProfile, generate_site, validate_marginals

log = logging.getLogger("akipred")

SUBCOMMANDS = ("synth", "label", "featurize", "train", "calibrate", "evaluate", "attribute", "report")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class EvalOptions:
    n_boot: int = 500
    seed: int = 0
    unit: str = "encounter"
    subgroups: bool = True
    ig_steps: int = 50
    attribution_windows: int = 2000
    top_k: int = 20
    aggregation: str = "mean_steps"


@dataclass
class PipelineConfig:
    output_dir: Path
    sites: list[str]
    train_sites: list[str]
    events: dict[str, Path]
    encounters: dict[str, Path]
    rule_paths: dict[str, Path | None]
    synth_seed: int = 1
    n_encounters: int = 5000
    profiles: dict[str, dict] = field(default_factory=dict)
    split_ratios: tuple[float, ...] = DEFAULT_RATIOS
    split_seed: int = 1
    features: FeatureConfig = FeatureConfig()
    train: TrainConfig = TrainConfig()
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    explicit_inputs: frozenset = frozenset()
    digest: str = ""
    max_encounters: int | None = None

    @property
    def pool(self) -> str:
        return "".join(self.train_sites)

    def header(self) -> str:
        cap = "" if self.max_encounters is None else f" max_encounters={self.max_encounters}"
        return (f"config_hash={self.digest} synth_seed={self.synth_seed} split_seed={self.split_seed} "
                f"train_seed={self.train.seed} eval_seed={self.evaluation.seed}{cap}")

    def rules(self) -> RuleSets:
        return RuleSets.from_paths(**{k: v for k, v in self.rule_paths.items()})

    def profile(self, site: str) -> SiteProfile:
        make = DEFAULT_PROFILES.get(site)
        overrides = dict(self.profiles.get(site, {}))
        base = make() if make else SiteProfile(name=site)
        n = overrides.pop("n_encounters", self.n_encounters)
        if self.max_encounters is not None:
            n = min(n, self.max_encounters)
        return SiteProfile.from_mapping({**overrides, "name": site, "n_encounters": n,
                                         "seed": overrides.get("seed", self.synth_seed)}, base)

    def d(self, *parts: str) -> Path:
        p = self.output_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


RULE_KEYS = ("nephrotoxins", "comorbidity", "charlson", "medication_classes")


def _section(doc: Mapping, key: str) -> dict:
    v = doc.get(key, {})
    if not isinstance(v, Mapping):
        raise ConfigError(f"{key}: expected an object")
    return dict(v)


def _dataclass_from(cls, values: Mapping, key: str):
    known = {f.name for f in fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"{key}.{k}: unknown option")
    try:
        obj = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return obj


def load_config(path: str | Path, max_encounters: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    if not isinstance(doc, Mapping):
        raise ConfigError("config: top level must be an object")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else (base / p)

    if "output_dir" not in doc:
        raise ConfigError("output_dir: required")
    out = resolve(doc["output_dir"])
    sites = list(doc.get("sites", ["A", "B"]))
    if not sites or len(set(sites)) != len(sites):
        raise ConfigError("sites: need one or more distinct site names")
    train_sites = sorted(doc.get("train_sites", sites[:1]))
    for s in train_sites:
        if s not in sites:
            raise ConfigError(f"train_sites: {s!r} is not one of sites")

    paths = _section(doc, "paths")
    explicit = set()
    events, encounters = {}, {}
    for kind, target in (("events", events), ("encounters", encounters)):
        given = paths.get(kind, {})
        if not isinstance(given, Mapping):
            raise ConfigError(f"paths.{kind}: expected an object keyed by site")
        for s in sites:
            if s in given:
                target[s] = resolve(given[s])
                explicit.add(f"paths.{kind}.{s}")
            else:
                target[s] = out / "synth" / f"{kind}_{s}.tsv"
    rule_paths = {}
    for k in RULE_KEYS:
        v = paths.get(k)
        rule_paths[k] = None if v is None else resolve(v)
        if v is not None and not rule_paths[k].is_file():
            raise ConfigError(f"paths.{k}: file not found: {rule_paths[k]}")
    for k in paths:
        if k not in ("events", "encounters") + RULE_KEYS:
            raise ConfigError(f"paths.{k}: unknown path key")
    for key in sorted(explicit):
        _, kind, s = key.split(".")
        p = (events if kind == "events" else encounters)[s]
        if not p.is_file():
            raise ConfigError(f"{key}: file not found: {p}")

    synth = _section(doc, "synth")
    split = _section(doc, "split")
    features = _dataclass_from(FeatureConfig, _section(doc, "features"), "features")
    try:
        train = TrainConfig.from_mapping(_section(doc, "train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    evaluation = _dataclass_from(EvalOptions, _section(doc, "evaluation"), "evaluation")
    if evaluation.aggregation not in ("mean_steps", "last_step"):
        raise ConfigError("evaluation.aggregation: must be mean_steps or last_step")
    if evaluation.unit not in ("encounter", "patient"):
        raise ConfigError("evaluation.unit: must be encounter or patient")
    ratios = tuple(float(r) for r in split.get("ratios", DEFAULT_RATIOS))
    if len(ratios) != 4 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError("split.ratios: need four nonnegative ratios summing to 1")
    profiles = synth.get("profiles", {})
    for s, ov in profiles.items():
        if s not in sites:
            raise ConfigError(f"synth.profiles.{s}: not one of sites")
        try:
            SiteProfile.from_mapping(ov, DEFAULT_PROFILES.get(s, SiteProfile)())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth.profiles.{s}: {exc}") from None
    if max_encounters is not None and max_encounters < 1:
        raise ConfigError("--max-encounters: must be positive")

    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return PipelineConfig(
        output_dir=out, sites=sites, train_sites=train_sites, events=events, encounters=encounters,
        rule_paths=rule_paths, synth_seed=int(synth.get("seed", 1)),
        n_encounters=int(synth.get("n_encounters", 5000)), profiles=dict(profiles),
        split_ratios=ratios, split_seed=int(split.get("seed", 1)), features=features, train=train,
        evaluation=evaluation, explicit_inputs=frozenset(explicit),
        digest=hashlib.sha256(canonical.encode()).hexdigest()[:16], max_encounters=max_encounters)


# -- stages --------------------------------------------------------------------------------------

def _require(cfg: PipelineConfig, path: Path, key: str, hint: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{key}: file not found: {path} ({hint})")
    return path


def _load_store(cfg: PipelineConfig, site: str) -> EventStore:
    ev = _require(cfg, cfg.events[site], f"paths.events.{site}", "run synth or set the path")
    enc = _require(cfg, cfg.encounters[site], f"paths.encounters.{site}", "run synth or set the path")
    store = ingest_events(ev, enc, site=site)
    if cfg.max_encounters is not None and len(store) > cfg.max_encounters:
        store = store.subset(store.encounter_ids()[:cfg.max_encounters])
    return store


def stage_synth(cfg: PipelineConfig, args) -> None:
    """Generate synthetic event and encounter files per site, with ground truth and marginal checks."""
    rules = cfg.rules()
    for s in cfg.sites:
        prof = cfg.profile(s)
        site = generate_site(prof, registry=rules.nephrotoxins)
        site.write(cfg.output_dir / "synth", cfg.header())
        cfg.d("synth", f"profile_{s}.json").write_text(
            json.dumps(prof.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        cfg.d("synth", f"marginals_{s}.tsv").write_text(
            f"# {cfg.header()}\n" + validate_marginals(site).format(), encoding="utf-8")
        log.info("event=synth site=%s encounters=%d", s, len(site.store))


def stage_label(cfg: PipelineConfig, args) -> None:
    """Apply exclusions, build stage timelines, and write window labels and transition tables."""
    for s in cfg.sites:
        store = _load_store(cfg, s)
        kept, report = apply_exclusions(store, day_offset_hours=cfg.features.day_offset_hours)
        report.write(cfg.d("label", f"exclusions_{s}.tsv"), cfg.header())
        stages, labels = [], []
        for tl in kept.timelines():
            st = build_stage_timeline(tl, day_offset_hours=cfg.features.day_offset_hours)
            stages.append(st)
            labels += label_windows(st)
        write_labels(labels, cfg.d("label", f"labels_{s}.tsv"), cfg.header())
        with open(cfg.d("label", f"stages_{s}.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {cfg.header()}\nencounter_id\ttime\tstage\tscr\n")
            for st in stages:
                for b in st.breakpoints:
                    fh.write(f"{st.encounter_id}\t{b.time}\t{int(b.stage)}\t{'' if b.scr is None else repr(b.scr)}\n")
        transition_table(stages).write(cfg.d("label", f"transitions_{s}.tsv"), cfg.header())
        log.info("event=label site=%s included=%d excluded=%d windows=%d", s, report.included,
                 len(report.excluded), len(labels))


def stage_featurize(cfg: PipelineConfig, args) -> None:
    """Derive raw static and dynamic features for every labelled encounter."""
    rules = cfg.rules()
    for s in cfg.sites:
        labels = read_labels(_require(cfg, cfg.output_dir / "label" / f"labels_{s}.tsv",
                                      "label", "run the label stage first"))
        by_enc: dict[str, list] = {}
        for w in labels:
            by_enc.setdefault(w.encounter_id, []).append(w)
        store = _load_store(cfg, s).subset(sorted(by_enc))
        split = split_cohort(store, cfg.split_ratios, cfg.split_seed)
        split.write(cfg.d("features", f"split_{s}.tsv"), cfg.header())
        raws = []
        for tl in store.timelines():
            part = split.assignment[tl.encounter.patient_id].value
            raws.append(featurize_encounter(tl, by_enc[tl.encounter_id], cfg.features, rules, site=s,
                                            partition=part))
        save_raw(raws, cfg.d("features", f"raw_{s}.npz"), cfg.header())
        log.info("event=featurize site=%s encounters=%d", s, len(raws))
    _schema(cfg, cfg.train_sites, refit=True)


def _raws(cfg: PipelineConfig, site: str):
    return load_raw(_require(cfg, cfg.output_dir / "features" / f"raw_{site}.npz", "featurize",
                             "run the featurize stage first"))


def _schema(cfg: PipelineConfig, members: Sequence[str], refit: bool = False) -> FeatureSchema:
    path = cfg.output_dir / "features" / f"schema_{''.join(members)}.json"
    if path.is_file() and not refit:
        return FeatureSchema.load(path)
    dev = [r for s in members for r in _raws(cfg, s) if r.partition == Partition.DEVELOPMENT.value]
    schema = fit_schema_for(dev, cfg.features, cfg.rules())
    schema.save(cfg.d("features", path.name), {"config_hash": cfg.digest, "split_seed": cfg.split_seed,
                                               "train_sites": list(members)})
    return schema


def _partitions(cfg: PipelineConfig, members: Sequence[str]) -> Partitions:
    schema = _schema(cfg, members)
    raws = {s: _raws(cfg, s) for s in cfg.sites}

    def part(names, p):
        return tensorize([r for s in names for r in raws[s] if r.partition == p.value], schema)

    parts = Partitions(schema, part(members, Partition.DEVELOPMENT), part(members, Partition.VALIDATION),
                       part(members, Partition.CALIBRATION))
    for s in cfg.sites:
        parts.test[s] = part([s], Partition.TEST)
    return parts


def _ckpt_path(cfg: PipelineConfig, pool: str, kind: str, calibrated: bool) -> Path:
    return cfg.output_dir / "models" / f"{kind}_{pool}{'.calibrated' if calibrated else ''}.ckpt"


def _train_pool(cfg: PipelineConfig, members: Sequence[str], kind: str) -> Checkpoint:
    parts = _partitions(cfg, members)
    ckpt = fit_model(parts, cfg.train, baseline=kind == "logistic", with_calibration=False)
    ckpt.metadata.update({"config_hash": cfg.digest, "train_sites": list(members), "synth_seed": cfg.synth_seed,
                          "split_seed": cfg.split_seed, "train_seed": cfg.train.seed})
    save_checkpoint(ckpt, cfg.d("models", _ckpt_path(cfg, "".join(members), kind, False).name))
    log.info("event=train pool=%s kind=%s epochs=%s", "".join(members), kind, ckpt.metadata.get("epochs_run"))
    return ckpt


def _calibrate_pool(cfg: PipelineConfig, members: Sequence[str], kind: str) -> Checkpoint:
    pool = "".join(members)
    raw_path = _ckpt_path(cfg, pool, kind, False)
    ckpt = load_checkpoint(raw_path) if raw_path.is_file() else _train_pool(cfg, members, kind)
    parts = _partitions(cfg, members)
    if not parts.cal:
        raise RuntimeError(f"calibration partition of {pool} is empty")
    calibrate(ckpt, parts.cal)
    save_checkpoint(ckpt, cfg.d("models", _ckpt_path(cfg, pool, kind, True).name))
    lines = [f"# {cfg.header()}", "population\tece_raw\tece_calibrated"]
    for label, tensors in [("calibration", parts.cal)] + [(f"test_{s}", parts.test[s]) for s in cfg.sites]:
        rows = scored(ckpt, tensors, calibrated=False).evaluable()
        if len(rows) == 0:
            continue
        raw, cal = calibration_tables(ckpt, tensors)
        lines.append(f"{label}\t{raw.ece!r}\t{cal.ece!r}")
        cfg.d("calibration", f"reliability_{kind}_{pool}_{label}.tsv").write_text(
            f"# {cfg.header()}\n# raw\n{raw.format()}# calibrated\n{cal.format()}", encoding="utf-8")
    cfg.d("calibration", f"ece_{kind}_{pool}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("event=calibrate pool=%s kind=%s", pool, kind)
    return ckpt


def _model(cfg: PipelineConfig, members: Sequence[str], kind: str) -> Checkpoint:
    path = _ckpt_path(cfg, "".join(members), kind, True)
    return load_checkpoint(path) if path.is_file() else _calibrate_pool(cfg, members, kind)


def _pools(cfg: PipelineConfig, cross_site: bool) -> list[list[str]]:
    if not cross_site:
        return [cfg.train_sites]
    if len(cfg.sites) != 2:
        raise ConfigError("sites: cross-site evaluation needs exactly two sites")
    a, b = sorted(cfg.sites)
    return [[a], [b], [a, b]]


def _kind(args) -> str:
    return "logistic" if getattr(args, "baseline", None) == "logistic" else "gru"


def stage_train(cfg: PipelineConfig, args) -> None:
    """Fit the GRU (or logistic baseline) on the development partition of the training pool."""
    for members in _pools(cfg, args.cross_site):
        _train_pool(cfg, members, _kind(args))


def stage_calibrate(cfg: PipelineConfig, args) -> None:
    """Fit the isotonic calibrator on the calibration partition."""
    for members in _pools(cfg, args.cross_site):
        _calibrate_pool(cfg, members, _kind(args))


def _report(cfg: PipelineConfig, members: Sequence[str], kind: str, test_site: str,
            parts: Partitions, ckpt: Checkpoint) -> MetricReport:
    ev = cfg.evaluation
    v = scored(ckpt, parts.val).evaluable()
    threshold = youden_threshold(v.score, v.label) if len(v) else None
    prefix = "" if kind == "gru" else "logistic_"
    name = f"{prefix}train_{''.join(members)}_test_{test_site}"
    rep = evaluate_rows(scored(ckpt, parts.test[test_site]), threshold, name, ev.n_boot, ev.seed, ev.unit,
                        ev.subgroups)
    rep.write(cfg.output_dir / "reports", cfg.header())
    log.info("event=evaluate report=%s auroc=%s auprc=%s", name, rep.metrics["auroc"].point,
             rep.metrics["auprc"].point)
    return rep


def stage_evaluate(cfg: PipelineConfig, args) -> None:
    """Score each test site and write metric reports with bootstrap intervals."""
    kind = _kind(args)
    reports = {}
    for members in _pools(cfg, args.cross_site):
        ckpt = _model(cfg, members, kind)
        parts = _partitions(cfg, members)
        for s in cfg.sites:
            reports[("".join(members), s)] = _report(cfg, members, kind, s, parts, ckpt)
    if args.cross_site:
        a, b = sorted(cfg.sites)
        alias = {"A": a, "B": b, "AB": a + b}
        lines = [f"# {cfg.header()}", "train\ttest\tauroc\tauprc"]
        for tr, te in CROSS_SITE_ORDER:
            m = reports[(alias[tr], alias[te])].metrics
            lines.append(f"{alias[tr]}\t{alias[te]}\t{m['auroc'].format()}\t{m['auprc'].format()}")
        cfg.d("reports", f"{'' if kind == 'gru' else 'logistic_'}cross_site.tsv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")


def stage_attribute(cfg: PipelineConfig, args) -> None:
    """Rank features by integrated-gradients attribution on the test windows."""
    kind = _kind(args)
    ev = cfg.evaluation
    for members in _pools(cfg, args.cross_site):
        pool = "".join(members)
        ckpt = _model(cfg, members, kind)
        parts = _partitions(cfg, members)
        tensors = [t for s in members for t in parts.test[s]]
        vecs = attribute_population(ckpt, tensors, ev.ig_steps, ev.attribution_windows)
        names = parts.schema.static_names, parts.schema.dynamic_names
        for mode in ("mean_steps", "last_step"):
            ranking = top_k(aggregate(vecs, *names, mode=mode), ev.top_k)
            ranking.write(cfg.d("attribution", f"top{ev.top_k}_{kind}_{pool}_{mode}.tsv"),
                          f"{cfg.header()} windows={len(vecs)} m={ev.ig_steps}")
            if mode == ev.aggregation:
                log.info("event=attribute pool=%s top5=%s", pool, ",".join(ranking.names[:5]))
        if getattr(args, "steps", False):
            write_step_attributions(vecs, names[1], cfg.d("attribution", f"steps_{kind}_{pool}.tsv"),
                                    cfg.header())


def stage_report(cfg: PipelineConfig, args) -> None:
    """Run whatever is missing for the configured pool, then collect every artifact in ``report/``."""
    if not all((cfg.output_dir / "synth" / f"events_{s}.tsv").is_file() or f"paths.events.{s}" in cfg.explicit_inputs
               for s in cfg.sites):
        stage_synth(cfg, args)
    if not all((cfg.output_dir / "label" / f"labels_{s}.tsv").is_file() for s in cfg.sites):
        stage_label(cfg, args)
    if not all((cfg.output_dir / "features" / f"raw_{s}.npz").is_file() for s in cfg.sites):
        stage_featurize(cfg, args)
    pool, kind = cfg.pool, _kind(args)
    if not (cfg.output_dir / "reports" / f"{'' if kind == 'gru' else 'logistic_'}train_{pool}_test_{cfg.sites[0]}.kv").is_file():
        stage_evaluate(cfg, args)
    if not any((cfg.output_dir / "attribution").glob(f"top*_{kind}_{pool}_*.tsv")):
        stage_attribute(cfg, args)
    dest = cfg.output_dir / "report"
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    index = [f"# {cfg.header()}", "artifact\tsha256"]
    for sub in ("synth", "label", "features", "models", "calibration", "reports", "attribution"):
        src = cfg.output_dir / sub
        if not src.is_dir():
            continue
        for f in sorted(src.iterdir()):
            if sub == "synth" and f.suffix in (".tsv", ".jsonl") and f.name.startswith(("events_", "ground_truth_")):
                continue  # bulky raw inputs stay in synth/
            target = dest / sub / f.name
            target.parent.mkdir(exist_ok=True)
            shutil.copyfile(f, target)
            index.append(f"{sub}/{f.name}\t{hashlib.sha256(f.read_bytes()).hexdigest()}")
    (dest / "INDEX.tsv").write_text("\n".join(index) + "\n", encoding="utf-8")
    log.info("event=report dir=%s artifacts=%d", dest, len(index) - 2)


STAGES = {"synth": stage_synth, "label": stage_label, "featurize": stage_featurize, "train": stage_train,
          "calibrate": stage_calibrate, "evaluate": stage_evaluate, "attribute": stage_attribute,
          "report": stage_report}


# -- entry point ---------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="akipred", description="Stage 2+ AKI risk pipeline on EHR event files.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=(STAGES[name].__doc__ or name).split("\n")[0])
        p.add_argument("--config", required=True, help="pipeline JSON config")
        p.add_argument("--max-encounters", type=int, default=None, help="cap encounters per site in every stage")
        p.add_argument("--log-level", default="INFO")
        if name in ("train", "calibrate", "evaluate", "attribute", "report"):
            p.add_argument("--baseline", choices=["logistic"], default=None)
        if name in ("train", "calibrate", "evaluate", "attribute"):
            p.add_argument("--cross-site", action="store_true", help="use the A, B and pooled AB training sets")
        if name == "report":
            p.set_defaults(cross_site=False)
        if name == "attribute":
            p.add_argument("--steps", action="store_true", help="also write unaggregated per-step attributions")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    try:
        cfg = load_config(args.config, args.max_encounters)
        log.info("event=start command=%s %s", args.command, cfg.header())
        STAGES[args.command](cfg, args)
    except ConfigError as exc:
        log.error("event=config_error detail=%s", json.dumps(str(exc)))
        print(f"akipred: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        log.error("event=runtime_error type=%s detail=%s", type(exc).__name__, json.dumps(str(exc)))
        print(f"akipred: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    log.info("event=done command=%s", args.command)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
