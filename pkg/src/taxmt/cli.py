"""Command-line experiment runner.

Usage::

    taxmt <subcommand> --config CONFIG.yaml [--seed N] [--out DIR] [--force]

Subcommands and the artifacts they write under ``<out>/<subcommand>/``:

=============  ====================================================================
prepare        dataset.json (products + split), vocabularies, taxonomy edges
train          one checkpoint per seq2seq model, history.json, summary.json
predict        ``<system>.test.tsv`` prediction files
evaluate       metrics.json / metrics.tsv (weighted P, R, F)
bootstrap      bootstrap.json / bootstrap.tsv (p5 / p95 per metric)
crossval       crossval.json / crossval.tsv (mean, sample variance)
sweep          sweep.json / sweep.tsv (weighted F per split)
analyze-paths  paths.json / paths.tsv, ``<system>.dag.tsv`` edge lists
report         report.json / report.tsv and PNG figures
=============  ====================================================================

Each stage directory has a ``manifest.json`` with the config hash, the seed
and the sha256 of every output. A stage refuses to read upstream artifacts
made under a different config (exit 4) unless ``--force`` is given.

Exit codes: 0 success, 1 unexpected error, 2 invalid config or usage,
3 missing prerequisite stage, 4 stale upstream artifact, 5 malformed data file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

from .config import ConfigValidationError, ExperimentConfig
from .corpus import (
    CatalogFormatError,
    ConfigurationError,
    DatasetSplit,
    Product,
    Vocabulary,
    encode_products,
    generate_synthetic_catalog,
    load_catalog_tsv,
    make_product,
    stratified_split,
)
from .evaluation import bootstrap_ci, crossval_run, datasize_sweep, weighted_prf
from .inference import Prediction, read_predictions_tsv, write_predictions_tsv
from .models import ModelConfigError, load_model, parameter_count
from .pipeline import SystemFactory, build_predictors, build_vocabularies, fit_model, models_needed
from .reporting import (
    Provenance,
    crossval_table,
    dataset_table,
    hyperparameter_table,
    novel_path_table,
    read_json,
    results_table,
    sha256_file,
    sweep_table,
    write_json,
    write_tsv,
)
from .taxonomy import TaxonomyGraph, apply_novel_paths, classify_path, path_shape_report

logger = logging.getLogger("taxmt")

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_MISSING, EXIT_STALE, EXIT_DATA = range(6)

STAGES = ("prepare", "train", "predict", "evaluate", "bootstrap", "crossval", "sweep", "analyze-paths", "report")

# Config sections each stage depends on; a change outside them leaves the stage valid.
_BASE = ("seed", "data")
STAGE_SECTIONS = {
    "prepare": _BASE,
    "train": _BASE + ("systems", "models", "training"),
    "predict": _BASE + ("systems", "models", "training", "decode"),
    "evaluate": _BASE + ("systems", "models", "training", "decode"),
    "bootstrap": _BASE + ("systems", "models", "training", "decode", "evaluation"),
    "crossval": _BASE + ("models", "training", "decode", "evaluation"),
    "sweep": _BASE + ("models", "training", "decode", "evaluation"),
    "analyze-paths": _BASE + ("systems", "models", "training", "decode"),
    "report": _BASE + ("systems", "models", "training", "decode", "evaluation"),
}


class CLIError(Exception):
    code = EXIT_UNEXPECTED


class MissingPrerequisite(CLIError):
    code = EXIT_MISSING


class StaleArtifact(CLIError):
    code = EXIT_STALE


class DataFormatError(CLIError):
    code = EXIT_DATA


class Run:
    """Paths, provenance and manifest bookkeeping for one output directory."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.force = force

    def stage_hash(self, stage: str) -> str:
        return self.cfg.hash(STAGE_SECTIONS[stage])

    def prov(self, stage: str) -> Provenance:
        return Provenance(self.stage_hash(stage), self.cfg.seed)

    def dir(self, stage: str) -> Path:
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def path(self, stage: str, name: str) -> Path:
        return self.root / stage / name

    def require(self, stage: str, optional: bool = False) -> dict | None:
        """Load an upstream manifest, checking it is present, current and intact."""
        mpath = self.path(stage, "manifest.json")
        if not mpath.is_file():
            if optional:
                return None
            raise MissingPrerequisite(f"run `{stage}` first: {mpath} not found")
        manifest = read_json(mpath)
        problems = []
        if manifest.get("config_hash") != self.stage_hash(stage):
            problems.append(f"{stage} artifacts were built with config hash {manifest.get('config_hash')}, "
                            f"current config gives {self.stage_hash(stage)}")
        for name, digest in manifest.get("outputs", {}).items():
            f = self.path(stage, name)
            if not f.is_file():
                raise MissingPrerequisite(f"{f} is listed in the {stage} manifest but missing")
            if sha256_file(f) != digest:
                problems.append(f"{f} was modified after `{stage}` wrote it")
        if problems:
            if not self.force:
                raise StaleArtifact("; ".join(problems) + " (re-run the stage or pass --force)")
            for p in problems:
                logger.warning("ignoring stale input: %s", p)
        return manifest

    def write_manifest(self, stage: str, outputs: Sequence[str], upstream: Sequence[str] = ()) -> None:
        d = self.dir(stage)
        manifest = {
            "stage": stage,
            **self.prov(stage).to_dict(),
            "outputs": {name: sha256_file(d / name) for name in sorted(outputs)},
            "upstream": {s: self.stage_hash(s) for s in upstream},
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8",
                                         newline="\n")


# -- prepared data --------------------------------------------------------------------

def _write_vocab(path: Path, vocab: Vocabulary, prov: Provenance) -> None:
    path.write_text(f"# {prov.header()}\n" + vocab.to_lines(), encoding="utf-8", newline="\n")


def _read_vocab(path: Path) -> Vocabulary:
    lines = path.read_text(encoding="utf-8").split("\n")
    return Vocabulary([t for t in lines[1:] if t])


class Prepared:
    """The products, split and vocabularies written by ``prepare``."""

    def __init__(self, run: Run):
        run.require("prepare")
        d = read_json(run.path("prepare", "dataset.json"))
        self.products = [make_product(pid, title, label) for pid, title, label in d["products"]]
        self.split = DatasetSplit.from_dict(d["split"])
        by_id = {p.id: p for p in self.products}
        self.train = [by_id[i] for i in self.split.train]
        self.validation = [by_id[i] for i in self.split.validation]
        self.test = [by_id[i] for i in self.split.test]
        self.src_vocab = _read_vocab(run.path("prepare", "src_vocab.txt"))
        self.tgt_vocab = _read_vocab(run.path("prepare", "tgt_vocab.txt"))
        self.graph = TaxonomyGraph.from_paths(p.gold_path for p in self.train)


def _load_products(cfg: ExperimentConfig) -> list[Product]:
    if cfg.data["source"] == "synthetic":
        products, _ = generate_synthetic_catalog(cfg.synthetic_config())
        return products
    try:
        products, _ = load_catalog_tsv(cfg.data["path"], dedup=bool(cfg.data.get("dedup", False)))
    except CatalogFormatError as exc:
        raise DataFormatError(str(exc)) from exc
    return products


def dataset_stats(products: Sequence[Product], split: DatasetSplit) -> dict:
    sizes = Counter(p.label for p in products)
    depths = [p.gold_path.depth for p in products]
    return {
        "products": len(products),
        "leaf_classes": len(sizes),
        "top_level": len({p.gold_path.nodes[0] for p in products}),
        "nodes": len({n for p in products for n in p.gold_path.nodes}),
        "min_depth": min(depths),
        "max_depth": max(depths),
        "train": len(split.train),
        "validation": len(split.validation),
        "test": len(split.test),
        "largest_class": max(sizes.values()),
        "singleton_classes": sum(1 for v in sizes.values() if v == 1),
        "class_sizes": sorted(sizes.values(), reverse=True),
    }


def cmd_prepare(run: Run, args) -> None:
    cfg = run.cfg
    products = _load_products(cfg)
    split = stratified_split(products, cfg.split_ratios(), cfg.seed,
                             bool(cfg.data.get("small_classes_to_train", True)))
    by_id = {p.id: p for p in products}
    train = [by_id[i] for i in split.train]
    src_vocab, tgt_vocab = build_vocabularies(train, int(cfg.data.get("max_src_vocab", 100_000)))
    _, quality = encode_products(train, src_vocab, tgt_vocab)
    prov = run.prov("prepare")
    d = run.dir("prepare")
    write_json(d / "dataset.json", {
        "products": [[p.id, p.raw_title, p.label] for p in products],
        "split": split.to_dict(),
        "stats": dataset_stats(products, split),
        "data_quality": quality,
    }, prov)
    _write_vocab(d / "src_vocab.txt", src_vocab, prov)
    _write_vocab(d / "tgt_vocab.txt", tgt_vocab, prov)
    TaxonomyGraph.from_paths(p.gold_path for p in train).write_edges_tsv(d / "taxonomy.tsv", prov.header())
    run.write_manifest("prepare", ["dataset.json", "src_vocab.txt", "tgt_vocab.txt", "taxonomy.tsv"])


# -- training and prediction -------------------------------------------------------------

def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    data = Prepared(run)
    enc_train, _ = encode_products(data.train, data.src_vocab, data.tgt_vocab)
    enc_val, _ = encode_products(data.validation, data.src_vocab, data.tgt_vocab)
    if not enc_val:
        enc_val = enc_train
    prov = run.prov("train")
    d = run.dir("train")
    outputs, histories, summary = [], {}, {}
    for name in models_needed(cfg.systems):
        tcfg = cfg.train_config(name)
        model, history = fit_model(name, data.src_vocab, data.tgt_vocab, enc_train, enc_val,
                                   cfg.model_overrides()[name], tcfg, cfg.seed)
        model.save(d / f"{name}.ckpt", {**prov.to_dict(), "name": name, "best_epoch": history.best_epoch})
        outputs.append(f"{name}.ckpt")
        histories[name] = history.epochs
        mc = model.cfg
        summary[name] = {
            "architecture": mc.architecture, "parameters": parameter_count(mc), "embed_dim": mc.embed_dim,
            "rnn_hidden": mc.rnn_hidden if name == "rnn" else None,
            "ffn_hidden": mc.ffn_hidden if name != "rnn" else None,
            "layers": mc.layers, "attention_heads": mc.attention_heads if name != "rnn" else None,
            "dropout": mc.dropout, "batch_size": tcfg.batch_size, "learning_rate": tcfg.lr_for(mc.architecture),
            "epochs": len(history.epochs), "best_epoch": history.best_epoch, "stopped_early": history.stopped_early,
        }
    write_json(d / "history.json", {"histories": histories}, prov)
    write_json(d / "summary.json", {"models": summary}, prov)
    run.write_manifest("train", outputs + ["history.json", "summary.json"], upstream=["prepare"])


def _load_models(run: Run, systems: Sequence[str]) -> dict:
    needed = models_needed(systems)
    if not needed:
        return {}
    run.require("train")
    models = {}
    for name in needed:
        path = run.path("train", f"{name}.ckpt")
        if not path.is_file():
            raise MissingPrerequisite(f"checkpoint {path} not found; run `train` first")
        model, meta = load_model(path)
        if meta.get("config_hash") != run.stage_hash("train") and not run.force:
            raise StaleArtifact(f"{path} was trained under config hash {meta.get('config_hash')}")
        models[name] = model
    return models


def prediction_file(system: str, split: str = "test") -> str:
    return f"{system}.{split}.tsv"


def cmd_predict(run: Run, args) -> None:
    cfg = run.cfg
    data = Prepared(run)
    models = _load_models(run, cfg.systems)
    predictors = build_predictors(cfg.systems, models, data.src_vocab, data.tgt_vocab, data.train,
                                  cfg.decode_config(), cfg.ensemble_members())
    prov = run.prov("predict")
    d = run.dir("predict")
    outputs, flags = [], {}
    for name, predictor in predictors.items():
        preds = predictor.predict(data.test)
        write_predictions_tsv(d / prediction_file(name), preds, prov.header())
        outputs.append(prediction_file(name))
        flags[name] = {k: sum(getattr(p, k) for p in preds) for k in ("truncated", "has_unk", "fallback")}
    write_json(d / "flags.json", {"split": "test", "flags": flags}, prov)
    run.write_manifest("predict", outputs + ["flags.json"], upstream=["prepare", "train"] if models else ["prepare"])


def _aligned(run: Run, data: Prepared, system: str) -> tuple[list[Prediction], list]:
    preds = read_predictions_tsv(run.path("predict", prediction_file(system)))
    gold = {p.id: p.gold_path for p in data.test}
    ids = [p.product_id for p in preds]
    if sorted(ids) != sorted(gold):
        raise DataFormatError(f"{system}: predictions do not cover the test split exactly")
    return preds, [gold[i] for i in ids]


def _predicted_systems(run: Run) -> list[str]:
    run.require("predict")
    return [s for s in run.cfg.systems if run.path("predict", prediction_file(s)).is_file()]


def cmd_evaluate(run: Run, args) -> None:
    data = Prepared(run)
    systems = _predicted_systems(run)
    metrics, per_class = {}, {}
    for name in systems:
        preds, gold = _aligned(run, data, name)
        rep = weighted_prf([p.path for p in preds], gold)
        metrics[name] = rep.to_dict()
        per_class[name] = rep.to_dict(per_class=True)["per_class"]
    prov = run.prov("evaluate")
    d = run.dir("evaluate")
    write_json(d / "metrics.json", {"metrics": metrics, "per_class": per_class}, prov)
    write_tsv(d / "metrics.tsv", results_table(metrics), prov)
    run.write_manifest("evaluate", ["metrics.json", "metrics.tsv"], upstream=["prepare", "predict"])


def cmd_bootstrap(run: Run, args) -> None:
    cfg = run.cfg
    data = Prepared(run)
    out = {}
    for name in _predicted_systems(run):
        preds, gold = _aligned(run, data, name)
        out[name] = bootstrap_ci([p.path for p in preds], gold, cfg.bootstrap_iterations, cfg.seed).to_dict()
    prov = run.prov("bootstrap")
    d = run.dir("bootstrap")
    write_json(d / "bootstrap.json", {"bootstrap": out}, prov)
    write_tsv(d / "bootstrap.tsv", results_table({n: b["point"] for n, b in out.items()}, out), prov)
    run.write_manifest("bootstrap", ["bootstrap.json", "bootstrap.tsv"], upstream=["prepare", "predict"])


def _factory(cfg: ExperimentConfig, systems: Sequence[str]) -> SystemFactory:
    return SystemFactory(systems, model_overrides=cfg.model_overrides(),
                         train_config={n: cfg.train_config(n) for n in models_needed(systems)},
                         decode=cfg.decode_config(), max_src_vocab=int(cfg.data.get("max_src_vocab", 100_000)))


def cmd_crossval(run: Run, args) -> None:
    cfg = run.cfg
    data = Prepared(run)
    systems = cfg.crossval_systems()
    reports = crossval_run(data.products, _factory(cfg, systems), cfg.crossval_folds, cfg.seed, workers=cfg.workers)
    payload = {name: reports[name].to_dict() for name in systems}
    prov = run.prov("crossval")
    d = run.dir("crossval")
    write_json(d / "crossval.json", {"crossval": payload}, prov)
    write_tsv(d / "crossval.tsv", crossval_table(payload), prov)
    run.write_manifest("crossval", ["crossval.json", "crossval.tsv"], upstream=["prepare"])


def cmd_sweep(run: Run, args) -> None:
    cfg = run.cfg
    data = Prepared(run)
    systems = cfg.sweep_systems()
    table = datasize_sweep(data.products, _factory(cfg, systems), cfg.sweep_splits(), cfg.seed, workers=cfg.workers)
    payload = {"columns": table.columns, "rows": {name: table.rows[name] for name in systems}}
    prov = run.prov("sweep")
    d = run.dir("sweep")
    write_json(d / "sweep.json", {"sweep": payload}, prov)
    write_tsv(d / "sweep.tsv", sweep_table(payload), prov)
    run.write_manifest("sweep", ["sweep.json", "sweep.tsv"], upstream=["prepare"])


def analyze_predictions(graph: TaxonomyGraph, predictions: Sequence[Prediction]) -> tuple[dict, TaxonomyGraph]:
    verdicts = [classify_path(graph, p.path) for p in predictions]
    report = path_shape_report(verdicts, graph)
    dag = apply_novel_paths(graph, verdicts)
    order = dag.topological_order()
    report["novel_paths"] = sorted({v.path.serialize() for v in verdicts if v.kind.value == "NOVEL_ACCEPTED"})
    report["novel_edges"] = [list(e) for e in dag.novel_edges()]
    report["topological_order_valid"] = len(order) == len(dag.nodes)
    return report, dag


def cmd_analyze_paths(run: Run, args) -> None:
    data = Prepared(run)
    if args.predictions:
        path = Path(args.predictions)
        if not path.is_file():
            raise MissingPrerequisite(f"prediction file {path} not found")
        try:
            sources = {path.stem: read_predictions_tsv(path)}
        except ValueError as exc:
            raise DataFormatError(str(exc)) from exc
        upstream = ["prepare"]
    else:
        sources = {s: read_predictions_tsv(run.path("predict", prediction_file(s))) for s in _predicted_systems(run)}
        upstream = ["prepare", "predict"]
    prov = run.prov("analyze-paths")
    d = run.dir("analyze-paths")
    reports, outputs = {}, []
    for name, preds in sources.items():
        reports[name], dag = analyze_predictions(data.graph, preds)
        dag.write_edges_tsv(d / f"{name}.dag.tsv", prov.header())
        outputs.append(f"{name}.dag.tsv")
    write_json(d / "paths.json", {"paths": reports}, prov)
    write_tsv(d / "paths.tsv", novel_path_table(reports), prov)
    run.write_manifest("analyze-paths", outputs + ["paths.json", "paths.tsv"], upstream=upstream)


# -- report ---------------------------------------------------------------------------

def _in_order(d: dict, systems: Sequence[str]) -> dict:
    """JSON round trips sort keys; restore the config's system order."""
    return {s: d[s] for s in systems if s in d} | {k: v for k, v in d.items() if k not in systems}


def cmd_report(run: Run, args) -> None:
    from . import plotting

    run.require("evaluate")
    order = run.cfg.systems
    metrics = _in_order(read_json(run.path("evaluate", "metrics.json"))["metrics"], order)
    d = run.dir("report")
    desc = run.prov("report").header()
    figures = d / "figures"
    figures.mkdir(exist_ok=True)
    payload, tables, outputs, upstream = {"results": metrics}, [], [], ["evaluate"]

    run.require("prepare")
    stats = read_json(run.path("prepare", "dataset.json"))["stats"]
    payload["dataset"] = {k: v for k, v in stats.items() if k != "class_sizes"}
    tables.append(dataset_table(stats))
    plotting.plot_class_distribution(stats["class_sizes"], figures / "class_distribution.png", description=desc)
    outputs.append("figures/class_distribution.png")
    upstream.append("prepare")

    boot = None
    if run.require("bootstrap", optional=True):
        boot = read_json(run.path("bootstrap", "bootstrap.json"))["bootstrap"]
        payload["bootstrap"] = boot
        upstream.append("bootstrap")
    tables.append(results_table({n: {k: m[k] for k in ("precision", "recall", "f1")} for n, m in metrics.items()},
                                boot))
    if run.require("train", optional=True):
        summary = read_json(run.path("train", "summary.json"))["models"]
        if summary:
            payload["hyperparameters"] = summary
            tables.append(hyperparameter_table(summary))
            histories = read_json(run.path("train", "history.json"))["histories"]
            plotting.plot_training_curves(histories, figures / "training_curves.png", desc)
            outputs.append("figures/training_curves.png")
        upstream.append("train")
    if run.require("crossval", optional=True):
        cv = _in_order(read_json(run.path("crossval", "crossval.json"))["crossval"], order)
        payload["crossval"] = {n: {"k": r["k"], "mean": r["mean"], "variance": r["variance"]} for n, r in cv.items()}
        tables.append(crossval_table(cv))
        upstream.append("crossval")
    if run.require("sweep", optional=True):
        sw = read_json(run.path("sweep", "sweep.json"))["sweep"]
        sw["rows"] = _in_order(sw["rows"], order)
        payload["sweep"] = sw
        tables.append(sweep_table(sw))
        plotting.plot_sweep(sw["columns"], sw["rows"], figures / "sweep.png", desc)
        outputs.append("figures/sweep.png")
        upstream.append("sweep")
    if run.require("analyze-paths", optional=True):
        paths = _in_order(read_json(run.path("analyze-paths", "paths.json"))["paths"], order)
        payload["novel_paths"] = {n: {k: v for k, v in r.items() if k not in ("novel_edges",)} for n, r in paths.items()}
        tables.append(novel_path_table(paths))
        upstream.append("analyze-paths")

    prov = run.prov("report")
    write_json(d / "report.json", payload, prov)
    write_tsv(d / "report.tsv", tables, prov)
    run.write_manifest("report", outputs + ["report.json", "report.tsv"], upstream=upstream)


COMMANDS = {
    "prepare": cmd_prepare, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "bootstrap": cmd_bootstrap, "crossval": cmd_crossval, "sweep": cmd_sweep, "analyze-paths": cmd_analyze_paths,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taxmt", description="Product categorization as title-to-path translation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--force", action="store_true", help="accept upstream artifacts from a different config")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=COMMANDS[name].__name__.removeprefix("cmd_"))
        if name == "analyze-paths":
            p.add_argument("--predictions", default=None, help="analyze this prediction TSV instead of `predict` output")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = Run(load_config(args), force=args.force)
        COMMANDS[args.command](run, args)
    except (ConfigValidationError, ConfigurationError, ModelConfigError) as exc:
        print(f"taxmt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CLIError as exc:
        print(f"taxmt: {exc}", file=sys.stderr)
        return exc.code
    except CatalogFormatError as exc:
        print(f"taxmt: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        logger.exception("unexpected failure in %s", args.command)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
