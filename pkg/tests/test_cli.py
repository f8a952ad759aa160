import json
import struct
import zlib
from pathlib import Path

import pytest
import yaml

from taxmt.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_STALE,
    STAGES,
    analyze_predictions,
    main,
)
from taxmt.config import ConfigValidationError, ExperimentConfig
from taxmt.corpus import CategoryPath
from taxmt.inference import Prediction, read_predictions_tsv, write_predictions_tsv
from taxmt.reporting import read_tsv
from taxmt.taxonomy import TaxonomyGraph
from taxmt.tensor import load_tensors

TINY = {
    "seed": 3,
    "data": {"source": "synthetic", "synthetic": {"num_classes": 6, "num_products": 90, "depth_range": [2, 3]}},
    "systems": ["knn", "rnn", "transformer", "rnn+transformer"],
    "models": {
        "rnn": {"embed_dim": 8, "rnn_hidden": 8},
        "transformer": {"embed_dim": 8, "ffn_hidden": 16, "layers": 1, "attention_heads": 2},
    },
    "training": {"rnn": {"max_epochs": 2}, "transformer": {"max_epochs": 2}},
    "decode": {"beam_size": 2},
    "evaluation": {"bootstrap_iterations": 30, "crossval_folds": 2, "crossval_systems": ["knn"],
                   "sweep": [[80, 10, 10], [20, 10, 70]], "sweep_systems": ["knn"]},
}


def write_config(tmp_path, out="out", **changes):
    raw = json.loads(json.dumps(TINY))
    raw.update(changes)
    raw["output_dir"] = str(tmp_path / out)
    path = tmp_path / f"{out}.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def run_all(config, *extra):
    return [main([stage, "--config", str(config), *extra]) for stage in STAGES]


def png_text(path):
    """tEXt chunks of a PNG file as a dict."""
    data = Path(path).read_bytes()[8:]
    out = {}
    while data:
        (n,), kind = struct.unpack(">I", data[:4]), data[4:8]
        body = data[8:8 + n]
        assert zlib.crc32(kind + body) == struct.unpack(">I", data[8 + n:12 + n])[0]
        if kind == b"tEXt":
            k, v = body.split(b"\0", 1)
            out[k.decode()] = v.decode()
        data = data[12 + n:]
    return out


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    codes = []
    for out in ("a", "b"):
        codes.append(run_all(write_config(base, out)))
    return base, codes


class TestConfig:
    def test_missing_required_key_is_named(self, tmp_path):
        raw = dict(TINY)
        del raw["systems"]
        with pytest.raises(ConfigValidationError, match="systems"):
            ExperimentConfig.from_dict(raw)
        with pytest.raises(ConfigValidationError, match="data.source"):
            ExperimentConfig.from_dict({**TINY, "data": {}})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigValidationError, match="unknown keys"):
            ExperimentConfig.from_dict({**TINY, "optimiser": "sgd"})
        with pytest.raises(ConfigValidationError, match="models.rnn"):
            ExperimentConfig.from_dict({**TINY, "models": {"rnn": {"hidden": 3}}})

    def test_tsv_path_must_exist(self, tmp_path):
        with pytest.raises(ConfigValidationError, match="does not exist"):
            ExperimentConfig.from_dict({**TINY, "data": {"source": "tsv", "path": "missing.tsv"}}, base_dir=tmp_path)
        (tmp_path / "c.tsv").write_text("red kettle\tHome > Kitchen\n")
        cfg = ExperimentConfig.from_dict({**TINY, "data": {"source": "tsv", "path": "c.tsv"}}, base_dir=tmp_path)
        assert Path(cfg.data["path"]) == tmp_path / "c.tsv"

    def test_ensemble_members_must_be_declared_models(self):
        with pytest.raises(ConfigValidationError, match="ensemble"):
            ExperimentConfig.from_dict({**TINY, "decode": {"ensemble": ["rnn", "lstm"]}})

    @pytest.mark.parametrize("bad", [
        {"systems": ["svm"]},
        {"data": {"source": "synthetic", "split": [0.5, 0.5]}},
        {"evaluation": {"sweep": [[80, 10, 5]]}},
        {"decode": {"mode": "sample"}},
        {"training": {"rnn": {"batch_size": 0}}},
    ])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigValidationError):
            ExperimentConfig.from_dict({**TINY, **bad})

    def test_environment_overrides_only_out_and_seed(self, tmp_path):
        path = write_config(tmp_path)
        cfg = ExperimentConfig.load(path, env={"TAXMT_OUT": "elsewhere", "TAXMT_SEED": "11", "TAXMT_DATA": "x"})
        assert cfg.output_dir == "elsewhere" and cfg.seed == 11
        assert cfg.data == ExperimentConfig.load(path, env={}).data
        with pytest.raises(ConfigValidationError):
            ExperimentConfig.load(path, env={"TAXMT_SEED": "eleven"})

    def test_hash(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path), env={})
        assert cfg.hash() == cfg.replace(output_dir="other").hash()
        assert cfg.hash() != cfg.replace(seed=4).hash()
        assert cfg.hash(("data",)) == cfg.replace(seed=4).hash(("data",))

    def test_seed_derivation(self):
        cfg = ExperimentConfig.from_dict(TINY)
        assert cfg.synthetic_config().seed == 3
        assert (cfg.train_config("rnn").seed, cfg.train_config("transformer").seed) == (3, 4)

    def test_shipped_configs_validate(self):
        for path in sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.yaml")):
            ExperimentConfig.load(path, env={})


class TestPipeline:
    def test_all_stages_succeed(self, pipeline_runs):
        _, codes = pipeline_runs
        assert codes == [[EXIT_OK] * len(STAGES)] * 2

    def test_reruns_are_byte_identical(self, pipeline_runs):
        base, _ = pipeline_runs
        a = {p.relative_to(base / "a"): p.read_bytes() for p in sorted((base / "a").rglob("*")) if p.is_file()}
        b = {p.relative_to(base / "b"): p.read_bytes() for p in sorted((base / "b").rglob("*")) if p.is_file()}
        assert a.keys() == b.keys()
        assert [k for k in a if a[k] != b[k]] == []

    def test_every_artifact_carries_provenance(self, pipeline_runs):
        base, _ = pipeline_runs
        out = base / "a"
        for path in sorted(out.rglob("*")):
            if not path.is_file():
                continue
            stage = path.relative_to(out).parts[0]
            manifest = json.loads((out / stage / "manifest.json").read_text())
            tag = f"config_hash={manifest['config_hash']} seed={manifest['seed']}"
            if path.suffix == ".json":
                d = json.loads(path.read_text())
                assert (d["config_hash"], d["seed"]) == (manifest["config_hash"], 3), path
            elif path.suffix in (".tsv", ".txt"):
                assert path.read_text().splitlines()[0] == f"# {tag}", path
            elif path.suffix == ".ckpt":
                _, meta = load_tensors(path)
                assert (meta["config_hash"], meta["seed"]) == (manifest["config_hash"], 3)
            elif path.suffix == ".png":
                assert png_text(path)["Description"] == tag
            else:
                pytest.fail(f"unexpected artifact {path}")

    def test_manifests_list_outputs(self, pipeline_runs):
        base, _ = pipeline_runs
        m = json.loads((base / "a" / "predict" / "manifest.json").read_text())
        assert sorted(m["outputs"]) == sorted(["flags.json", "knn.test.tsv", "rnn.test.tsv", "transformer.test.tsv",
                                               "rnn+transformer.test.tsv"])
        assert set(m["upstream"]) == {"prepare", "train"}

    def test_report_has_interval_columns(self, pipeline_runs):
        base, _ = pipeline_runs
        tables = read_tsv(base / "a" / "report" / "report.tsv")
        results = tables["results (weighted, %)"]
        assert results[0] == ["system", "P", "P p5", "P p95", "R", "R p5", "R p95", "F", "F p5", "F p95"]
        assert [r[0] for r in results[1:]] == TINY["systems"]
        for row in results[1:]:
            p, lo, hi = (float(x) for x in row[1:4])
            assert lo <= p <= hi
        sweep = tables["data size (weighted F, %)"]
        assert sweep[0] == ["system", "80-10-10", "20-10-70"]
        report = json.loads((base / "a" / "report" / "report.json").read_text())
        assert set(report) >= {"results", "bootstrap", "crossval", "sweep", "novel_paths", "hyperparameters", "dataset"}

    def test_knn_creates_no_novel_paths(self, pipeline_runs):
        base, _ = pipeline_runs
        paths = json.loads((base / "a" / "analyze-paths" / "paths.json").read_text())["paths"]
        assert paths["knn"]["count_novel"] == 0
        for rep in paths.values():
            assert rep["topological_order_valid"]
            assert rep["count_existing"] + rep["count_novel"] + sum(rep["count_rejected_by_kind"].values()) \
                == rep["total"]

    def test_predictions_round_trip_with_header(self, pipeline_runs):
        base, _ = pipeline_runs
        path = base / "a" / "predict" / "knn.test.tsv"
        assert path.read_text().startswith("# config_hash=")
        preds = read_predictions_tsv(path)
        dataset = json.loads((base / "a" / "prepare" / "dataset.json").read_text())
        assert sorted(p.product_id for p in preds) == dataset["split"]["test"]


class TestExitCodes:
    def test_missing_prerequisite(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["train", "--config", str(config)]) == EXIT_MISSING
        assert main(["prepare", "--config", str(config)]) == EXIT_OK
        assert main(["predict", "--config", str(config)]) == EXIT_MISSING

    def test_stale_inputs_refused_unless_forced(self, tmp_path):
        config = write_config(tmp_path, systems=["knn"])
        assert main(["prepare", "--config", str(config)]) == EXIT_OK
        assert main(["predict", "--config", str(config), "--seed", "9"]) == EXIT_STALE
        assert main(["predict", "--config", str(config), "--seed", "9", "--force"]) == EXIT_OK
        assert main(["predict", "--config", str(config)]) == EXIT_OK
        with open(tmp_path / "out" / "predict" / "knn.test.tsv", "a") as fh:
            fh.write("0\tA\t0\n")
        assert main(["evaluate", "--config", str(config)]) == EXIT_STALE

    def test_seed_and_out_flags(self, tmp_path):
        config = write_config(tmp_path, systems=["knn"])
        assert main(["prepare", "--config", str(config), "--seed", "5", "--out", str(tmp_path / "alt")]) == EXIT_OK
        d = json.loads((tmp_path / "alt" / "prepare" / "dataset.json").read_text())
        assert d["seed"] == 5 and d["split"]["seed"] == 5

    def test_config_errors(self, tmp_path):
        assert main(["prepare", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: 1\ndata: {source: synthetic}\n")
        assert main(["prepare", "--config", str(bad)]) == EXIT_CONFIG
        bad.write_text("seed: [1\n")
        assert main(["prepare", "--config", str(bad)]) == EXIT_CONFIG

    def test_usage_error(self, capsys):
        assert main(["bogus"]) == EXIT_CONFIG
        assert main([]) == EXIT_CONFIG

    def test_malformed_catalog(self, tmp_path):
        (tmp_path / "c.tsv").write_text("red kettle\tHome > Kitchen\nno tab here\n")
        config = write_config(tmp_path, data={"source": "tsv", "path": str(tmp_path / "c.tsv")})
        assert main(["prepare", "--config", str(config)]) == EXIT_DATA

    def test_tsv_catalog_end_to_end(self, tmp_path):
        lines = [f"{c} {c}{chr(97 + i)}\tRoot > {c}" for c in ("kettle", "lamp", "chair") for i in range(12)]
        (tmp_path / "c.tsv").write_text("\n".join(lines) + "\n")
        config = write_config(tmp_path, systems=["knn"], data={"source": "tsv", "path": "c.tsv", "dedup": True})
        for stage in ("prepare", "predict", "evaluate"):
            assert main([stage, "--config", str(config)]) == EXIT_OK
        metrics = json.loads((tmp_path / "out" / "evaluate" / "metrics.json").read_text())["metrics"]
        assert metrics["knn"]["f1"] == 1.0


class TestAnalyzePaths:
    def test_all_existing_prediction_file_has_no_novel_paths(self, tmp_path):
        config = write_config(tmp_path, systems=["knn"])
        assert main(["prepare", "--config", str(config)]) == EXIT_OK
        dataset = json.loads((tmp_path / "out" / "prepare" / "dataset.json").read_text())
        train = set(dataset["split"]["train"])
        gold = [Prediction(pid, CategoryPath.parse(label), 0.0) for pid, _, label in dataset["products"]
                if pid in train]
        write_predictions_tsv(tmp_path / "gold.tsv", gold)
        assert main(["analyze-paths", "--config", str(config), "--predictions", str(tmp_path / "gold.tsv")]) == EXIT_OK
        paths = json.loads((tmp_path / "out" / "analyze-paths" / "paths.json").read_text())["paths"]
        assert paths["gold"]["count_novel"] == 0
        assert paths["gold"]["count_existing"] == len(gold)

    def test_missing_prediction_file(self, tmp_path):
        config = write_config(tmp_path, systems=["knn"])
        main(["prepare", "--config", str(config)])
        assert main(["analyze-paths", "--config", str(config), "--predictions", "nope.tsv"]) == EXIT_MISSING

    def test_analyze_predictions_builds_dag(self):
        g = TaxonomyGraph.from_paths([CategoryPath(("A", "B", "C")), CategoryPath(("D", "C"))])
        preds = [Prediction(0, CategoryPath(("A", "C")), 0.0), Prediction(1, CategoryPath(("C", "A")), 0.0),
                 Prediction(2, CategoryPath(("A", "B", "C")), 0.0)]
        report, dag = analyze_predictions(g, preds)
        assert report["count_novel"] == 1 and report["novel_paths"] == ["A > C"]
        assert report["novel_edges"] == [["A", "C"]]
        assert report["topological_order_valid"]
        assert not dag.is_forest()
