"""Result tables as aligned-column TSV (for people) and sorted-key JSON (for programs).

Every file starts with its provenance: a ``# config_hash=... seed=...`` line in
TSV, top-level ``config_hash`` and ``seed`` keys in JSON.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .evaluation import METRICS

METRIC_HEADERS = {"precision": "P", "recall": "R", "f1": "F"}


@dataclass(frozen=True)
class Provenance:
    config_hash: str
    seed: int

    def header(self) -> str:
        return f"config_hash={self.config_hash} seed={self.seed}"

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed}


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _cell(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.2f}"
    return str(v)


@dataclass(frozen=True)
class Table:
    """A titled grid of cells; numbers are rendered with two decimals."""

    title: str
    columns: list[str]
    rows: list[list[Any]]

    def render(self) -> str:
        cells = [self.columns] + [[_cell(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = ["\t".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": self.columns, "rows": self.rows}


def write_tsv(path: str | Path, tables: Table | Sequence[Table], prov: Provenance) -> None:
    """Blocks of ``# title`` + aligned rows, separated by blank lines."""
    tables = [tables] if isinstance(tables, Table) else list(tables)
    parts = [f"# {prov.header()}\n"]
    for t in tables:
        parts.append(f"\n# {t.title}\n" + t.render())
    Path(path).write_text("".join(parts), encoding="utf-8", newline="\n")


def read_tsv(path: str | Path) -> dict[str, list[list[str]]]:
    """Parse :func:`write_tsv` output back into stripped cells, keyed by title."""
    out: dict[str, list[list[str]]] = {}
    title = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            title = line[2:]
            if not title.startswith("config_hash="):
                out[title] = []
        elif line.strip() and title is not None:
            out[title].append([c.strip() for c in line.split("\t")])
    return out


def write_json(path: str | Path, payload: Mapping[str, Any], prov: Provenance) -> None:
    body = {**prov.to_dict(), **payload}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8",
                          newline="\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _pct(x: float | None) -> float | None:
    return None if x is None else 100.0 * x


# -- table builders ---------------------------------------------------------------------
# Scores are stored in [0, 1] and shown as percentages, as in the usual results tables.

def dataset_table(stats: Mapping[str, Any]) -> Table:
    rows = [[k, stats[k]] for k in ("products", "leaf_classes", "top_level", "nodes", "min_depth", "max_depth",
                                    "train", "validation", "test", "largest_class", "singleton_classes")
            if k in stats]
    return Table("dataset", ["statistic", "value"], rows)


def results_table(metrics: Mapping[str, Mapping[str, float]], bootstrap: Mapping[str, Mapping] | None = None) -> Table:
    """Systems x (P, R, F), each followed by its p5 / p95 bound when bootstrap results exist."""
    cols = ["system"]
    for m in METRICS:
        h = METRIC_HEADERS[m]
        cols += [h] + ([f"{h} p5", f"{h} p95"] if bootstrap else [])
    rows = []
    for name, scores in metrics.items():
        row = [name]
        for m in METRICS:
            row.append(_pct(scores[m]))
            if bootstrap:
                b = bootstrap.get(name)
                row += [_pct(b["p5"][m]) if b else None, _pct(b["p95"][m]) if b else None]
        rows.append(row)
    return Table("results (weighted, %)", cols, rows)


def hyperparameter_table(summary: Mapping[str, Mapping[str, Any]]) -> Table:
    keys = ["architecture", "parameters", "embed_dim", "rnn_hidden", "ffn_hidden", "layers", "attention_heads",
            "dropout", "batch_size", "learning_rate", "epochs", "best_epoch"]

    def fmt(v):
        return f"{v:g}" if isinstance(v, float) else v

    rows = [[name, *(fmt(info.get(k)) for k in keys)] for name, info in summary.items()]
    return Table("hyperparameters", ["model", *keys], rows)


def crossval_table(cv: Mapping[str, Mapping[str, Any]]) -> Table:
    cols = ["system", "k"]
    for m in METRICS:
        cols += [f"{METRIC_HEADERS[m]} mean", f"{METRIC_HEADERS[m]} var"]
    rows = []
    for name, rep in cv.items():
        row = [name, rep["k"]]
        for m in METRICS:
            # variance of a percentage scales by 100^2
            row += [_pct(rep["mean"][m]), rep["variance"][m] * 1e4]
        rows.append(row)
    return Table("cross-validation (weighted, %)", cols, rows)


def sweep_table(sweep: Mapping[str, Any]) -> Table:
    cols = sweep["columns"]
    rows = [[name, *(_pct(cells.get(c)) for c in cols)] for name, cells in sweep["rows"].items()]
    return Table("data size (weighted F, %)", ["system", *cols], rows)


def novel_path_table(paths: Mapping[str, Mapping[str, Any]]) -> Table:
    cols = ["system", "total", "existing", "novel", "novel_distinct", "unknown_node", "cycle", "malformed",
            "top_first", "leaf_last"]
    rows = []
    for name, rep in paths.items():
        rej = rep["count_rejected_by_kind"]
        rows.append([name, rep["total"], rep["count_existing"], rep["count_novel"], rep["count_novel_distinct"],
                     rej["REJECTED_UNKNOWN_NODE"], rej["REJECTED_CYCLE"], rej["REJECTED_MALFORMED"],
                     rep["fraction_top_first"], rep["fraction_leaf_last"]])
    return Table("created full-path categories", cols, rows)
