"""Accuracy records, seed aggregation and CSV/JSON export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ssgen.errors import ContractError, DataError

COLUMNS = ("experiment", "method", "target_domain", "seed", "accuracy")
CROSS_DOMAIN = "all"


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    method: str
    target_domain: str
    seed: int
    accuracy: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass(frozen=True)
class Aggregate:
    experiment: str
    method: str
    target_domain: str
    mean: float
    std: float  # sample standard deviation; nan with a single seed
    n: int


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    config_hash: str = ""

    def add(self, experiment: str, method: str, target_domain: str, seed: int, accuracy: float) -> None:
        self.rows.append(MetricRow(experiment, method, target_domain, int(seed), float(accuracy)))

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, **match) -> list[MetricRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def aggregates(self) -> list[Aggregate]:
        """Per-domain seed statistics plus a cross-domain row per (experiment, method).

        The cross-domain value for one seed is the mean over that seed's
        domains; its mean and std are then taken across seeds.
        """
        groups: dict[tuple, dict[int, float]] = {}
        for r in self.rows:
            groups.setdefault((r.experiment, r.method, r.target_domain), {})[r.seed] = r.accuracy
        out = [_aggregate(key, list(seeds.values())) for key, seeds in groups.items()]
        per_method: dict[tuple, dict[int, list[float]]] = {}
        for (exp, method, dom), seeds in groups.items():
            if dom == CROSS_DOMAIN:
                continue
            for seed, acc in seeds.items():
                per_method.setdefault((exp, method), {}).setdefault(seed, []).append(acc)
        for (exp, method), seeds in per_method.items():
            if len({len(v) for v in seeds.values()}) != 1 or len(next(iter(seeds.values()))) < 2:
                continue
            out.append(_aggregate((exp, method, CROSS_DOMAIN), [float(np.mean(v)) for v in seeds.values()]))
        return out

    def mean(self, experiment: str, method: str, target_domain: str = CROSS_DOMAIN) -> float:
        for agg in self.aggregates():
            if (agg.experiment, agg.method, agg.target_domain) == (experiment, method, target_domain):
                return agg.mean
        raise KeyError((experiment, method, target_domain))

    def methods(self, experiment: str | None = None) -> list[str]:
        rows = self.rows if experiment is None else self.select(experiment=experiment)
        return list(dict.fromkeys(r.method for r in rows))


def _aggregate(key: tuple, values: list[float]) -> Aggregate:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else math.nan
    return Aggregate(*key, float(arr.mean()), std, len(arr))


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def report_to_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    if report.config_hash:
        buf.write(f"# config_hash={report.config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in report.rows:
        writer.writerow([r.experiment, r.method, r.target_domain, r.seed, _fmt(r.accuracy)])
    for agg in report.aggregates():
        writer.writerow([agg.experiment, agg.method, agg.target_domain, "mean", _fmt(agg.mean)])
        writer.writerow([agg.experiment, agg.method, agg.target_domain, "std", _fmt(agg.std)])
    return buf.getvalue()


def report_to_json(report: MetricsReport) -> str:
    def clean(x):
        return None if isinstance(x, float) and math.isnan(x) else x

    doc = {
        "config_hash": report.config_hash,
        "columns": list(COLUMNS),
        "rows": [asdict(r) for r in report.rows],
        "aggregates": [{k: clean(v) for k, v in asdict(a).items()} for a in report.aggregates()],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def export_report(report: MetricsReport, path, fmt: str | None = None) -> Path:
    """Write ``report`` as CSV or JSON; the format defaults to the file suffix."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "csv":
        text = report_to_csv(report)
    elif fmt == "json":
        text = report_to_json(report)
    else:
        raise ContractError(f"unknown report format {fmt!r}; expected csv or json")
    path.write_text(text)  # OSError propagates as the I/O failure
    return path


def read_report(path) -> MetricsReport:
    """Parse a report written by :func:`export_report`; aggregate rows are recomputed, not read."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        report = MetricsReport(config_hash=doc.get("config_hash", ""))
        for r in doc["rows"]:
            report.add(r["experiment"], r["method"], r["target_domain"], r["seed"], r["accuracy"])
        return report
    report = MetricsReport()
    lines = []
    for line in text.splitlines():
        if line.startswith("# config_hash="):
            report.config_hash = line.split("=", 1)[1]
        elif not line.startswith("#"):
            lines.append(line)
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise DataError(f"{path}: header {reader.fieldnames} is not {list(COLUMNS)}")
    for rec in reader:
        if rec["seed"] in ("mean", "std"):
            continue
        report.add(rec["experiment"], rec["method"], rec["target_domain"], int(rec["seed"]), float(rec["accuracy"]))
    return report
