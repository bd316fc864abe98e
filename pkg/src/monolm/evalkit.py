"""Task metrics and multi-run aggregation: micro/macro F1, word accuracy,
BIO span extraction with conlleval semantics, and results tables.

All values are percentages rounded to two decimals in reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class SpanEntity:
    type: str
    start: int     # inclusive token index
    end: int       # exclusive

    def __post_init__(self):
        if self.start >= self.end:
            raise EvalError(f"span start {self.start} not before end {self.end}")


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    seed: int | None = None
    per_class: dict[str, dict[str, float]] | None = None
    std: dict[str, float] | None = None
    n_runs: int = 1
    std_undefined: bool = False


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def micro_macro_f1(
    gold: Sequence[str], predicted: Sequence[str], classes: Iterable[str]
) -> tuple[float, float, dict[str, float]]:
    """Percent micro and macro F1 plus per-class F1.

    Micro pools counts over classes (equals accuracy for single-label
    classification); macro is the unweighted class mean, where a class with
    no gold and no predicted instances contributes 0.
    """
    if not gold:
        raise EvalError("empty input")
    if len(gold) != len(predicted):
        raise EvalError("gold and predicted lengths differ")
    classes = sorted(set(classes))
    known = set(classes)
    for label in list(gold) + list(predicted):
        if label not in known:
            raise EvalError(f"label {label!r} outside the class set")
    per_class: dict[str, float] = {}
    micro_tp = 0
    for cls in classes:
        tp = sum(1 for g, p in zip(gold, predicted) if g == p == cls)
        fp = sum(1 for g, p in zip(gold, predicted) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, predicted) if g == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_class[cls] = 100.0 * _f1(precision, recall)
        micro_tp += tp
    micro = 100.0 * micro_tp / len(gold)
    macro = sum(per_class.values()) / len(classes)
    return micro, macro, per_class


def word_accuracy(
    gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]]
) -> float:
    """Correct tokens over total tokens, pooled across sentences, percent."""
    if len(gold) != len(predicted):
        raise EvalError("sentence counts differ")
    correct = total = 0
    for i, (g, p) in enumerate(zip(gold, predicted)):
        if len(g) != len(p):
            raise EvalError(f"sentence {i}: length mismatch {len(g)} vs {len(p)}")
        correct += sum(1 for a, b in zip(g, p) if a == b)
        total += len(g)
    if total == 0:
        raise EvalError("no tokens to score")
    return 100.0 * correct / total


def bio_spans(tags: Sequence[str]) -> list[SpanEntity]:
    """conlleval-compatible span extraction.

    B-X starts an entity; I-X continues a same-type entity; an I-X after O
    or after a different type starts a new entity (lenient repair).
    """
    spans: list[SpanEntity] = []
    current_type: str | None = None
    current_start = 0
    for i, tag in enumerate(tags):
        if tag == "O":
            prefix, etype = "O", None
        elif len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
            prefix, etype = tag[0], tag[2:]
        else:
            raise EvalError(f"malformed BIO tag {tag!r}")
        starts_new = prefix == "B" or (
            prefix == "I" and etype != current_type
        )
        if current_type is not None and (prefix == "O" or starts_new):
            spans.append(SpanEntity(current_type, current_start, i))
            current_type = None
        if etype is not None and starts_new:
            current_type, current_start = etype, i
    if current_type is not None:
        spans.append(SpanEntity(current_type, current_start, len(tags)))
    return spans


def spans_to_bio(spans: Sequence[SpanEntity], length: int) -> list[str]:
    tags = ["O"] * length
    for span in spans:
        tags[span.start] = f"B-{span.type}"
        for i in range(span.start + 1, span.end):
            tags[i] = f"I-{span.type}"
    return tags


def conll_prf(
    gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]]
) -> tuple[float, float, float]:
    """Entity-level precision/recall/F1 with strict span+type matching."""
    if len(gold) != len(predicted):
        raise EvalError("sentence counts differ")
    n_gold = n_pred = n_correct = 0
    for g, p in zip(gold, predicted):
        gold_spans = set(bio_spans(g))
        pred_spans = set(bio_spans(p))
        n_gold += len(gold_spans)
        n_pred += len(pred_spans)
        n_correct += len(gold_spans & pred_spans)
    precision = 100.0 * n_correct / n_pred if n_pred else 0.0
    recall = 100.0 * n_correct / n_gold if n_gold else 0.0
    return precision, recall, _f1(precision, recall)


def average_runs(reports: Sequence[MetricReport], n: int = 5) -> MetricReport:
    """Arithmetic mean and sample standard deviation over runs.

    A single run reports std 0 with the ``std_undefined`` flag set.
    """
    if len(reports) != n:
        raise EvalError(f"expected {n} reports, got {len(reports)}")
    task = reports[0].task
    names = set(reports[0].metrics)
    for rep in reports[1:]:
        if rep.task != task:
            raise EvalError("reports cover different tasks")
        if set(rep.metrics) != names:
            raise EvalError("reports carry different metric sets")
    means, stds = {}, {}
    for name in sorted(names):
        values = [rep.metrics[name] for rep in reports]
        mean = sum(values) / n
        means[name] = mean
        if n > 1:
            stds[name] = math.sqrt(
                sum((v - mean) ** 2 for v in values) / (n - 1)
            )
        else:
            stds[name] = 0.0
    return MetricReport(
        task=task,
        metrics=means,
        std=stds,
        n_runs=n,
        std_undefined=(n == 1),
    )


def render_results_table(
    aggregates: dict[str, dict[str, MetricReport]],
    metric: str | None = None,
) -> str:
    """Rows grouped by model family, columns by task, best value marked.

    ``aggregates`` maps family -> {system name -> report}; each report may
    cover several tasks via its metric names or one task via its task id.
    """
    families = [
        "Static Embeddings", "Flair Embeddings", "BERT Language Models",
        "Baselines",
    ]
    tasks: list[str] = []
    rows: list[tuple[str, str, dict[str, float]]] = []
    for family in list(aggregates):
        if family not in families:
            families.append(family)
    for family in families:
        for system, report in aggregates.get(family, {}).items():
            cells = {}
            name = metric or next(iter(report.metrics))
            cells[report.task] = report.metrics[name]
            if report.task not in tasks:
                tasks.append(report.task)
            rows.append((family, system, cells))
    best: dict[str, float] = {}
    for _, _, cells in rows:
        for task, value in cells.items():
            best[task] = max(best.get(task, -math.inf), value)

    name_width = max(
        [len(r[1]) for r in rows] + [len(f) for f in families if f in aggregates]
    ) + 2
    col_width = max([len(t) for t in tasks] + [9]) + 2
    lines = [
        " " * name_width + "".join(f"{t:>{col_width}}" for t in tasks)
    ]
    for family in families:
        if family not in aggregates:
            continue
        lines.append(family)
        for system, report in aggregates[family].items():
            _, _, cells = next(
                r for r in rows if r[0] == family and r[1] == system
            )
            cols = []
            for task in tasks:
                if task not in cells:
                    cols.append(f"{'—':>{col_width}}")
                    continue
                text = f"{cells[task]:.2f}"
                if cells[task] == best[task]:
                    text += "*"
                cols.append(f"{text:>{col_width}}")
            lines.append(f"{system:<{name_width}}" + "".join(cols))
    lines.append("* best in column")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Prediction-file formats


def read_conll_predictions(
    stream: IO[str],
) -> tuple[list[list[str]], list[list[str]], list[list[str]]]:
    """Three-column (token, gold, predicted), blank-line sentence breaks."""
    tokens, gold, pred = [], [], []
    cur_t, cur_g, cur_p = [], [], []
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            if cur_t:
                tokens.append(cur_t)
                gold.append(cur_g)
                pred.append(cur_p)
                cur_t, cur_g, cur_p = [], [], []
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise EvalError(f"line {lineno}: expected 3 columns, got {len(parts)}")
        cur_t.append(parts[0])
        cur_g.append(parts[1])
        cur_p.append(parts[2])
    if cur_t:
        tokens.append(cur_t)
        gold.append(cur_g)
        pred.append(cur_p)
    return tokens, gold, pred


def read_classification_predictions(
    stream: IO[str],
) -> tuple[list[str], list[str]]:
    """Two-column (gold, predicted) per line."""
    gold, pred = [], []
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise EvalError(f"line {lineno}: expected 2 columns, got {len(parts)}")
        gold.append(parts[0])
        pred.append(parts[1])
    return gold, pred


def write_report(report: MetricReport, out: IO[str]) -> None:
    rec = {
        "task": report.task,
        "metrics": {k: round(v, 2) for k, v in report.metrics.items()},
        "n_runs": report.n_runs,
    }
    if report.seed is not None:
        rec["seed"] = report.seed
    if report.std is not None:
        rec["std"] = {k: round(v, 2) for k, v in report.std.items()}
    if report.per_class:
        rec["per_class"] = report.per_class
    out.write(json.dumps(rec, sort_keys=True) + "\n")


def read_reports(stream: IO[str]) -> list[MetricReport]:
    reports = []
    for line in stream:
        if not line.strip():
            continue
        rec = json.loads(line)
        reports.append(
            MetricReport(
                task=rec["task"],
                metrics=rec["metrics"],
                seed=rec.get("seed"),
                std=rec.get("std"),
                per_class=rec.get("per_class"),
                n_runs=rec.get("n_runs", 1),
            )
        )
    return reports
