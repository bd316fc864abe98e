import io
import math

import pytest
from hypothesis import given, settings, strategies as st

from monolm import evalkit as E


# ---------------------------------------------------------------------------
# Classification metrics
#
# Hand-worked fixture: gold (A, A, B, C), predicted (A, B, B, C).
#   A: tp=1 fp=0 fn=1 -> P=1, R=0.5, F1=2/3
#   B: tp=1 fp=1 fn=0 -> P=0.5, R=1, F1=2/3
#   C: tp=1 fp=0 fn=0 -> F1=1
#   micro = 3/4 = 75.00, macro = (2/3 + 2/3 + 1)/3 = 77.78


def test_micro_macro_hand_fixture():
    micro, macro, per_class = E.micro_macro_f1(
        ["A", "A", "B", "C"], ["A", "B", "B", "C"], ["A", "B", "C"]
    )
    assert micro == pytest.approx(75.0)
    assert macro == pytest.approx(77.7778, abs=1e-3)
    assert per_class["A"] == pytest.approx(200 / 3, abs=1e-6)
    assert per_class["B"] == pytest.approx(200 / 3, abs=1e-6)
    assert per_class["C"] == pytest.approx(100.0)


def test_zero_support_class_contributes_zero():
    # Class D never occurs in gold or predicted: macro divides by 4 anyway.
    _, macro, per_class = E.micro_macro_f1(
        ["A", "A", "B", "C"], ["A", "B", "B", "C"], ["A", "B", "C", "D"]
    )
    assert per_class["D"] == 0.0
    assert macro == pytest.approx((200 / 3 + 200 / 3 + 100) / 4, abs=1e-6)


def test_micro_macro_errors():
    with pytest.raises(E.EvalError):
        E.micro_macro_f1([], [], ["A"])
    with pytest.raises(E.EvalError):
        E.micro_macro_f1(["A"], ["A", "B"], ["A", "B"])
    with pytest.raises(E.EvalError):
        E.micro_macro_f1(["A"], ["X"], ["A"])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.sampled_from("ABC"), min_size=1, max_size=30),
    st.randoms(use_true_random=False),
)
def test_micro_equals_accuracy(gold, rng):
    pred = [rng.choice("ABC") for _ in gold]
    micro, _, _ = E.micro_macro_f1(gold, pred, "ABC")
    acc = 100.0 * sum(g == p for g, p in zip(gold, pred)) / len(gold)
    assert micro == pytest.approx(acc)


def test_word_accuracy_pools_tokens():
    gold = [["N", "V"], ["N", "N", "V", "A", "A", "N", "V", "N"]]
    pred = [["N", "N"], ["N", "N", "V", "A", "N", "N", "V", "V"]]
    # 7 of 10 tokens correct, pooled (not a mean of per-sentence rates).
    assert E.word_accuracy(gold, pred) == pytest.approx(70.0)


def test_word_accuracy_errors():
    with pytest.raises(E.EvalError):
        E.word_accuracy([["N"]], [["N"], ["V"]])
    with pytest.raises(E.EvalError, match="sentence 0"):
        E.word_accuracy([["N", "V"]], [["N"]])
    with pytest.raises(E.EvalError):
        E.word_accuracy([], [])


# ---------------------------------------------------------------------------
# BIO spans


def test_bio_spans_basic():
    tags = ["B-PER", "I-PER", "O", "B-LOC", "B-LOC", "I-LOC"]
    assert E.bio_spans(tags) == [
        E.SpanEntity("PER", 0, 2),
        E.SpanEntity("LOC", 3, 4),
        E.SpanEntity("LOC", 4, 6),
    ]


def test_bio_spans_lenient_i_after_o():
    assert E.bio_spans(["O", "I-PER"]) == [E.SpanEntity("PER", 1, 2)]
    assert E.bio_spans(["I-LOC", "I-LOC"]) == [E.SpanEntity("LOC", 0, 2)]


def test_bio_spans_type_change_splits():
    assert E.bio_spans(["B-PER", "I-LOC"]) == [
        E.SpanEntity("PER", 0, 1),
        E.SpanEntity("LOC", 1, 2),
    ]


def test_bio_spans_trailing_entity():
    assert E.bio_spans(["O", "B-ORG", "I-ORG"]) == [E.SpanEntity("ORG", 1, 3)]


def test_bio_spans_all_outside():
    assert E.bio_spans(["O", "O", "O"]) == []
    assert E.bio_spans([]) == []


def test_bio_spans_malformed():
    for bad in ["B", "B_PER", "X-PER", "b-PER", "I-"]:
        with pytest.raises(E.EvalError):
            E.bio_spans(["O", bad])


def test_span_entity_validates():
    with pytest.raises(E.EvalError):
        E.SpanEntity("PER", 3, 3)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.one_of(
            st.just("O"),
            st.tuples(st.sampled_from("BI"), st.sampled_from(["PER", "LOC"])).map(
                lambda t: f"{t[0]}-{t[1]}"
            ),
        ),
        max_size=20,
    )
)
def test_spans_to_bio_roundtrip(tags):
    # spans_to_bio . bio_spans normalizes tags; extracting again is stable.
    spans = E.bio_spans(tags)
    normalized = E.spans_to_bio(spans, len(tags))
    assert E.bio_spans(normalized) == spans


# ---------------------------------------------------------------------------
# Entity P/R/F1
#
# 14-token sentence, two gold multi-token ORG spans plus one gold LOC;
# a system that tags the ORG spans as LOC gets exactly one of three
# entities right in both directions: P = R = F1 = 33.33.

GOLD_14 = [
    "O", "O", "B-LOC", "O", "B-ORG", "I-ORG", "O", "O",
    "B-ORG", "I-ORG", "O", "O", "O", "O",
]
PRED_TYPE_ERRORS = [
    "O", "O", "B-LOC", "O", "B-LOC", "I-LOC", "O", "O",
    "B-LOC", "I-LOC", "O", "O", "O", "O",
]


def test_conll_prf_type_errors_fixture():
    p, r, f = E.conll_prf([GOLD_14], [PRED_TYPE_ERRORS])
    assert p == pytest.approx(100 / 3, abs=1e-6)
    assert r == pytest.approx(100 / 3, abs=1e-6)
    assert f == pytest.approx(100 / 3, abs=1e-6)
    assert round(f, 2) == 33.33


def test_conll_prf_perfect():
    p, r, f = E.conll_prf([GOLD_14], [GOLD_14])
    assert (p, r, f) == (100.0, 100.0, 100.0)


def test_conll_prf_off_by_one_boundary():
    gold = [["B-PER", "I-PER", "O"]]
    pred = [["B-PER", "I-PER", "I-PER"]]
    p, r, f = E.conll_prf(gold, pred)
    assert (p, r, f) == (0.0, 0.0, 0.0)


def test_conll_prf_no_entities():
    p, r, f = E.conll_prf([["O", "O"]], [["O", "O"]])
    assert (p, r, f) == (0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Multi-run aggregation


def reports(values, task="nerc", metric="f1"):
    return [
        E.MetricReport(task=task, metrics={metric: v}, seed=i + 1)
        for i, v in enumerate(values)
    ]


def test_average_runs_mean_and_sample_std():
    agg = E.average_runs(reports([70.0, 72.0, 74.0, 76.0, 78.0]))
    assert agg.metrics["f1"] == pytest.approx(74.0)
    # Sample std with n-1: sqrt(40/4) = sqrt(10)
    assert agg.std["f1"] == pytest.approx(math.sqrt(10), abs=1e-9)
    assert agg.n_runs == 5
    assert not agg.std_undefined


def test_average_runs_single():
    agg = E.average_runs(reports([81.5]), n=1)
    assert agg.metrics["f1"] == pytest.approx(81.5)
    assert agg.std["f1"] == 0.0
    assert agg.std_undefined


def test_average_runs_identical_values_zero_std():
    agg = E.average_runs(reports([66.6] * 5))
    assert agg.std["f1"] == pytest.approx(0.0, abs=1e-12)


def test_average_runs_errors():
    with pytest.raises(E.EvalError):
        E.average_runs(reports([1.0, 2.0]))
    bad = reports([1.0] * 5)
    bad[3] = E.MetricReport(task="other", metrics={"f1": 1.0})
    with pytest.raises(E.EvalError):
        E.average_runs(bad)
    bad2 = reports([1.0] * 5)
    bad2[2] = E.MetricReport(task="nerc", metrics={"acc": 1.0})
    with pytest.raises(E.EvalError):
        E.average_runs(bad2)


# ---------------------------------------------------------------------------
# Results table


def test_render_results_table():
    agg = {
        "Flair Embeddings": {
            "char-lm": E.MetricReport(task="nerc", metrics={"f1": 68.42}),
        },
        "BERT Language Models": {
            "multilingual": E.MetricReport(task="nerc", metrics={"f1": 68.42}),
            "monolingual": E.MetricReport(task="nerc", metrics={"f1": 76.77}),
        },
    }
    table = E.render_results_table(agg, metric="f1")
    lines = table.splitlines()
    assert "Flair Embeddings" in lines
    assert "BERT Language Models" in lines
    # Flair row appears before the BERT family rows.
    assert lines.index("Flair Embeddings") < lines.index("BERT Language Models")
    assert "76.77*" in table
    assert "68.42*" not in table


def test_render_results_table_missing_cell():
    agg = {
        "Baselines": {
            "a": E.MetricReport(task="t1", metrics={"f1": 50.0}),
            "b": E.MetricReport(task="t2", metrics={"f1": 60.0}),
        },
    }
    table = E.render_results_table(agg, metric="f1")
    assert "—" in table


# ---------------------------------------------------------------------------
# File formats


def test_read_conll_predictions():
    text = (
        "Uda\tO\tO\nEuropan\tB-LOC\tB-ORG\n\n"
        "Kaixo\tO\tO\n"
    )
    tokens, gold, pred = E.read_conll_predictions(io.StringIO(text))
    assert tokens == [["Uda", "Europan"], ["Kaixo"]]
    assert gold == [["O", "B-LOC"], ["O"]]
    assert pred == [["O", "B-ORG"], ["O"]]


def test_read_conll_predictions_bad_columns():
    with pytest.raises(E.EvalError, match="line 2"):
        E.read_conll_predictions(io.StringIO("a\tO\tO\nb\tO\n"))


def test_read_classification_predictions():
    gold, pred = E.read_classification_predictions(
        io.StringIO("sport\tsport\necon\tsport\n\n")
    )
    assert gold == ["sport", "econ"]
    assert pred == ["sport", "sport"]
    with pytest.raises(E.EvalError):
        E.read_classification_predictions(io.StringIO("one-column\n"))


def test_report_roundtrip():
    rep = E.MetricReport(
        task="topic",
        metrics={"micro_f1": 74.153, "macro_f1": 70.0},
        seed=3,
        std={"micro_f1": 0.511, "macro_f1": 0.2},
        n_runs=5,
    )
    buf = io.StringIO()
    E.write_report(rep, buf)
    buf.seek(0)
    back = E.read_reports(buf)
    assert len(back) == 1
    assert back[0].task == "topic"
    assert back[0].metrics["micro_f1"] == 74.15   # rounded on write
    assert back[0].std["micro_f1"] == 0.51
    assert back[0].n_runs == 5
    assert back[0].seed == 3
