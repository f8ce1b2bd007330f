import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubsegnet.boxes import Box, Detection, iou
from ubsegnet.evaluation import (
    ALL,
    EvalPair,
    EvaluationError,
    accuracy_curve,
    bin_index,
    collect_ious,
    curves_svg,
    evaluate,
    load_pairs,
    match_boxes,
    pairs_from_images,
    precision_recall,
    slap_filter,
    x_overlap_ratio,
)
from ubsegnet.synthdata import TRAITS, AnnotatedImage, LabeledBox, save_annotations

N_BINS = 100_000


def det(x1, y1, x2, y2, label="finger", score=0.9):
    return Detection(Box(x1, y1, x2, y2), label, score)


def gt(x1, y1, x2, y2, label="finger"):
    return LabeledBox(Box(x1, y1, x2, y2), label)


def direct_accuracy(ious, thresholds):
    v = np.asarray(ious)
    return (v[None, :] >= np.asarray(thresholds)[:, None]).mean(axis=1)


# ---------------------------------------------------------------------------
# match_boxes
# ---------------------------------------------------------------------------


def test_single_pair_matched():
    c = match_boxes([det(0, 0, 10, 10)], [gt(1, 1, 11, 11)])
    assert c.matches == [0]
    assert c.ious[0] == pytest.approx(iou(Box(0, 0, 10, 10), Box(1, 1, 11, 11)))


def test_wrong_class_never_matched():
    c = match_boxes([det(0, 0, 10, 10, label="palm")], [gt(0, 0, 10, 10, label="face")])
    assert c.matches == [None]
    assert c.ious == [0.0]


def test_each_prediction_used_once():
    c = match_boxes([det(0, 0, 10, 10)], [gt(0, 0, 10, 10), gt(1, 0, 11, 10)])
    assert c.matches == [0, None]
    assert c.ious[1] == 0.0


def _exhaustive_best(preds, gts):
    """Injective assignment minimising total center distance."""
    def dist(p, g):
        (px, py), (gx, gy) = p.box.center, g.box.center
        return math.hypot(px - gx, py - gy)

    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(len(preds)), len(gts)):
        cost = sum(dist(preds[pi], gts[gi]) for gi, pi in enumerate(perm))
        if cost < best_cost:
            best, best_cost = list(perm), cost
    return best


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=4, unique=True),
    st.randoms(use_true_random=False),
)
def test_matching_agrees_with_exhaustive_assignment(cells, rnd):
    # gts on a coarse grid, predictions jittered well below half the spacing
    gts = [gt(60 * i, 60 * j, 60 * i + 20, 60 * j + 20) for i, j in cells]
    preds = []
    for g in gts:
        dx, dy = rnd.uniform(-8, 8), rnd.uniform(-8, 8)
        preds.append(det(g.box.x1 + dx, g.box.y1 + dy, g.box.x2 + dx, g.box.y2 + dy))
    order = list(range(len(preds)))
    rnd.shuffle(order)
    preds = [preds[i] for i in order]
    c = match_boxes(preds, gts)
    assert c.matches == _exhaustive_best(preds, gts)


# ---------------------------------------------------------------------------
# slap_filter
# ---------------------------------------------------------------------------


def test_stacked_lower_box_dropped():
    a, b = det(10, 10, 30, 60, score=0.8), det(12, 70, 32, 120, score=0.9)
    assert x_overlap_ratio(a.box, b.box) == pytest.approx(0.9)
    assert slap_filter([a, b], 0.5) == [a]


def test_disjoint_boxes_kept():
    a, b = det(0, 0, 10, 50), det(20, 60, 30, 110)
    assert slap_filter([a, b], 0.5) == [a, b]


def test_small_overlap_kept():
    a, b = det(0, 0, 10, 50), det(7, 60, 17, 110)
    assert x_overlap_ratio(a.box, b.box) == pytest.approx(0.3)
    assert slap_filter([a, b], 0.5) == [a, b]


def test_box_below_a_dropped_box_is_dropped_too():
    # b sits below a, c sits below b but barely overlaps a
    a, b, c = det(0, 0, 20, 40), det(9, 30, 29, 70), det(18, 60, 38, 100)
    assert x_overlap_ratio(a.box, b.box) > 0.5 and x_overlap_ratio(a.box, c.box) < 0.5
    assert x_overlap_ratio(b.box, c.box) > 0.5
    assert slap_filter([a, b, c], 0.5) == [a]


def test_equal_centers_keep_higher_score():
    a, b = det(0, 0, 20, 40, score=0.6), det(2, 0, 22, 40, score=0.7)
    assert slap_filter([a, b], 0.5) == [b]


def test_slap_filter_rejects_bad_threshold():
    with pytest.raises(ValueError):
        slap_filter([], 0.0)


box_st = st.tuples(
    st.floats(0, 200), st.floats(0, 200), st.floats(1, 60), st.floats(1, 60), st.floats(0, 1)
).map(lambda t: det(t[0], t[1], t[0] + t[2], t[1] + t[3], score=t[4]))


@settings(max_examples=200, deadline=None)
@given(st.lists(box_st, max_size=12), st.floats(0.05, 1.0))
def test_slap_filter_leaves_no_stacked_pair(preds, thr):
    out = slap_filter(preds, thr)
    ids = [id(p) for p in preds]
    assert all(id(p) in ids for p in out)
    for a, b in itertools.combinations(out, 2):
        assert x_overlap_ratio(a.box, b.box) <= thr


# ---------------------------------------------------------------------------
# collect_ious
# ---------------------------------------------------------------------------


SLAP_GTS = [gt(10 + 22 * i, 20, 28 + 22 * i, 60) for i in range(4)]


def test_perfect_predictions_give_unit_ious():
    pairs = [
        EvalPair("f", [det(5, 5, 40, 50, "face")], [gt(5, 5, 40, 50, "face")]),
        EvalPair("s", [det(*g.box.as_array(), score=0.9) for g in SLAP_GTS], SLAP_GTS),
    ]
    assert [v for _, v in collect_ious(pairs)] == [1.0] * 5


def test_stacked_slap_duplicate_removed_before_correspondence():
    preds = [det(*g.box.as_array(), score=0.8) for g in SLAP_GTS]
    b = SLAP_GTS[1].box
    # duplicate directly below finger 2, with a higher score and a nearer center
    preds.append(det(b.x1, b.y1 + 12, b.x2, b.y2 + 12, score=0.95))
    pair = EvalPair("s", preds, SLAP_GTS)
    assert len(slap_filter(preds)) == 4
    samples = collect_ious([pair])
    assert len(samples) == 4
    assert [v for _, v in samples] == [1.0] * 4


def test_no_predictions_give_zero_per_gt():
    pairs = [EvalPair("s", [], SLAP_GTS), EvalPair("f", [], [gt(0, 0, 5, 5, "face")])]
    assert collect_ious(pairs) == [("finger", 0.0)] * 4 + [("face", 0.0)]


def test_single_box_trait_uses_top_scoring_prediction_of_its_class():
    g = gt(10, 10, 50, 50, "palm")
    preds = [det(10, 10, 50, 50, "palm", 0.6), det(30, 30, 70, 70, "palm", 0.9), det(10, 10, 50, 50, "face", 0.99)]
    [(trait, v)] = collect_ious([EvalPair("p", preds, [g])])
    assert trait == "palm"
    assert v == pytest.approx(iou(Box(30, 30, 70, 70), g.box))


# ---------------------------------------------------------------------------
# accuracy_curve
# ---------------------------------------------------------------------------


def test_all_maximal_iou():
    c = accuracy_curve([1.0, 1.0, 1.0])
    assert np.all(c.accuracy == 1.0)


def test_two_samples_half_at_midpoint():
    c = accuracy_curve([0.2, 0.6])
    assert c.at(0.5) == 0.5
    assert direct_accuracy([0.2, 0.6], [0.5])[0] == 0.5


def test_accuracy_at_zero_is_one():
    assert accuracy_curve([0.0, 0.0]).at(0.0) == 1.0
    assert accuracy_curve([0.3]).accuracy[0] == 1.0


def test_empty_input_rejected():
    with pytest.raises(EvaluationError):
        accuracy_curve([])


def test_out_of_range_rejected():
    with pytest.raises(EvaluationError):
        accuracy_curve([1.2])


def test_curve_shapes_and_distribution():
    c = accuracy_curve(np.linspace(0, 1, 37))
    assert len(c.counts) == N_BINS + 1
    assert abs(c.pdf.sum() - 1) < 1e-12
    assert np.all(np.diff(c.cdf) >= 0) and c.cdf[-1] == 1.0
    assert np.all(np.diff(c.accuracy) <= 0)


@pytest.mark.parametrize("value", [0.35, 0.5, 0.65, 0.1, 0.7, 0.3, 1 / 3, 0.99999, 1.0, 0.0])
def test_bin_index_is_largest_bin_not_above_value(value):
    k = int(bin_index(value, N_BINS))
    assert k / N_BINS <= value
    assert k == N_BINS or (k + 1) / N_BINS > value


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_curve_matches_direct_counting(ious):
    c = accuracy_curve(ious)
    k = np.arange(N_BINS + 1)
    assert np.max(np.abs(c.accuracy - direct_accuracy(ious, k / N_BINS))) < 1e-9
    assert c.accuracy[0] == 1.0


def test_accuracy_zero_beyond_max():
    c = accuracy_curve([0.4, 0.2])
    assert c.at(0.4 + 2e-5) == 0.0


def test_curve_csv_starts_at_zero_threshold():
    text = accuracy_curve([0.1, 0.9]).to_csv(stride=100)
    lines = text.splitlines()
    assert lines[0] == "threshold,accuracy"
    assert lines[1] == "0.0,1.0"
    assert lines[-1].startswith("1.0,")


# ---------------------------------------------------------------------------
# precision / recall
# ---------------------------------------------------------------------------


def test_precision_recall_substitution():
    # five single-box images; four predicted, three of those accurate
    pairs = []
    for i in range(5):
        g = gt(10, 10, 50, 50, "face")
        if i < 3:
            preds = [det(10, 10, 50, 50, "face")]
        elif i == 3:
            preds = [det(45, 45, 85, 85, "face")]
        else:
            preds = []
        pairs.append(EvalPair(f"i{i}", preds, [g]))
    p, r = precision_recall(pairs, 0.5)[ALL]
    assert (p, r) == (0.75, 0.6)


def test_perfect_detector_precision_recall():
    pairs = [EvalPair("s", [det(*g.box.as_array()) for g in SLAP_GTS], SLAP_GTS)]
    assert precision_recall(pairs, 0.65)[ALL] == (1.0, 1.0)


def test_all_wrong_classes():
    pairs = [EvalPair("a", [det(0, 0, 9, 9, "iris")], [gt(0, 0, 9, 9, "face")])]
    assert precision_recall(pairs, 0.5)[ALL] == (0.0, 0.0)


def test_no_predictions_and_no_gts():
    out = precision_recall([EvalPair("a", [], [])], 0.5)
    assert out[ALL] == (1.0, 1.0)
    out = precision_recall([EvalPair("a", [], [gt(0, 0, 9, 9, "face")])], 0.5)
    assert out[ALL] == (0.0, 0.0)


def test_precision_denominator_switch():
    preds = [det(*g.box.as_array()) for g in SLAP_GTS]
    b = SLAP_GTS[0].box
    preds.append(det(b.x1, b.y2 + 5, b.x2, b.y2 + 45, score=0.5))
    pairs = [EvalPair("s", preds, SLAP_GTS)]
    assert precision_recall(pairs, 0.5)[ALL] == (1.0, 1.0)
    assert precision_recall(pairs, 0.5, filter_slaps=False)[ALL] == (0.8, 1.0)


def _random_pairs(seed, n=12):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        trait = TRAITS[i % 5]
        gts = SLAP_GTS if trait == "finger" else [gt(20, 20, 60, 70, trait)]
        preds = []
        for g in gts:
            if rng.random() < 0.85:
                j = rng.normal(0, 6, 4)
                label = trait if rng.random() < 0.9 else TRAITS[(i + 1) % 5]
                x1, y1, x2, y2 = g.box.as_array() + j
                if x2 > x1 and y2 > y1:
                    preds.append(det(x1, y1, x2, y2, label, float(rng.random())))
        pairs.append(EvalPair(f"img{i}", preds, gts))
    return pairs


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_non_increasing_in_threshold(seed):
    pairs = _random_pairs(seed)
    ts = [0.1, 0.35, 0.5, 0.65, 0.9]
    prs = [precision_recall(pairs, t)[ALL] for t in ts]
    for (p0, r0), (p1, r1) in zip(prs, prs[1:]):
        assert p1 <= p0 and r1 <= r0
    report = evaluate(pairs, thresholds=ts)
    acc = [report.cell(ALL, "accuracy", t) for t in ts]
    assert acc == sorted(acc, reverse=True)


def test_one_prediction_per_gt_gives_equal_precision_and_recall():
    pairs = _random_pairs(3)
    for p in pairs:
        p.predictions = [Detection(g.box, g.label, 0.9) for g in p.ground_truths]
    p, r = precision_recall(pairs, 0.5)[ALL]
    assert p == r


# ---------------------------------------------------------------------------
# evaluate and report
# ---------------------------------------------------------------------------


def test_single_perfect_pair_report():
    pair = EvalPair("a", [det(5, 5, 30, 30, "iris")], [gt(5, 5, 30, 30, "iris")])
    report = evaluate([pair])
    assert [r.trait for r in report.rows] == [*TRAITS, ALL]
    assert len(report.columns()) == 9
    for trait in ("iris", ALL):
        assert all(v == 1.0 for cells in report.row(trait).cells.values() for v in cells.values())
    assert report.flagged == ["face", "palm", "knuckle", "finger"]
    lines = report.to_csv().splitlines()
    assert len(lines) == 7
    assert lines[1].endswith("no-samples")


def test_report_accuracy_matches_direct_count():
    pairs = _random_pairs(11, n=40)
    report = evaluate(pairs)
    values = [v for _, v in collect_ious(pairs)]
    for t in report.thresholds:
        assert abs(report.cell(ALL, "accuracy", t) - direct_accuracy(values, [t])[0]) < 1e-9


def test_combined_curve_pools_trait_samples():
    pairs = _random_pairs(5, n=30)
    report = evaluate(pairs)
    pooled = np.concatenate([report.curves[t].counts for t in TRAITS if t in report.curves])
    pooled_counts = sum(report.curves[t].counts for t in TRAITS if t in report.curves)
    assert np.array_equal(pooled_counts, report.curves[ALL].counts)
    assert pooled.size > 0


def test_metrics_in_unit_interval():
    report = evaluate(_random_pairs(8, n=25))
    for row in report.rows:
        for cells in row.cells.values():
            assert all(0.0 <= v <= 1.0 for v in cells.values())


def test_duplicate_ids_rejected():
    pair = EvalPair("a", [], [gt(0, 0, 5, 5, "face")])
    with pytest.raises(EvaluationError):
        evaluate([pair, pair])


def test_empty_evaluation_rejected():
    with pytest.raises(EvaluationError):
        evaluate([])


def test_svg_is_standalone():
    report = evaluate(_random_pairs(2))
    svg = curves_svg(report.curves)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == len(report.curves)


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------


def test_prediction_file_round_trip(tmp_path):
    truth = [AnnotatedImage("a", None, [gt(1, 2, 30, 40, "face")], "a.pgm"),
             AnnotatedImage("b", None, list(SLAP_GTS), "b.pgm")]
    preds = [AnnotatedImage("a", None, [LabeledBox(Box(1.5, 2, 30, 40.25), "face", 0.875)], "a.pgm"),
             AnnotatedImage("b", None, [], "b.pgm")]
    save_annotations(truth, tmp_path / "gt.tsv", write_images=False)
    save_annotations(preds, tmp_path / "pred.tsv", write_images=False)
    pairs = load_pairs(tmp_path / "pred.tsv", tmp_path / "gt.tsv")
    assert [p.image_id for p in pairs] == ["a", "b"]
    assert pairs[0].predictions == [Detection(Box(1.5, 2, 30, 40.25), "face", 0.875)]
    assert pairs[1].ground_truths == SLAP_GTS


def test_ground_truth_against_itself(tmp_path):
    truth = [AnnotatedImage("a", None, [gt(1, 2, 30, 40, "face")], None),
             AnnotatedImage("b", None, list(SLAP_GTS), None)]
    save_annotations(truth, tmp_path / "gt.tsv", write_images=False)
    report = evaluate(load_pairs(tmp_path / "gt.tsv", tmp_path / "gt.tsv"))
    assert all(v == 1.0 for cells in report.row(ALL).cells.values() for v in cells.values())


def test_id_mismatch_rejected():
    a = AnnotatedImage("a", None, [], None)
    b = AnnotatedImage("b", None, [], None)
    with pytest.raises(EvaluationError):
        pairs_from_images([a], [b])
