import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multigran.corpus import GRANULARITY_NAMES, Granularity, SampleRecord, TextInstance
from multigran.evaluation import (
    EvalReport,
    PRF,
    average_precision,
    coco_map,
    emit_report,
    evaluate,
    load_report,
    match_for_prf,
    page_miou,
)

GOLDEN = Path(__file__).parent / "golden"


def rect(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def inst(level, poly, score=None, cls=0):
    return TextInstance(Granularity(level), cls, poly, score=score)


def record(rid, instances, flags=(1, 1, 1, 1), size=100):
    return SampleRecord(rid, f"images/{rid}.png", size, size, dict(zip(GRANULARITY_NAMES, flags)), instances)


def test_prf_formula():
    m = PRF.from_counts(3, 1, 2)
    assert (m.precision, m.recall) == (0.75, 0.6)
    assert m.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert PRF.from_counts(0, 0, 0).f1 == 0


def test_match_perfect_and_miss():
    gts = [inst(0, rect(0, 0, 10, 10)), inst(0, rect(20, 0, 30, 10))]
    assert match_for_prf([replace(g, score=0.9) for g in gts], gts) == (2, 0, 0)
    # overlap 3x10: IoU 30 / 170
    low = [inst(0, rect(7, 0, 17, 10), 0.9)]
    assert match_for_prf(low, gts[:1]) == (0, 1, 1)


def test_two_predictions_one_gt_greedy():
    gt = [inst(0, rect(0, 0, 10, 10))]
    # IoU 0.9 (higher score) and 0.8
    p_hi = inst(0, rect(0, 0, 10, 9), 0.9)
    p_lo = inst(0, rect(0, 0, 10, 8), 0.8)
    assert match_for_prf([p_lo, p_hi], gt) == (1, 1, 0)


def test_duplicate_lower_score_never_helps():
    gts = [inst(0, rect(0, 0, 10, 10)), inst(0, rect(20, 0, 30, 10))]
    preds = [inst(0, rect(0, 0, 10, 10), 0.9)]
    tp, fp, fn = match_for_prf(preds, gts)
    tp2, fp2, fn2 = match_for_prf(preds + [replace(preds[0], score=0.5)], gts)
    assert tp2 == tp and fn2 == fn
    assert PRF.from_counts(tp2, fp2, fn2).precision <= PRF.from_counts(tp, fp, fn).precision


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tp_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    def rnd():
        x, y = rng.uniform(0, 60, 2)
        w, h = rng.uniform(5, 30, 2)
        return rect(x, y, x + w, y + h)
    gts = [inst(0, rnd()) for _ in range(4)]
    preds = [inst(0, rnd(), float(rng.random())) for _ in range(5)]
    tps = [match_for_prf(preds, gts, t)[0] for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b for a, b in zip(tps, tps[1:]))


def test_map_cases():
    gts = [[inst(2, rect(0, 0, 10, 10)), inst(2, rect(20, 0, 30, 10)), inst(2, rect(40, 0, 50, 10))]]
    perfect = [[replace(g, score=0.9 - 0.1 * k) for k, g in enumerate(gts[0])]]
    assert coco_map(perfect, gts, [0]) == pytest.approx(1.0)
    assert coco_map([[]], gts, [0]) == 0.0
    # one GT missed, perfect ranking: recall reaches 2/3 at precision 1;
    # 67 of the 101 recall points (0.00 .. 0.66) sit at or below 2/3
    assert coco_map([perfect[0][:2]], gts, [0]) == pytest.approx(67 / 101, abs=1e-12)
    assert average_precision([0.9, 0.8], [True, True], 3) == pytest.approx(67 / 101, abs=1e-12)


def test_map_skips_absent_classes_and_is_scale_invariant():
    gts = [[inst(2, rect(0, 0, 10, 10), cls=1), inst(2, rect(20, 0, 30, 10), cls=1)]]
    preds = [[inst(2, rect(0, 0, 10, 10), 0.4, cls=1), inst(2, rect(21, 0, 30, 10), 0.7, cls=1),
              inst(2, rect(60, 0, 70, 10), 0.9, cls=1)]]
    base = coco_map(preds, gts, [0, 1, 2])
    assert base == coco_map(preds, gts, [1])
    scaled = [[replace(p, score=p.score * 0.37) for p in preds[0]]]
    assert coco_map(scaled, gts, [1]) == base


def test_page_miou_cases():
    gt = record("a", [inst(3, rect(0, 0, 100, 100))])
    pred = record("a", [inst(3, rect(0, 0, 100, 100), 0.9)])
    assert page_miou([pred], [gt]) == 1.0
    assert page_miou([record("a", [])], [gt]) == 0.0
    gt_half = record("a", [inst(3, rect(0, 0, 50, 100))])
    shifted = record("a", [inst(3, rect(25, 0, 75, 100), 0.9)])
    assert page_miou([shifted], [gt_half]) == pytest.approx(1 / 3, abs=1e-12)
    # best-scoring page is the one used
    two = record("a", [inst(3, rect(0, 0, 10, 10), 0.2), inst(3, rect(0, 0, 100, 100), 0.8)])
    assert page_miou([two], [gt]) == 1.0


def toy_eval():
    gt1 = record("s1", [inst(0, rect(5, 5, 20, 12)), inst(0, rect(25, 5, 40, 12)), inst(1, rect(5, 5, 40, 12)),
                        inst(2, rect(3, 3, 45, 20), cls=1), inst(3, rect(0, 0, 100, 100))])
    gt2 = record("s2", [inst(3, rect(10, 10, 90, 90))], flags=(0, 0, 0, 1))
    p1 = record("s1", [inst(0, rect(5, 5, 20, 12), 0.9), inst(0, rect(60, 60, 70, 70), 0.6),
                       inst(1, rect(5, 5, 38, 12), 0.8), inst(2, rect(3, 3, 45, 18), 0.7, cls=1),
                       inst(3, rect(0, 0, 100, 100), 0.99)])
    # word predictions on s2 are ignored: word flag is 0 there
    p2 = record("s2", [inst(0, rect(1, 1, 5, 5), 0.9), inst(3, rect(10, 10, 90, 40), 0.95)])
    return evaluate([p1, p2], [gt1, gt2], num_para_classes=3)


def test_evaluate_toy_values():
    rep = toy_eval()
    w = rep.granularities["word"]
    assert (w.tp, w.fp, w.fn, w.images) == (1, 1, 1, 1)
    assert rep.granularities["line"].f1 == 1.0
    page = rep.granularities["page"]
    assert (page.tp, page.fp, page.fn) == (1, 1, 1)
    # s2 page: 80x30 inside 80x80
    assert rep.page_miou == pytest.approx((1 + 30 / 80) / 2, abs=1e-3)
    # para IoU 630/714 = 0.882: matched at thresholds 0.50 .. 0.85 (8 of 10)
    assert rep.para_map == pytest.approx(0.8)


def test_report_golden_and_round_trip(tmp_path):
    rep = toy_eval()
    emit_report(rep, tmp_path / "report.json")
    assert json.loads((tmp_path / "report.json").read_text()) == json.loads((GOLDEN / "report_toy.json").read_text())
    assert (tmp_path / "report.txt").read_text() == (GOLDEN / "report_toy.txt").read_text()
    assert load_report(tmp_path / "report.json") == rep


def test_empty_evaluation(tmp_path):
    rep = evaluate([], [])
    emit_report(rep, tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    assert back.para_map == 0 and all(m.f1 == 0 for m in back.granularities.values())


def test_report_metrics_in_unit_interval():
    rep = toy_eval()
    for m in rep.granularities.values():
        assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.f1 <= 1
    assert isinstance(EvalReport.from_json(rep.to_json()), EvalReport)
