from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from vecmap.config import APConfig
from vecmap.evaluation import (
    DataError,
    EvalReport,
    average_precision,
    chamfer_matrix,
    evaluate,
    format_report,
    greedy_match_at_threshold,
)
from vecmap.geometry import Category, MapElement, Polyline, resample_polyline

CFG = APConfig()


def _element(rs, cat, conf=1.0):
    n = 4 if cat is Category.PED_CROSSING else int(rs.integers(2, 6))
    start = np.array([rs.uniform(-25, 25), rs.uniform(-12, 12)])
    pts = start + np.cumsum(rs.normal(0, 3, (n, 2)), axis=0)
    pts = np.clip(pts, [-30, -15], [30, 15])
    pts += rs.normal(0, 1e-3, pts.shape)  # avoid degenerate zero-length elements
    return MapElement(cat, Polyline(pts, cat is Category.PED_CROSSING), conf)


def _jitter(rs, e, sigma, conf):
    return MapElement(e.category, Polyline(e.points + rs.normal(0, sigma, e.points.shape), e.closed), conf)


def make_fixture(rs, n_frames=3):
    frames = []
    for _ in range(n_frames):
        gts = [_element(rs, Category(int(rs.integers(3)))) for _ in range(int(rs.integers(0, 6)))]
        preds = []
        for g in gts:
            if rs.random() < 0.8:
                preds.append(_jitter(rs, g, float(rs.choice([0.05, 0.3, 0.8, 2.0])), float(rs.random())))
        for _ in range(int(rs.integers(0, 4))):
            preds.append(_element(rs, Category(int(rs.integers(3))), float(rs.random())))
        frames.append((preds, gts))
    return frames


def reference_evaluate(frames, thresholds=(0.5, 1.0, 1.5), n=100):
    """Slow path: explicit loops, scipy distances and a max-over-later-precision envelope."""
    out = {}
    for cat in Category:
        ranked = []
        n_gt = 0
        for fi, (preds, gts) in enumerate(frames):
            n_gt += sum(g.category == cat for g in gts)
            for pi, p in enumerate(preds):
                if p.category == cat:
                    ranked.append((p.confidence, fi, pi))
        ranked.sort(key=lambda t: -t[0])  # stable
        for t in thresholds:
            claimed = set()
            flags = []
            for conf, fi, pi in ranked:
                p = frames[fi][0][pi]
                pp = resample_polyline(p.geometry, n).points
                best, best_j = np.inf, None
                for gj, g in enumerate(frames[fi][1]):
                    if g.category != cat or (fi, gj) in claimed:
                        continue
                    d = cdist(pp, resample_polyline(g.geometry, n).points)
                    ch = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
                    if ch < best:
                        best, best_j = ch, gj
                if best_j is not None and best < t:
                    claimed.add((fi, best_j))
                    flags.append(True)
                else:
                    flags.append(False)
            if n_gt == 0:
                ap = 1.0 if not flags else 0.0
            else:
                prec = []
                tp = 0
                for k, f in enumerate(flags):
                    tp += f
                    prec.append(tp / (k + 1))
                ap = 0.0
                for k, f in enumerate(flags):
                    if f:
                        ap += max(prec[k:]) / n_gt
            out[(cat.label, t)] = ap
    return out


def test_average_precision_examples():
    assert average_precision([True, True, True], 3) == 1.0
    assert average_precision([False, False], 2) == 0.0
    assert average_precision([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision([], 0) == 1.0
    assert average_precision([False], 0) == 0.0
    assert average_precision([], 4) == 0.0


def test_greedy_examples():
    g = MapElement(Category.DIVIDER, Polyline([(0, 0), (10, 0)]))
    assert greedy_match_at_threshold([g], [g], 0.5) == [True]
    assert greedy_match_at_threshold([g, g], [], 1.0) == [False, False]
    hi = MapElement(Category.DIVIDER, Polyline([(0, 0.2), (10, 0.2)]), 0.9)
    lo = MapElement(Category.DIVIDER, Polyline([(0, 0.1), (10, 0.1)]), 0.5)
    assert greedy_match_at_threshold([hi, lo], [g], 0.5) == [True, False]


def test_chamfer_matrix_against_cdist():
    rs = np.random.default_rng(0)
    a = [rs.normal(size=(7, 2)) for _ in range(3)]
    b = [rs.normal(size=(7, 2)) for _ in range(2)]
    m = chamfer_matrix(a, b)
    for i in range(3):
        for j in range(2):
            d = cdist(a[i], b[j])
            assert m[i, j] == pytest.approx(0.5 * (d.min(1).mean() + d.min(0).mean()), abs=1e-12)


def test_perfect_and_empty_predictors():
    rs = np.random.default_rng(1)
    frames = make_fixture(rs, 4)
    perfect = [([MapElement(g.category, g.geometry, 1.0) for g in gts], gts) for _, gts in frames]
    if all(any(g.category == c for _, gts in frames for g in gts) for c in Category):
        assert evaluate(perfect).map_score == 1.0
    gts = [MapElement(c, Polyline([(0, i), (5, i + 1)])) for i, c in enumerate(Category)
           if c is not Category.PED_CROSSING]
    gts.append(MapElement(Category.PED_CROSSING, Polyline([(0, 0), (2, 0), (2, 2), (0, 2)], True)))
    assert evaluate([(gts, gts)]).map_score == 1.0
    assert evaluate([([], gts)]).map_score == 0.0


def test_evaluate_matches_reference_on_fixtures():
    rs = np.random.default_rng(2)
    for fixture in range(60):
        frames = make_fixture(rs, int(rs.integers(1, 4)))
        got = evaluate(frames, CFG)
        ref = reference_evaluate(frames)
        for key, v in ref.items():
            assert got.ap[key] == pytest.approx(v, abs=1e-12), (fixture, key)
        cats = [c.label for c in Category]
        assert got.map_score == pytest.approx(np.mean([got.ap_category[c] for c in cats]), abs=1e-15)


def test_report_invariants_and_round_trip():
    rs = np.random.default_rng(3)
    frames = make_fixture(rs, 3)
    r = evaluate(frames)
    for c in r.ap_category:
        a = [r.ap[(c, t)] for t in r.thresholds]
        assert all(0 <= v <= 1 for v in a)
        assert a[0] <= a[1] <= a[2]
    d = r.to_dict()
    assert d["schema_version"] == 1
    back = EvalReport.from_dict(d)
    assert back.ap == r.ap and back.map_score == r.map_score and back.counts == r.counts
    assert "mAP" in format_report(r)
    with pytest.raises(DataError):
        EvalReport.from_dict({**d, "schema_version": 99})


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
def test_confidence_scaling_invariance(seed, scale):
    frames = make_fixture(np.random.default_rng(seed), 2)
    scaled = [([MapElement(p.category, p.geometry, p.confidence * scale) for p in preds], gts)
              for preds, gts in frames]
    assert evaluate(frames).ap == evaluate(scaled).ap


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_duplicate_tp_never_increases_ap(seed):
    # with one gt per category and frame a duplicate has nothing left to claim
    rs = np.random.default_rng(seed)
    frames = []
    for preds, gts in make_fixture(rs, 2):
        keep = {g.category: g for g in gts}
        frames.append((preds, list(keep.values())))
    base = evaluate(frames)
    preds, gts = frames[0]
    if not preds:
        return
    dup = list(preds) + [preds[int(rs.integers(len(preds)))]]
    more = evaluate([(dup, gts)] + frames[1:])
    for k in base.ap:
        assert more.ap[k] <= base.ap[k] + 1e-12


def test_unknown_category_is_data_error():
    bad = SimpleNamespace(category=7, geometry=Polyline([(0, 0), (1, 0)]), confidence=1.0)
    with pytest.raises(DataError):
        evaluate([([bad], [])])
