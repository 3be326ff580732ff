"""Metric oracles (edit distance, IoU, OCR closure on clean renders)."""
import itertools
import sys
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posterkit import metrics, synth
from posterkit.glyphs import render_alphabet

GLYPHS = render_alphabet(16, 0)


# ---------------------------------------------------------------------------
# Levenshtein vs an independent brute-force recursion


def _lev_recursive(a, b):
    """Textbook recursion (with memo so longer cases terminate)."""
    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(rec(i - 1, j) + 1,
                   rec(i, j - 1) + 1,
                   rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return rec(len(a), len(b))


def _strings(alphabet, max_len):
    out = []
    for n in range(max_len + 1):
        out.extend("".join(p) for p in itertools.product(alphabet, repeat=n))
    return out


def test_levenshtein_exhaustive_short():
    # every pair of strings of length <= 3 over a 4-char alphabet
    ss = _strings("abcd", 3)
    for a in ss:
        for b in ss:
            assert metrics.levenshtein(a, b) == _lev_recursive(a, b), (a, b)


def test_levenshtein_sampled_length_six():
    # all pairs up to length 6 is ~30M comparisons; a seeded random sample
    # of 3000 pairs keeps the check inside the runtime budget
    rng = np.random.default_rng(0)
    alpha = "abcd"
    for _ in range(3000):
        a = "".join(rng.choice(list(alpha), size=rng.integers(0, 7)))
        b = "".join(rng.choice(list(alpha), size=rng.integers(0, 7)))
        assert metrics.levenshtein(a, b) == _lev_recursive(a, b), (a, b)


def test_levenshtein_known_values():
    assert metrics.levenshtein("kitten", "sitting") == 3
    assert metrics.levenshtein("", "abc") == 3
    assert metrics.levenshtein("abc", "abc") == 0
    assert metrics.levenshtein([0, 1, 2], [0, 2]) == 1  # works on id lists


@settings(max_examples=200, deadline=None)
@given(st.text("abcd", max_size=8), st.text("abcd", max_size=8),
       st.text("abcd", max_size=8))
def test_levenshtein_metric_axioms(a, b, c):
    d = metrics.levenshtein
    assert d(a, b) == d(b, a)
    assert d(a, b) == 0 if a == b else d(a, b) >= 1
    assert d(a, c) <= d(a, b) + d(b, c)
    assert abs(len(a) - len(b)) <= d(a, b) <= max(len(a), len(b))


def test_ned_values_and_errors():
    assert metrics.ned("kitten", "sitting") == pytest.approx(4.0 / 7.0, abs=1e-12)
    assert metrics.ned("abc", "abc") == 1.0
    assert metrics.ned("", "ab") == 0.0
    with pytest.raises(ValueError):
        metrics.ned("", "")


def test_sen_acc():
    assert metrics.sen_acc([[0, 1], [2]], [[0, 1], [3]]) == 0.5
    assert metrics.sen_acc(["ab"], [["a", "b"]]) == 1.0  # list-normalized
    with pytest.raises(ValueError):
        metrics.sen_acc([], [])
    with pytest.raises(ValueError):
        metrics.sen_acc([[1]], [[1], [2]])


# ---------------------------------------------------------------------------
# IoU


def test_iou_hand_case():
    assert metrics.bbox_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1.0 / 7.0, abs=1e-12)


def test_iou_properties():
    a, b = (0.1, 0.2, 0.5, 0.4), (0.2, 0.1, 0.6, 0.3)
    assert metrics.bbox_iou(a, b) == metrics.bbox_iou(b, a)
    assert metrics.bbox_iou(a, a) == pytest.approx(1.0)
    assert metrics.bbox_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    # containment: inner area / outer area
    assert metrics.bbox_iou((0, 0, 4, 4), (1, 1, 3, 3)) == pytest.approx(4.0 / 16.0)
    assert metrics.bbox_iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0  # degenerate


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.floats(0, 1) for _ in range(4)]),
       st.tuples(*[st.floats(0, 1) for _ in range(4)]))
def test_iou_bounded(a, b):
    a = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3]))
    b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]))
    v = metrics.bbox_iou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# template OCR on clean renders


def _samples(n, start=0):
    out, seed = [], start
    while len(out) < n:
        try:
            out.append(synth.synth_sample(seed, synth.SynthConfig()))
        except synth.PlacementError:
            pass
        seed += 1
    return out


def test_ocr_reads_clean_renders_exactly():
    ss = _samples(10)
    acc, mean_ned, n = metrics.text_metrics(ss, [s.image for s in ss], GLYPHS)
    assert n >= 10
    assert acc == 1.0
    assert mean_ned == 1.0


def test_ocr_detect_localizes_lines():
    ss = _samples(4)
    miou, at05, _ = metrics.text_iou_metrics(ss, [s.image for s in ss], GLYPHS)
    assert miou >= 0.6
    assert at05 >= 0.8


def test_ocr_recognize_validation():
    s = _samples(1)[0]
    with pytest.raises(ValueError):
        metrics.ocr_recognize(s.image, s.spec.lines[0].bbox, GLYPHS, 0)
    with pytest.raises(ValueError):
        metrics.ocr_recognize(s.image, (0.5, 0.5, 0.5, 0.9), GLYPHS, 2)
    with pytest.raises(ValueError):
        metrics.ocr_detect(s.image, [], GLYPHS)


def test_ocr_detect_low_confidence_on_absent_text():
    # a blank image contains no glyphs: confidence under the reporting floor
    blank = np.full((3, 64, 64), -0.2, dtype=np.float32)
    _, conf = metrics.ocr_detect(blank, [1, 2, 3], GLYPHS)
    assert conf < metrics.DETECT_CONFIDENCE


def test_build_report_keys(tmp_path):
    ss = _samples(2)
    rep = metrics.build_report(ss, [s.image for s in ss], GLYPHS, config_hash="ab12")
    for k in ("sen_acc", "ned", "miou", "iou_at_05", "iou_at_07",
              "fg_ext_ratio", "fg_preserve_mse", "n_samples", "n_lines"):
        assert k in rep
    assert rep["fid"] is None and rep["fg_ext_ratio"] is None
    assert rep["config_hash"] == "ab12"
    p = tmp_path / "r.json"
    metrics.save_report(p, rep)
    import json
    assert json.load(open(p)) == rep


def test_fg_metrics_identity_images():
    from posterkit import detector
    from posterkit.params import ParamStore
    from posterkit.rng import RngStream

    store = ParamStore()
    detector.init_detector(store, RngStream(0, "detector/init"))
    ss = _samples(3)
    ratio, mse = metrics.fg_metrics(ss, [s.image for s in ss], store)
    assert 0.0 <= ratio <= 1.0
    assert mse == 0.0  # identical images preserve the subject exactly
