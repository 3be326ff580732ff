"""Evaluation harness: template-matching OCR oracle and the metric suite.

Recognition crops a text line at its ground-truth box, splits it into equal
cells, and matches each binarized cell against every alphabet glyph by
normalized cross-correlation (both polarities). Detection slides the same
templates over the image at three scales. Sentence accuracy, normalized
edit distance, box IoU, foreground-extension ratio and foreground
preservation follow.
"""
from __future__ import annotations

import json

import numpy as np

from .synth import _LUM, scale_nearest

DETECT_CONFIDENCE = 0.2


# ---------------------------------------------------------------------------
# edit distance


def levenshtein(a, b) -> int:
    """Standard DP edit distance over id sequences (or strings)."""
    m, n = len(a), len(b)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[n]


def ned(pred, gt) -> float:
    """1 - levenshtein/max(len): a similarity in [0, 1]."""
    if len(pred) == 0 and len(gt) == 0:
        raise ValueError("ned undefined for two empty strings")
    return 1.0 - levenshtein(pred, gt) / max(len(pred), len(gt))


def sen_acc(preds, gts) -> float:
    if len(preds) != len(gts):
        raise ValueError("prediction/ground-truth length mismatch")
    if not gts:
        raise ValueError("sen_acc undefined on an empty list")
    return sum(1 for p, g in zip(preds, gts) if list(p) == list(g)) / len(gts)


def bbox_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# template OCR


def _luminance(image_chw):
    return np.tensordot(_LUM, (image_chw + 1.0) * 0.5, axes=(0, 0))


def _ncc(a, t):
    a = a - a.mean()
    t = t - t.mean()
    na, nt = np.linalg.norm(a), np.linalg.norm(t)
    if na < 1e-8 or nt < 1e-8:
        return 0.0
    return float((a * t).sum() / (na * nt))


def _pixel_box(bbox, size):
    x0, y0, x1, y1 = (int(round(c * size)) for c in bbox)
    return max(x0, 0), max(y0, 0), min(x1, size), min(y1, size)


def ocr_recognize(image_chw, bbox, glyphs, n_chars):
    """Read `n_chars` characters from the line at normalized `bbox`.

    `glyphs` is the (alphabet, G, G) bitmap stack. Each equal-width cell is
    binarized at its midpoint and matched to every glyph scaled to the cell
    shape; both polarities are tried via the absolute correlation, and ties
    resolve to the lowest char id. Returns (char ids, per-char scores).
    """
    if n_chars <= 0:
        raise ValueError("n_chars must be positive")
    size = image_chw.shape[-1]
    x0, y0, x1, y1 = _pixel_box(bbox, size)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"zero-area bbox {bbox}")
    lum = _luminance(image_chw)[y0:y1, x0:x1]
    cw = lum.shape[1] // n_chars
    ch = lum.shape[0]
    if cw < 1:
        raise ValueError("bbox too narrow for n_chars")
    templates = [scale_nearest(g, ch, cw) for g in glyphs]
    out, scores = [], []
    for i in range(n_chars):
        cell = lum[:, i * cw:(i + 1) * cw]
        thr = (cell.min() + cell.max()) / 2.0
        b = (cell > thr).astype(np.float32)
        cs = np.array([abs(_ncc(b, t)) for t in templates])
        out.append(int(cs.argmax()))
        scores.append(float(cs.max()))
    return out, scores


def _window_scores(lum, content, templates, cw, ch):
    """|NCC| of the line template at every placement; returns (ny, nx) scores."""
    h, w = ch, cw * len(content)
    H, W = lum.shape
    ny, nx = H - h + 1, W - w + 1
    if ny <= 0 or nx <= 0:
        return None
    s0, s1 = lum.strides
    total = np.zeros((ny, nx))
    for i, cid in enumerate(content):
        t = templates[cid].ravel()
        t = t - t.mean()
        nt = np.linalg.norm(t)
        if nt < 1e-8:
            continue
        cells = np.lib.stride_tricks.as_strided(
            lum[:, i * cw:], shape=(ny, nx, ch, cw), strides=(s0, s1, s0, s1))
        flat = cells.reshape(ny * nx, ch * cw)
        flat = flat - flat.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(flat, axis=1)
        norms[norms < 1e-8] = np.inf
        total += np.abs(flat @ t / (norms * nt)).reshape(ny, nx)
    return total / len(content)


def ocr_detect(image_chw, content, glyphs):
    """Find the best placement of the glyph string by exhaustive template search.

    Searches every plausible cell scale; returns (normalized bbox,
    confidence). A confidence below DETECT_CONFIDENCE means the string is
    likely absent.
    """
    if not len(content):
        raise ValueError("empty ground-truth string")
    size = image_chw.shape[-1]
    lum = _luminance(image_chw)
    best = (-1.0, (0.0, 0.0, 1.0, 1.0))
    for cw in (6, 7, 8, 9, 10):
        for ch in (cw, cw + 1, cw + 2):
            templates = {cid: scale_nearest(glyphs[cid], ch, cw) for cid in set(content)}
            sc = _window_scores(lum, content, templates, cw, ch)
            if sc is None:
                continue
            iy, ix = np.unravel_index(sc.argmax(), sc.shape)
            if sc[iy, ix] > best[0]:
                box = (ix / size, iy / size, (ix + cw * len(content)) / size, (iy + ch) / size)
                best = (float(sc[iy, ix]), box)
    return best[1], best[0]


# ---------------------------------------------------------------------------
# aggregate metrics


def text_metrics(samples, images, glyphs):
    """Recognition metrics over all declared lines: (sen_acc, mean ned)."""
    preds, gts, neds = [], [], []
    for s, img in zip(samples, images):
        for ln in s.spec.lines:
            p, _ = ocr_recognize(img, ln.bbox, glyphs, len(ln.content))
            preds.append(p)
            gts.append(list(ln.content))
            neds.append(ned(p, ln.content))
    return sen_acc(preds, gts), float(np.mean(neds)), len(gts)


def text_iou_metrics(samples, images, glyphs):
    """Detection-vs-layout IoU: (mIoU, IoU@0.5, IoU@0.7)."""
    ious = []
    for s, img in zip(samples, images):
        for ln in s.spec.lines:
            box, _ = ocr_detect(img, ln.content, glyphs)
            ious.append(bbox_iou(box, ln.bbox))
    ious = np.asarray(ious)
    return float(ious.mean()), float((ious > 0.5).mean()), float((ious > 0.7).mean())


def fg_metrics(samples, images, det_store):
    """(fg_ext_ratio, fg_preserve_mse) under a trained, frozen detector."""
    from . import detector as det

    scores, errs = [], []
    for s, img in zip(samples, images):
        scores.append(det.score(det_store, img, s.mask))
        m = s.mask
        if m.sum() > 0:
            d = (img - s.image) * m[None]
            errs.append(float((d * d).sum() / (3 * m.sum())))
    ratio = float(np.mean([sc > 0.5 for sc in scores]))
    return ratio, float(np.mean(errs)) if errs else 0.0


def build_report(samples, images, glyphs, det_store=None, config_hash=""):
    acc, mean_ned, n_lines = text_metrics(samples, images, glyphs)
    miou, iou05, iou07 = text_iou_metrics(samples, images, glyphs)
    rep = {
        "sen_acc": acc,
        "ned": mean_ned,
        "miou": miou,
        "iou_at_05": iou05,
        "iou_at_07": iou07,
        "fg_ext_ratio": None,
        "fg_preserve_mse": None,
        "fid": None,  # requires a pretrained network; intentionally unreported
        "clip_t": None,
        "n_samples": len(samples),
        "n_lines": n_lines,
        "config_hash": config_hash,
    }
    if det_store is not None:
        rep["fg_ext_ratio"], rep["fg_preserve_mse"] = fg_metrics(samples, images, det_store)
    return rep


def save_report(path, report):
    with open(path, "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
