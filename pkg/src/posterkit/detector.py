"""Foreground-extension detector.

Given a generated image and the intended subject mask, a small convolutional
encoder-decoder predicts the actual subject extent (the intermediate mask),
and a classification head scores whether the foreground grew beyond the
intended mask. The network sees a crop around the subject box (1.5x the
tight bbox) resized to a fixed resolution, so pixels far from the subject
cannot influence the score. Everything is differentiable with respect to the
input image so the score can serve as a reward signal.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW
from .params import ParamStore
from .rng import RngStream

CROP = 32  # working resolution of the detector


def tight_bbox(mask) -> tuple:
    """Pixel-space (x0, y0, x1, y1) of the mask's support."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("empty mask has no bbox")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def expand_box(box, factor, size) -> tuple:
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) / 2 * factor, (y1 - y0) / 2 * factor
    return (max(0, int(np.floor(cx - hw))), max(0, int(np.floor(cy - hh))),
            min(size, int(np.ceil(cx + hw))), min(size, int(np.ceil(cy + hh))))


def _bilinear_matrix(n_out, n_in) -> np.ndarray:
    """(n_out, n_in) interpolation weights, align-corners convention."""
    m = np.zeros((n_out, n_in), dtype=np.float32)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / max(n_out - 1, 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(np.float32)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def crop_resize(x, box, out_size=CROP):
    """Differentiable crop of (B, C, H, W) to `box` plus bilinear resize."""
    x = ad.as_tensor(x)
    x0, y0, x1, y1 = box
    c = ad.narrow(ad.narrow(x, 2, y0, y1 - y0), 3, x0, x1 - x0)
    a = Tensor(_bilinear_matrix(out_size, y1 - y0))
    b = Tensor(_bilinear_matrix(out_size, x1 - x0).T)
    return ad.matmul(ad.matmul(a, c), b)


def paste_back(crop_map, box, size) -> np.ndarray:
    """Resize a (h_c, w_c) crop-space map back into a zeroed full-res frame."""
    x0, y0, x1, y1 = box
    a = _bilinear_matrix(y1 - y0, crop_map.shape[0])
    b = _bilinear_matrix(x1 - x0, crop_map.shape[1])
    full = np.zeros((size, size), dtype=np.float32)
    full[y0:y1, x0:x1] = a @ crop_map @ b.T
    return full


# ---------------------------------------------------------------------------
# parameters


def init_detector(store: ParamStore, rng: RngStream, prefix: str = "detector") -> None:
    def conv(name, co, ci, k=3):
        std = 1.0 / np.sqrt(ci * k * k)
        store.add(f"{prefix}.{name}.w", (rng.normal((co, ci, k, k)) * std).astype(np.float32))
        store.add(f"{prefix}.{name}.b", np.zeros(co, dtype=np.float32))

    # encoder: 4 stride-2 levels over 6 input channels
    # (image, mask, box, color-similarity to the subject)
    conv("enc1", 16, 6)
    conv("enc2", 32, 16)
    conv("enc3", 64, 32)
    conv("enc4", 64, 64)
    # decoder back to crop resolution
    conv("dec1", 64, 64)
    conv("dec2", 32, 64)
    conv("dec3", 16, 32)
    conv("dec4", 8, 16)
    conv("mask_out", 1, 8, k=1)
    # growth map: the predicted foreground beyond the intended mask; dense
    # supervision for this makes the extension evidence explicit
    conv("grow_out", 1, 8, k=1)
    # extension head over concat(decoder features, M_s, M_i, M_s - M_i)
    conv("head1", 16, 11)
    conv("head2", 32, 16)
    std = 1.0 / np.sqrt(66)
    store.add(f"{prefix}.mlp1.w", (rng.normal((66, 32)) * std).astype(np.float32))
    store.add(f"{prefix}.mlp1.b", np.zeros(32, dtype=np.float32))
    store.add(f"{prefix}.mlp2.w", (rng.normal((32, 1)) * std).astype(np.float32))
    store.add(f"{prefix}.mlp2.b", np.zeros(1, dtype=np.float32))


def _conv(store, name, x, stride=1, prefix="detector"):
    return ad.conv2d(x, store[f"{prefix}.{name}.w"], store[f"{prefix}.{name}.b"],
                     stride=stride, padding=1)


def _conv1(store, name, x, prefix="detector"):
    return ad.conv2d(x, store[f"{prefix}.{name}.w"], store[f"{prefix}.{name}.b"],
                     stride=1, padding=0)


# ---------------------------------------------------------------------------
# forward


def detector_logits(store, image, mask, box=None, prefix="detector"):
    """(mask_logit (1, 1, CROP, CROP), score_logit scalar Tensor) for one sample.

    `image` may be a Tensor (for reward gradients) or an array; `mask` is the
    intended subject mask (H, W). The crop box defaults to 1.5x the tight
    bbox of the mask.
    """
    img = ad.as_tensor(image)
    if img.data.ndim == 3:
        img = ad.reshape(img, (1,) + img.shape)
    size = img.shape[-1]
    if mask.shape != (size, size):
        raise ad.ShapeError(f"mask shape {mask.shape} does not match image {img.shape}")
    box = box or expand_box(tight_bbox(mask), 1.5, size)
    x0, y0, x1, y1 = box
    boxmap = np.zeros((size, size), dtype=np.float32)
    boxmap[y0:y1, x0:x1] = 1.0
    cond = Tensor(np.stack([np.asarray(mask, dtype=np.float32), boxmap])[None])
    # similarity of each pixel to the subject's mean color: the cue that
    # separates a genuine foreground protrusion from background; built from
    # differentiable ops so the reward gradient reaches the image
    fg = Tensor(np.asarray(mask, dtype=np.float32)[None, None])
    mc = ad.affine(ad.sum_(ad.mul(img, fg), axis=(2, 3), keepdims=True),
                   1.0 / float(max(np.asarray(mask).sum(), 1.0)))
    dc = ad.sub(img, mc)
    simil = ad.exp(ad.affine(ad.sum_(ad.mul(dc, dc), axis=1, keepdims=True), -3.0))
    x = ad.concat([img, cond, simil], axis=1)
    x = crop_resize(x, box)

    h1 = ad.silu(_conv(store, "enc1", x, stride=2, prefix=prefix))
    h2 = ad.silu(_conv(store, "enc2", h1, stride=2, prefix=prefix))
    h3 = ad.silu(_conv(store, "enc3", h2, stride=2, prefix=prefix))
    h4 = ad.silu(_conv(store, "enc4", h3, stride=2, prefix=prefix))
    d = ad.silu(_conv(store, "dec1", ad.upsample2(h4), prefix=prefix))
    d = ad.silu(_conv(store, "dec2", ad.upsample2(d), prefix=prefix))
    d = ad.silu(_conv(store, "dec3", ad.upsample2(d), prefix=prefix))
    d = ad.silu(_conv(store, "dec4", ad.upsample2(d), prefix=prefix))
    mask_logit = _conv1(store, "mask_out", d, prefix=prefix)
    grow_logit = _conv1(store, "grow_out", d, prefix=prefix)

    ms_crop = ad.narrow(x, 1, 3, 1)  # the resized intended-mask channel
    mi = ad.sigmoid(mask_logit)
    feats = ad.concat([d, ms_crop, mi, ad.sub(ms_crop, mi)], axis=1)
    h = ad.silu(_conv(store, "head1", feats, stride=2, prefix=prefix))
    h = ad.silu(_conv(store, "head2", h, stride=2, prefix=prefix))
    # mean pool plus a log-sum-exp (soft max) pool: an extension shows up in
    # only a handful of crop pixels, which a plain average washes out. The
    # pooled vector is normalized so the classifier sees O(1) features.
    c = h.data.max(axis=(2, 3), keepdims=True)
    lse = ad.add(ad.log(ad.mean(ad.exp(ad.sub(h, ad.constant(c))), axis=(2, 3))),
                 ad.constant(c[:, :, 0, 0]))
    pooled = ad.layernorm(ad.concat([ad.mean(h, axis=(2, 3)), lse], axis=1))
    # explicit growth statistics from the dedicated growth head, as an
    # amplified mean and a softmax-weighted (soft max) value
    grow = ad.reshape(ad.sigmoid(grow_logit), (1, CROP * CROP))
    gmean = ad.affine(ad.mean(grow, axis=1, keepdims=True), 32.0)
    gmax = ad.sum_(ad.mul(ad.softmax(ad.affine(grow, 32.0)), grow), axis=1, keepdims=True)
    h = ad.concat([pooled, gmean, gmax], axis=1)
    h = ad.silu(ad.linear(h, store[f"{prefix}.mlp1.w"], store[f"{prefix}.mlp1.b"]))
    score_logit = ad.linear(h, store[f"{prefix}.mlp2.w"], store[f"{prefix}.mlp2.b"])
    return mask_logit, grow_logit, ad.reshape(score_logit, (1,)), box


def predict_intermediate_mask(store, image, mask) -> np.ndarray:
    """Full-resolution intermediate mask M_i in [0, 1]."""
    size = np.asarray(mask).shape[-1]
    with ad.no_grad():
        mask_logit, _, _, box = detector_logits(store, image, mask)
        crop = 1.0 / (1.0 + np.exp(-mask_logit.data[0, 0]))
    return paste_back(crop, box, size)


def score(store, image, mask) -> float:
    """Extension score S in (0, 1); pure and frozen-parameter deterministic."""
    with ad.no_grad():
        _, _, logit, _ = detector_logits(store, image, mask)
    return float(1.0 / (1.0 + np.exp(-logit.data[0])))


def score_tensor(store, image_t, mask):
    """Differentiable S for reward training (gradient flows into image_t)."""
    _, _, logit, _ = detector_logits(store, image_t, mask)
    return ad.sigmoid(logit)


# ---------------------------------------------------------------------------
# training


@dataclass
class DetectorConfig:
    steps: int = 600
    batch_size: int = 8
    lr: float = 1e-3
    mask_loss_weight: float = 0.5
    holdout: float = 0.10
    seed: int = 0


def _bce_logit(logit, target, weight=None):
    """Mean of softplus(z) - y*z == -[y log s + (1-y) log(1-s)] elementwise.

    With `weight` the mean is weighted: sum(w * elem) / sum(w).
    """
    t = Tensor(np.asarray(target, dtype=np.float32))
    elem = ad.sub(ad.softplus(logit), ad.mul(t, logit))
    if weight is None:
        return ad.mean(elem)
    w = np.asarray(weight, dtype=np.float32)
    return ad.affine(ad.sum_(ad.mul(ad.constant(w), elem)), 1.0 / float(w.sum()))


def _resize_plain(m, out=CROP):
    a = _bilinear_matrix(out, m.shape[0])
    b = _bilinear_matrix(out, m.shape[1])
    return a @ m @ b.T


def train_detector(samples, cfg: DetectorConfig = None,
                   store: ParamStore = None) -> tuple[ParamStore, dict]:
    """Train on labeled samples (PosterSample with fg_extended / true_mask).

    Returns (store, metrics) with precision/recall/F1 on a 10% held-out
    split. Raises on a single-class dataset.
    """
    cfg = cfg or DetectorConfig()
    labels = [bool(s.fg_extended) for s in samples]
    if len(set(labels)) < 2:
        raise ValueError("detector training needs both classes")
    rng = RngStream(cfg.seed, "detector/train")
    order = rng.choice(len(samples), size=len(samples))
    n_hold = max(1, int(round(cfg.holdout * len(samples))))
    hold_idx = [int(i) for i in order[:n_hold]]
    train_idx = [int(i) for i in order[n_hold:]]

    if store is None:
        store = ParamStore()
        init_detector(store, RngStream(cfg.seed, "detector/init"))
    store.set_trainable(["detector."])
    opt = AdamW(lr=cfg.lr)
    log = []
    for step in range(cfg.steps):
        idx = rng.choice(len(train_idx), size=min(cfg.batch_size, len(train_idx)))
        losses = []
        for i in idx:
            s = samples[train_idx[int(i)]]
            mask_logit, grow_logit, score_logit, box = detector_logits(store, s.image, s.mask)
            y = 1.0 if s.fg_extended else 0.0
            x0, y0, x1, y1 = box
            true_crop = _resize_plain(s.true_mask[y0:y1, x0:x1])
            ms_crop = _resize_plain(s.mask[y0:y1, x0:x1].astype(np.float32))
            # upweight pixels where the true extent disagrees with the
            # intended mask, otherwise the mask head just copies its input
            # and the M_s - M_i feature carries no extension signal
            w = 1.0 + 20.0 * np.abs(true_crop - ms_crop)
            # the growth target is the protrusion itself; all-zero for clean
            # samples, so boundary softness never masquerades as growth
            grow_t = np.clip(true_crop - ms_crop, 0.0, 1.0)
            wg = 1.0 + 20.0 * grow_t
            loss = ad.add(
                _bce_logit(score_logit, [y]),
                ad.affine(
                    ad.add(_bce_logit(mask_logit, true_crop[None, None], w[None, None]),
                           _bce_logit(grow_logit, grow_t[None, None], wg[None, None])),
                    cfg.mask_loss_weight),
            )
            losses.append(loss)
        total = ad.affine(ad.sum_(ad.concat([ad.reshape(l, (1,)) for l in losses], axis=0)),
                          1.0 / len(losses))
        ad.backward(total)
        opt.step(store)
        store.zero_grads()
        if step % 50 == 0 or step == cfg.steps - 1:
            log.append((step, float(total.data)))

    tp = fp = fn = tn = 0
    for i in hold_idx:
        s = samples[i]
        pred = score(store, s.image, s.mask) > 0.5
        if s.fg_extended and pred:
            tp += 1
        elif s.fg_extended:
            fn += 1
        elif pred:
            fp += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        warnings.warn("F1 undefined (no true positives); reporting 0")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    metrics = {"precision": precision, "recall": recall, "f1": f1,
               "n_holdout": len(hold_idx), "loss_log": log}
    return store, metrics
