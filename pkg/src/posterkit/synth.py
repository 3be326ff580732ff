"""Deterministic synthetic poster corpus.

Each sample is generated from a single seed: a background fully determined
by its prompt tokens, a subject shape with a small logo mark, and 1-3 text
lines rendered from the procedural glyph alphabet at non-overlapping boxes
with contrast-safe colors. Extension pairs grow the subject by a procedural
protrusion for detector training.
"""
from __future__ import annotations

import functools
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .glyphs import TextLine, TextSpec, render_alphabet
from .rng import RngStream, derive_seed

# prompt token layout: [family, 3 + color, 9 + variant] over a 16-token vocab
N_FAMILIES = 3
N_COLORS = 6
N_VARIANTS = 7
PROMPT_VOCAB = 3 + N_COLORS + N_VARIANTS

_PALETTE = np.array(
    [
        [0.85, 0.30, 0.25],
        [0.25, 0.55, 0.85],
        [0.30, 0.70, 0.40],
        [0.80, 0.65, 0.25],
        [0.55, 0.35, 0.75],
        [0.35, 0.65, 0.65],
    ],
    dtype=np.float32,
)

_LUM = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class PlacementError(RuntimeError):
    """Raised when non-overlapping text boxes cannot be placed."""


@dataclass
class SynthConfig:
    image_size: int = 64
    alphabet_size: int = 16
    font_seed: int = 0
    min_lines: int = 1
    max_lines: int = 3
    min_chars: int = 2
    max_chars: int = 8
    excluded_p: float = 0.35  # chance of one tiny decoration line
    subject_area: tuple = (0.04, 0.25)
    protrusion_ratio: tuple = (0.02, 0.15)  # of subject area


@dataclass
class PosterSample:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    mask: np.ndarray  # (H, W) float32 in {0, 1}, subject = 1
    prompt_tokens: list
    spec: TextSpec
    excluded_boxes: list = field(default_factory=list)  # normalized (x0,y0,x1,y1)
    seed: int = 0
    fg_extended: bool = False
    true_mask: np.ndarray = None  # actual subject extent; == mask unless extended

    def __post_init__(self):
        if self.true_mask is None:
            self.true_mask = self.mask


@dataclass
class ExtensionPair:
    clean: PosterSample
    extended: PosterSample


def scale_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resample a 2-D array to (h, w): max over the source footprint of each
    target pixel, so thin strokes survive downscaling (nearest when upscaling)."""
    H, W = img.shape
    rs = (np.arange(h + 1) * H) // h
    cs = (np.arange(w + 1) * W) // w
    out = np.empty((h, w), dtype=img.dtype)
    for r in range(h):
        r0, r1 = rs[r], max(rs[r + 1], rs[r] + 1)
        for c in range(w):
            c0, c1 = cs[c], max(cs[c + 1], cs[c] + 1)
            out[r, c] = img[r0:r1, c0:c1].max()
    return out


@functools.lru_cache(maxsize=8)
def _alphabet(alphabet_size, font_seed):
    return render_alphabet(alphabet_size, font_seed)


# ---------------------------------------------------------------------------
# background: a pure function of the prompt tokens


def background_from_tokens(tokens, size: int) -> np.ndarray:
    """(H, W, 3) float32 in [0, 1]; fully determined by the tokens."""
    family, color_i, variant = tokens[0], tokens[1] - 3, tokens[2] - 9
    if not (0 <= family < N_FAMILIES and 0 <= color_i < N_COLORS and 0 <= variant < N_VARIANTS):
        raise ValueError(f"bad prompt tokens {tokens}")
    base = _PALETTE[color_i]
    alt = 0.65 * base + 0.35 * _PALETTE[(color_i + 2) % N_COLORS]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    if family == 0:  # gradient
        ang = np.pi * variant / N_VARIANTS
        g = np.cos(ang) * xx + np.sin(ang) * yy
        g = (g - g.min()) / max(g.max() - g.min(), 1e-6)
        img = base + (alt - base) * g[..., None]
    elif family == 1:  # stripes
        period = 6 + 2 * variant
        phase = (xx + 0.5 * yy) * size
        img = np.where(((phase // period) % 2 == 0)[..., None], base, alt)
    else:  # blobs
        rng = RngStream(variant, "bg/blobs")
        img = np.broadcast_to(base, (size, size, 3)).copy()
        for _ in range(4 + variant % 3):
            cx, cy = rng.uniform(0.1, 0.9, shape=2)
            r = rng.uniform(0.10, 0.25)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            w = np.exp(-d2 / (2 * r * r))
            img = img + (alt - base) * w[..., None]
        img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# subject shapes


def _ellipse_mask(size, cx, cy, rx, ry):
    yy, xx = np.mgrid[0:size, 0:size]
    return (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0).astype(np.float32)


def _polygon_mask(size, cx, cy, radii, angles):
    pts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for r, a in zip(radii, angles)]
    im = Image.new("L", (size, size), 0)
    ImageDraw.Draw(im).polygon(pts, fill=255)
    return (np.asarray(im) > 0).astype(np.float32)


def _make_subject(rng: RngStream, cfg: SynthConfig):
    size = cfg.image_size
    lo, hi = cfg.subject_area
    for _ in range(50):
        cx = rng.uniform(0.32, 0.68) * size
        cy = rng.uniform(0.32, 0.68) * size
        if rng.uniform() < 0.5:
            rx = rng.uniform(0.12, 0.28) * size
            ry = rng.uniform(0.12, 0.28) * size
            mask = _ellipse_mask(size, cx, cy, rx, ry)
        else:
            k = 5 + int(rng.integers(0, 4))
            angles = np.sort(rng.uniform(0, 2 * np.pi, shape=k))
            radii = rng.uniform(0.10, 0.27, shape=k) * size
            mask = _polygon_mask(size, cx, cy, radii, angles)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask, (cx, cy)
    raise PlacementError("could not construct a subject in the area budget")


def _draw_subject(img, mask, rng: RngStream):
    """Fill the subject with a solid color plus shading and a 2-4 px logo mark."""
    color = rng.uniform(0.15, 0.9, shape=3).astype(np.float32)
    size = img.shape[0]
    yy = np.mgrid[0:size, 0:size][0] / (size - 1)
    shade = (0.85 + 0.3 * yy)[..., None]
    m = mask[..., None]
    img[:] = img * (1 - m) + np.clip(color * shade, 0, 1) * m
    # logo mark: a small block of the complementary color inside the subject
    ys, xs = np.nonzero(mask)
    interior = [(y, x) for y, x in zip(ys, xs)
                if mask[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2].all()]
    if interior:
        y, x = interior[int(rng.integers(0, len(interior)))]
        s = 2 + int(rng.integers(0, 3))
        y0, x0 = min(y, size - s), min(x, size - s)
        block = mask[y0:y0 + s, x0:x0 + s][..., None]
        img[y0:y0 + s, x0:x0 + s] = (
            img[y0:y0 + s, x0:x0 + s] * (1 - block) + (1.0 - color) * block
        )
    return color


# ---------------------------------------------------------------------------
# text


def _boxes_overlap(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return not (ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0)


def _text_color(region):
    """Pure white or black, whichever the local background's midpoint
    binarization separates cleanly; None if neither polarity has margin."""
    lum = region @ _LUM
    lo, hi = float(lum.min()), float(lum.max())
    margin_white = 1.0 - (2 * hi - lo)
    margin_black = 2 * lo - hi
    if max(margin_white, margin_black) < 0.07:
        return None
    v = 1.0 if margin_white >= margin_black else 0.0
    return np.full(3, v, dtype=np.float32)


def _place_box(rng, size, w, h, taken, img=None, tries=100):
    """A free (and, given `img`, contrast-feasible) box; (box, color)."""
    for _ in range(tries):
        x0 = int(rng.integers(1, size - w))
        y0 = int(rng.integers(1, size - h))
        box = (x0, y0, x0 + w, y0 + h)
        if any(_boxes_overlap(box, t) for t in taken):
            continue
        if img is None:
            return box, None
        color = _text_color(img[y0:y0 + h, x0:x0 + w])
        if color is not None:
            return box, color
    raise PlacementError(f"no free {w}x{h} box after {tries} tries")


def _draw_text_line(img, content, box, color, glyphs):
    """Render chars into equal cells of `box` in a solid color."""
    x0, y0, x1, y1 = box
    n = len(content)
    cw = (x1 - x0) // n
    ch = y1 - y0
    for i, cid in enumerate(content):
        cell = scale_nearest(glyphs[cid], ch, cw)
        sl = img[y0:y1, x0 + i * cw:x0 + (i + 1) * cw]
        sl[:] = sl * (1 - cell[..., None]) + color * cell[..., None]


def _norm_box(box, size):
    x0, y0, x1, y1 = box
    return (x0 / size, y0 / size, x1 / size, y1 / size)


def _pixel_box(nbox, size):
    return tuple(int(round(c * size)) for c in nbox)


# ---------------------------------------------------------------------------
# sample assembly


def synth_sample(seed: int, cfg: SynthConfig = None) -> PosterSample:
    cfg = cfg or SynthConfig()
    size = cfg.image_size
    rng = RngStream(seed, "sample")
    tokens = [
        int(rng.integers(0, N_FAMILIES)),
        3 + int(rng.integers(0, N_COLORS)),
        9 + int(rng.integers(0, N_VARIANTS)),
    ]
    img = background_from_tokens(tokens, size).copy()
    mask, _ = _make_subject(rng, cfg)
    _draw_subject(img, mask, rng)

    glyphs = _alphabet(cfg.alphabet_size, cfg.font_seed)
    ys, xs = np.nonzero(mask)
    taken = [(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)]

    n_lines = cfg.min_lines + int(rng.integers(0, cfg.max_lines - cfg.min_lines + 1))
    lines = []
    for _ in range(n_lines):
        n = cfg.min_chars + int(rng.integers(0, cfg.max_chars - cfg.min_chars + 1))
        cw = min(10, max(6, (size - 8) // n))
        ch = cw + int(rng.integers(0, 3))
        box, color = _place_box(rng, size, n * cw, ch, taken, img=img)
        taken.append(box)
        content = [int(c) for c in rng.integers(0, cfg.alphabet_size, shape=n)]
        _draw_text_line(img, content, box, color, glyphs)
        lines.append(TextLine(content=content, bbox=_norm_box(box, size)))

    excluded = []
    if rng.uniform() < cfg.excluded_p:
        n = 1 + int(rng.integers(0, 2))
        cw = 4
        try:
            box, color = _place_box(rng, size, n * cw, cw + 1, taken, img=img, tries=30)
        except PlacementError:
            box = None
        if box is not None:
            taken.append(box)
            content = [int(c) for c in rng.integers(0, cfg.alphabet_size, shape=n)]
            _draw_text_line(img, content, box, color, glyphs)
            excluded.append(_norm_box(box, size))

    chw = np.ascontiguousarray(img.transpose(2, 0, 1)) * 2.0 - 1.0
    return PosterSample(
        image=chw.astype(np.float32),
        mask=mask,
        prompt_tokens=tokens,
        spec=TextSpec(lines=lines),
        excluded_boxes=excluded,
        seed=seed,
    )


def synth_extension_pair(seed: int, cfg: SynthConfig = None) -> ExtensionPair:
    """A clean sample and a copy whose subject grew a protrusion lobe."""
    cfg = cfg or SynthConfig()
    clean = synth_sample(seed, cfg)
    rng = RngStream(seed, "extension")
    size = cfg.image_size
    mask = clean.mask
    area = mask.sum()
    lo, hi = cfg.protrusion_ratio

    # boundary pixels: subject cells with a background neighbor
    inner = mask.astype(bool)
    er = inner & np.roll(inner, 1, 0) & np.roll(inner, -1, 0) \
        & np.roll(inner, 1, 1) & np.roll(inner, -1, 1)
    by, bx = np.nonzero(inner & ~er)
    img = np.ascontiguousarray((clean.image.transpose(1, 2, 0) + 1.0) / 2.0)
    for _ in range(100):
        i = int(rng.integers(0, len(by)))
        cy, cx = float(by[i]), float(bx[i])
        r = rng.uniform(2.0, 0.25 * np.sqrt(area))
        lobe = _ellipse_mask(size, cx, cy, r, r * rng.uniform(0.7, 1.4))
        prot = np.clip(lobe - mask, 0, 1)
        ratio = prot.sum() / area
        if lo <= ratio <= hi:
            break
    else:
        raise PlacementError("no protrusion in the ratio budget")

    sub_color = img[inner].mean(axis=0)
    jitter = rng.uniform(-0.05, 0.05, shape=3).astype(np.float32)
    p = prot[..., None]
    img2 = img * (1 - p) + np.clip(sub_color + jitter, 0, 1) * p
    ext_image = (np.ascontiguousarray(img2.transpose(2, 0, 1)) * 2.0 - 1.0).astype(np.float32)
    extended = PosterSample(
        image=ext_image,
        mask=mask,  # the detector sees the original subject mask
        prompt_tokens=clean.prompt_tokens,
        spec=clean.spec,
        excluded_boxes=clean.excluded_boxes,
        seed=seed,
        fg_extended=True,
        true_mask=np.clip(mask + prot, 0, 1),
    )
    return ExtensionPair(clean=clean, extended=extended)


# ---------------------------------------------------------------------------
# file IO


def _to_u8(img_chw):
    x = (img_chw.transpose(1, 2, 0) + 1.0) * 0.5
    return (np.clip(x, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def save_image(path, img_chw):
    Image.fromarray(_to_u8(img_chw), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    x = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(x.transpose(2, 0, 1)) * 2.0 - 1.0


def save_mask(path, mask):
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.float32)


def sample_annotation(s: PosterSample) -> dict:
    rec = {
        "seed": int(s.seed),
        "prompt_tokens": [int(t) for t in s.prompt_tokens],
        "texts": [
            {"content": [int(c) for c in ln.content], "bbox": [float(v) for v in ln.bbox]}
            for ln in s.spec.lines
        ],
        "excluded_boxes": [[float(v) for v in b] for b in s.excluded_boxes],
    }
    if s.fg_extended:
        rec["fg_extended"] = True
    return rec


def spec_from_annotation(rec: dict) -> TextSpec:
    return TextSpec(lines=[TextLine(content=list(t["content"]), bbox=tuple(t["bbox"]))
                           for t in rec["texts"]])


def write_dataset(out_dir, count, split, seed0, cfg: SynthConfig = None,
                  extensions: bool = False) -> dict:
    """Write `count` samples (or clean/extended pairs) and a manifest."""
    cfg = cfg or SynthConfig()
    d = os.path.join(out_dir, split)
    os.makedirs(d, exist_ok=True)
    ids, seeds = [], []

    def emit(sid, s: PosterSample):
        save_image(os.path.join(d, f"{sid}.png"), s.image)
        save_mask(os.path.join(d, f"{sid}.mask.png"), s.mask)
        rec = sample_annotation(s)
        if s.fg_extended:
            rec["true_mask_file"] = f"{sid}.truemask.png"
            save_mask(os.path.join(d, rec["true_mask_file"]), s.true_mask)
        with open(os.path.join(d, f"{sid}.json"), "w") as f:
            json.dump(rec, f, sort_keys=True, indent=1)
        ids.append(sid)
        seeds.append(int(s.seed))

    i = 0
    made = 0
    while made < count:
        seed = derive_seed(seed0, f"{split}/{i}")
        i += 1
        try:
            if extensions:
                pair = synth_extension_pair(seed, cfg)
                emit(f"{made:06d}a", pair.clean)
                emit(f"{made:06d}b", pair.extended)
            else:
                emit(f"{made:06d}", synth_sample(seed, cfg))
        except PlacementError as e:
            warnings.warn(f"seed {seed} rejected: {e}")
            continue
        made += 1

    manifest = {
        "split": split,
        "count": count,
        "extensions": extensions,
        "image_size": cfg.image_size,
        "alphabet_size": cfg.alphabet_size,
        "font_seed": cfg.font_seed,
        "ids": ids,
        "seeds": seeds,
    }
    with open(os.path.join(d, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return manifest


def load_sample(split_dir, sid) -> PosterSample:
    with open(os.path.join(split_dir, f"{sid}.json")) as f:
        rec = json.load(f)
    mask = load_mask(os.path.join(split_dir, f"{sid}.mask.png"))
    true_mask = mask
    if rec.get("true_mask_file"):
        true_mask = load_mask(os.path.join(split_dir, rec["true_mask_file"]))
    return PosterSample(
        image=load_image(os.path.join(split_dir, f"{sid}.png")),
        mask=mask,
        prompt_tokens=list(rec["prompt_tokens"]),
        spec=spec_from_annotation(rec),
        excluded_boxes=[tuple(b) for b in rec.get("excluded_boxes", [])],
        seed=rec.get("seed", 0),
        fg_extended=bool(rec.get("fg_extended", False)),
        true_mask=true_mask,
    )


def load_split(data_dir, split) -> list:
    d = os.path.join(data_dir, split)
    with open(os.path.join(d, "manifest.json")) as f:
        manifest = json.load(f)
    return [load_sample(d, sid) for sid in manifest["ids"]]
