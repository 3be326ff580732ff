"""Character-level visual text representation.

A procedural alphabet of stroke glyphs stands in for a real typeface. Each
character is rendered once, encoded by a small convolutional encoder with a
spatial mean-pool, and cached in a dictionary so conditioning never needs
online rendering. Conditioning tokens concatenate the glyph feature with
sinusoidal order and bounding-box encodings along the feature dimension.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream

GLYPH_GRID = 16
GLYPH_DIM = 32  # c: encoder feature width
RANK_DIM = 16  # d_r
BBOX_DIM_PER_COORD = 16  # p_bbox = 4 coords x 16 = 64
BBOX_DIM = 4 * BBOX_DIM_PER_COORD
TOKEN_DIM = GLYPH_DIM + RANK_DIM + BBOX_DIM

MAX_LINES = 7
MAX_CHARS_PER_LINE = 16

GLYPH_MAGIC = b"PMGLY001"

_STEPS = np.array([(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)])


def render_char_glyph(char_id: int, font_seed: int = 0, grid: int = GLYPH_GRID,
                      alphabet_size: int | None = None) -> np.ndarray:
    """Deterministic stroke glyph for one character: a seeded connected random walk.

    Returns a float32 (grid, grid) array in {0, 1} with at least 8 lit pixels.
    """
    if char_id < 0 or (alphabet_size is not None and char_id >= alphabet_size):
        raise ValueError(f"char_id {char_id} out of range")
    rng = RngStream(font_seed, f"glyph/{grid}/{char_id}")
    px = np.zeros((grid, grid), dtype=np.float32)
    lit: list[tuple[int, int]] = []

    def mark(r, c):
        if px[r, c] == 0:
            px[r, c] = 1.0
            lit.append((r, c))

    n_strokes = 2 + int(rng.integers(0, 3))
    lo, hi = 2, grid - 3
    for s in range(n_strokes):
        if lit:
            r, c = lit[int(rng.integers(0, len(lit)))]
        else:
            r = int(rng.integers(lo, hi + 1))
            c = int(rng.integers(lo, hi + 1))
            mark(r, c)
        d = _STEPS[int(rng.integers(0, 8))]
        length = 3 + int(rng.integers(0, 5))
        for _ in range(length):
            # mostly straight strokes, occasional turn
            if rng.uniform() < 0.25:
                d = _STEPS[int(rng.integers(0, 8))]
            r = int(np.clip(r + d[0], 1, grid - 2))
            c = int(np.clip(c + d[1], 1, grid - 2))
            mark(r, c)
    while len(lit) < 8:
        r, c = lit[int(rng.integers(0, len(lit)))]
        d = _STEPS[int(rng.integers(0, 8))]
        r = int(np.clip(r + d[0], 1, grid - 2))
        c = int(np.clip(c + d[1], 1, grid - 2))
        mark(r, c)
    return px


def render_alphabet(alphabet_size: int, font_seed: int = 0, grid: int = GLYPH_GRID) -> np.ndarray:
    """All glyph bitmaps, stacked (alphabet_size, grid, grid)."""
    return np.stack([render_char_glyph(i, font_seed, grid) for i in range(alphabet_size)])


# ---------------------------------------------------------------------------
# glyph encoder f_v: 3 conv layers + spatial mean-pool


def init_glyph_encoder(store, rng: RngStream, prefix: str = "glyph") -> None:
    def conv(name, co, ci, k):
        std = 1.0 / np.sqrt(ci * k * k)
        store.add(f"{prefix}.{name}.w", (rng.normal((co, ci, k, k)) * std).astype(np.float32))
        store.add(f"{prefix}.{name}.b", np.zeros(co, dtype=np.float32))

    conv("conv1", 8, 1, 3)
    conv("conv2", 16, 8, 3)
    conv("conv3", GLYPH_DIM, 16, 3)


def encode_chars(bitmaps, store, prefix: str = "glyph") -> Tensor:
    """Encode (N, G, G) bitmaps to (N, c) features: conv stack then mean over space."""
    x = ad.as_tensor(bitmaps)
    if x.data.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    n, g, _ = x.shape
    x = ad.reshape(x, (n, 1, g, g))
    x = ad.silu(ad.conv2d(x, store[f"{prefix}.conv1.w"], store[f"{prefix}.conv1.b"], stride=2, padding=1))
    x = ad.silu(ad.conv2d(x, store[f"{prefix}.conv2.w"], store[f"{prefix}.conv2.b"], stride=2, padding=1))
    x = ad.conv2d(x, store[f"{prefix}.conv3.w"], store[f"{prefix}.conv3.b"], stride=1, padding=1)
    return ad.mean(x, axis=(2, 3))


def encode_char(bitmap, store, prefix: str = "glyph") -> np.ndarray:
    """Feature vector (c,) for a single glyph bitmap."""
    if bitmap.shape != (GLYPH_GRID, GLYPH_GRID):
        raise ValueError(f"expected ({GLYPH_GRID}, {GLYPH_GRID}) bitmap, got {bitmap.shape}")
    with ad.no_grad():
        return encode_chars(bitmap[None], store, prefix).data[0]


# ---------------------------------------------------------------------------
# glyph dictionary


@dataclass
class GlyphTable:
    dim: int
    features: np.ndarray  # (alphabet_size, dim) float32
    char_ids: np.ndarray = field(default=None)  # (alphabet_size,) uint32

    def __post_init__(self):
        if self.char_ids is None:
            self.char_ids = np.arange(len(self.features), dtype=np.uint32)
        if len(set(self.char_ids.tolist())) != len(self.char_ids):
            raise ValueError("duplicate char_id in glyph table")

    def lookup(self, char_id: int) -> np.ndarray:
        return self.features[int(char_id)]

    def __len__(self):
        return len(self.features)


def build_glyph_table(alphabet_size: int, store, font_seed: int = 0, prefix: str = "glyph") -> GlyphTable:
    """Pre-extract the feature of every character into an immutable dictionary."""
    bitmaps = render_alphabet(alphabet_size, font_seed)
    with ad.no_grad():
        feats = encode_chars(bitmaps, store, prefix).data.astype(np.float32)
    return GlyphTable(dim=feats.shape[1], features=feats)


def save_glyph_table(path, table: GlyphTable) -> None:
    with open(path, "wb") as f:
        f.write(GLYPH_MAGIC)
        f.write(struct.pack("<II", len(table), table.dim))
        for cid, vec in zip(table.char_ids, table.features):
            f.write(struct.pack("<I", int(cid)))
            f.write(vec.astype("<f4").tobytes())


def load_glyph_table(path) -> GlyphTable:
    with open(path, "rb") as f:
        if f.read(8) != GLYPH_MAGIC:
            raise ValueError("bad glyph dictionary magic")
        count, dim = struct.unpack("<II", f.read(8))
        ids = np.empty(count, dtype=np.uint32)
        feats = np.empty((count, dim), dtype=np.float32)
        for i in range(count):
            (ids[i],) = struct.unpack("<I", f.read(4))
            feats[i] = np.frombuffer(f.read(4 * dim), dtype="<f4")
    return GlyphTable(dim=dim, features=feats, char_ids=ids)


# ---------------------------------------------------------------------------
# positional encodings and token assembly


def sinusoidal_embed(value: float, dim: int) -> np.ndarray:
    """Interleaved sin/cos over a geometric frequency ladder (base 10000)."""
    if dim % 2:
        raise ValueError("sinusoidal embedding dim must be even")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    out = np.empty(dim, dtype=np.float32)
    out[0::2] = np.sin(value * freqs)
    out[1::2] = np.cos(value * freqs)
    return out


@dataclass
class TextLine:
    content: list[int]  # char ids
    bbox: tuple[float, float, float, float]  # (x0, y0, x1, y1), normalized


@dataclass
class TextSpec:
    lines: list[TextLine]

    def __post_init__(self):
        if len(self.lines) > MAX_LINES:
            raise ValueError(f"at most {MAX_LINES} text lines")
        for ln in self.lines:
            if len(ln.content) > MAX_CHARS_PER_LINE:
                raise ValueError(f"at most {MAX_CHARS_PER_LINE} chars per line")
            x0, y0, x1, y1 = ln.bbox
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise ValueError(f"bad bbox {ln.bbox}")

    def total_chars(self):
        return sum(len(ln.content) for ln in self.lines)


def _bbox_encoding(bbox) -> np.ndarray:
    return np.concatenate([sinusoidal_embed(c, BBOX_DIM_PER_COORD) for c in bbox])


def token_positions(spec: TextSpec, line_level: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """(char_ids or line pooling rows, positional part) for a spec.

    Char level: one row per character, positional part = p_rank(char index in
    line) + p_bbox(line bbox). Line level: one row per line, rank encodes the
    line index.
    """
    pos = []
    ids = []
    for li, ln in enumerate(spec.lines):
        pb = _bbox_encoding(ln.bbox)
        if line_level:
            pos.append(np.concatenate([sinusoidal_embed(li, RANK_DIM), pb]))
        else:
            for ci, cid in enumerate(ln.content):
                ids.append(cid)
                pos.append(np.concatenate([sinusoidal_embed(ci, RANK_DIM), pb]))
    if not pos:
        return np.zeros(0, dtype=np.int64), np.zeros((0, RANK_DIM + BBOX_DIM), dtype=np.float32)
    return np.asarray(ids, dtype=np.int64), np.stack(pos).astype(np.float32)


def line_pool_matrix(spec: TextSpec) -> np.ndarray:
    """(n_lines, n_chars) averaging matrix for the line-level baseline."""
    n = spec.total_chars()
    m = np.zeros((len(spec.lines), n), dtype=np.float32)
    off = 0
    for li, ln in enumerate(spec.lines):
        k = len(ln.content)
        m[li, off : off + k] = 1.0 / max(k, 1)
        off += k
    return m


def text_representation(spec: TextSpec, table: GlyphTable, line_level: bool = False) -> np.ndarray:
    """Assemble conditioning tokens (n_tokens, TOKEN_DIM) from the dictionary.

    One token per character ordered (line order, char order); with
    `line_level` one mean-pooled token per line instead.
    """
    for ln in spec.lines:
        for cid in ln.content:
            if cid < 0 or cid >= len(table):
                raise KeyError(f"char id {cid} missing from glyph table")
    ids, pos = token_positions(spec, line_level=False)
    feats = table.features[ids] if len(ids) else np.zeros((0, table.dim), dtype=np.float32)
    if line_level:
        pool = line_pool_matrix(spec)
        feats = pool @ feats
        _, pos = token_positions(spec, line_level=True)
    return np.concatenate([feats, pos], axis=1).astype(np.float32)


def text_tokens_from_encoder(spec: TextSpec, glyph_feats: Tensor, line_level: bool = False) -> Tensor:
    """Differentiable token assembly from live encoder features (alphabet_size, c)."""
    ids, pos = token_positions(spec, line_level=False)
    feats = ad.embedding(glyph_feats, ids)
    if line_level:
        pool = line_pool_matrix(spec)
        feats = ad.matmul(Tensor(pool), feats)
        _, pos = token_positions(spec, line_level=True)
    return ad.concat([feats, Tensor(pos)], axis=1)


# ---------------------------------------------------------------------------
# adapter: linear + layer normalization up to model width


def init_adapter(store, rng: RngStream, model_width: int, prefix: str = "adapter") -> None:
    std = 1.0 / np.sqrt(TOKEN_DIM)
    store.add(f"{prefix}.w", (rng.normal((TOKEN_DIM, model_width)) * std).astype(np.float32))
    store.add(f"{prefix}.b", np.zeros(model_width, dtype=np.float32))
    store.add(f"{prefix}.ln.g", np.ones(model_width, dtype=np.float32))
    store.add(f"{prefix}.ln.b", np.zeros(model_width, dtype=np.float32))


def adapt(tokens, store, prefix: str = "adapter") -> Tensor:
    """Project tokens (..., TOKEN_DIM) to model width, then layernorm with affine."""
    tokens = ad.as_tensor(tokens)
    if tokens.shape[-1] != store[f"{prefix}.w"].shape[0]:
        raise ad.ShapeError(
            f"adapter input dim {tokens.shape[-1]} != {store[f'{prefix}.w'].shape[0]}"
        )
    h = ad.add(ad.matmul(tokens, store[f"{prefix}.w"]), store[f"{prefix}.b"])
    h = ad.layernorm(h)
    return ad.add(ad.mul(h, store[f"{prefix}.ln.g"]), store[f"{prefix}.ln.b"])
