"""Glyph rendering, the feature dictionary, positional encodings, and the
token assembly used to condition text rendering.
"""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posterkit import autodiff as ad
from posterkit import glyphs as gl
from posterkit.params import ParamStore
from posterkit.rng import RngStream


def _store(seed=0):
    s = ParamStore()
    gl.init_glyph_encoder(s, RngStream(seed, "glyph/init"))
    return s


# ---------------------------------------------------------------------------
# rendering


def test_glyphs_deterministic():
    a = gl.render_alphabet(16, font_seed=3)
    b = gl.render_alphabet(16, font_seed=3)
    np.testing.assert_array_equal(a, b)


def test_glyphs_distinct_and_binary():
    bm = gl.render_alphabet(16)
    assert bm.shape == (16, gl.GLYPH_GRID, gl.GLYPH_GRID)
    assert set(np.unique(bm).tolist()) <= {0.0, 1.0}
    for i in range(16):
        assert bm[i].sum() >= 8
        for j in range(i + 1, 16):
            assert not np.array_equal(bm[i], bm[j]), f"glyphs {i} and {j} collide"


def test_glyph_id_out_of_range():
    with pytest.raises(ValueError):
        gl.render_char_glyph(-1)
    with pytest.raises(ValueError):
        gl.render_char_glyph(5, alphabet_size=5)


def test_font_seed_changes_glyphs():
    assert not np.array_equal(gl.render_alphabet(8, 0), gl.render_alphabet(8, 1))


# ---------------------------------------------------------------------------
# encoder and dictionary


def test_encoder_shapes_and_grad():
    store = _store()
    bm = gl.render_alphabet(4)
    store.set_trainable(["glyph."])
    feats = gl.encode_chars(bm, store)
    assert feats.shape == (4, gl.GLYPH_DIM)
    ad.backward(ad.sum_(ad.mul(feats, feats)))
    assert store["glyph.conv1.w"].grad is not None


def test_encode_char_shape_validation():
    store = _store()
    with pytest.raises(ValueError):
        gl.encode_char(np.zeros((4, 4), np.float32), store)
    v = gl.encode_char(gl.render_char_glyph(0), store)
    assert v.shape == (gl.GLYPH_DIM,)


def test_dictionary_matches_live_encoder():
    store = _store()
    table = gl.build_glyph_table(8, store)
    bm = gl.render_alphabet(8)
    with ad.no_grad():
        live = gl.encode_chars(bm, store).data
    np.testing.assert_allclose(table.features, live, rtol=1e-6)


def test_table_round_trip(tmp_path):
    store = _store()
    table = gl.build_glyph_table(6, store)
    p = tmp_path / "glyphs.bin"
    gl.save_glyph_table(p, table)
    back = gl.load_glyph_table(p)
    assert back.dim == table.dim
    np.testing.assert_array_equal(back.features, table.features)
    np.testing.assert_array_equal(back.char_ids, table.char_ids)


def test_table_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"WRONG!!!")
    with pytest.raises(ValueError):
        gl.load_glyph_table(p)


def test_table_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        gl.GlyphTable(dim=2, features=np.zeros((2, 2), np.float32),
                      char_ids=np.array([1, 1], dtype=np.uint32))


# ---------------------------------------------------------------------------
# positional encodings


def test_sinusoidal_embed_structure():
    v = gl.sinusoidal_embed(0.0, 8)
    np.testing.assert_allclose(v[0::2], 0.0, atol=1e-7)  # sin(0)
    np.testing.assert_allclose(v[1::2], 1.0, atol=1e-7)  # cos(0)
    with pytest.raises(ValueError):
        gl.sinusoidal_embed(1.0, 7)


def test_sinusoidal_embed_distinguishes_values():
    a, b = gl.sinusoidal_embed(1.0, 16), gl.sinusoidal_embed(2.0, 16)
    assert np.abs(a - b).max() > 0.1


def _spec():
    return gl.TextSpec(lines=[
        gl.TextLine(content=[1, 2, 3], bbox=(0.1, 0.1, 0.5, 0.2)),
        gl.TextLine(content=[4, 5], bbox=(0.2, 0.5, 0.8, 0.7)),
    ])


def test_spec_validation():
    with pytest.raises(ValueError):
        gl.TextSpec(lines=[gl.TextLine(content=[0], bbox=(0.5, 0.1, 0.2, 0.2))])
    with pytest.raises(ValueError):
        gl.TextSpec(lines=[gl.TextLine(content=list(range(17)), bbox=(0.1, 0.1, 0.9, 0.2))])
    with pytest.raises(ValueError):
        gl.TextSpec(lines=[gl.TextLine(content=[0], bbox=(0, 0.1, 0.2, 0.2))] * 8)


def test_token_positions_char_level():
    ids, pos = gl.token_positions(_spec())
    assert ids.tolist() == [1, 2, 3, 4, 5]
    assert pos.shape == (5, gl.RANK_DIM + gl.BBOX_DIM)
    # same line shares the bbox part; rank part differs by char index
    np.testing.assert_array_equal(pos[0, gl.RANK_DIM:], pos[2, gl.RANK_DIM:])
    assert not np.array_equal(pos[0, :gl.RANK_DIM], pos[1, :gl.RANK_DIM])
    # chars with equal rank share the rank encoding across lines
    np.testing.assert_array_equal(pos[0, :gl.RANK_DIM], pos[3, :gl.RANK_DIM])


def test_token_positions_line_level():
    _, pos = gl.token_positions(_spec(), line_level=True)
    assert pos.shape == (2, gl.RANK_DIM + gl.BBOX_DIM)


def test_line_pool_matrix_rows_average():
    m = gl.line_pool_matrix(_spec())
    assert m.shape == (2, 5)
    np.testing.assert_allclose(m.sum(axis=1), [1.0, 1.0])
    np.testing.assert_allclose(m[0, :3], 1 / 3)
    np.testing.assert_allclose(m[1, 3:], 1 / 2)


def test_text_representation_char_vs_line_counts():
    store = _store()
    table = gl.build_glyph_table(8, store)
    spec = _spec()
    char_tokens = gl.text_representation(spec, table)
    line_tokens = gl.text_representation(spec, table, line_level=True)
    assert char_tokens.shape == (5, gl.TOKEN_DIM)
    assert line_tokens.shape == (2, gl.TOKEN_DIM)
    # line features are the mean of their chars' features
    np.testing.assert_allclose(line_tokens[0, :gl.GLYPH_DIM],
                               char_tokens[:3, :gl.GLYPH_DIM].mean(0), rtol=1e-5)


def test_text_representation_unknown_char():
    store = _store()
    table = gl.build_glyph_table(4, store)
    spec = gl.TextSpec(lines=[gl.TextLine(content=[9], bbox=(0.1, 0.1, 0.3, 0.2))])
    with pytest.raises(KeyError):
        gl.text_representation(spec, table)


def test_tokens_from_encoder_match_dictionary():
    store = _store()
    table = gl.build_glyph_table(8, store)
    spec = _spec()
    feats = gl.encode_chars(gl.render_alphabet(8), store)
    live = gl.text_tokens_from_encoder(spec, feats).data
    frozen = gl.text_representation(spec, table)
    np.testing.assert_allclose(live, frozen, rtol=1e-5, atol=1e-6)


def test_adapter_shape_check_and_norm():
    store = _store()
    rng = RngStream(0, "adapter")
    gl.init_adapter(store, rng, 32)
    tok = np.random.default_rng(0).standard_normal((3, gl.TOKEN_DIM)).astype(np.float32)
    out = gl.adapt(tok, store)
    assert out.shape == (3, 32)
    with pytest.raises(ad.ShapeError):
        gl.adapt(np.zeros((3, 7), np.float32), store)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_glyph_rendering_reproducible(font_seed):
    a = gl.render_char_glyph(3, font_seed=font_seed)
    b = gl.render_char_glyph(3, font_seed=font_seed)
    np.testing.assert_array_equal(a, b)
