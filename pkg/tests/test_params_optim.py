"""Parameter store trainability, checkpoint round-trips, and an AdamW step
checked against a hand-computed update.
"""
import numpy as np
import pytest

from posterkit.optim import AdamW
from posterkit.params import ParamStore, load_checkpoint, save_checkpoint


def test_store_add_and_duplicate():
    s = ParamStore()
    s.add("a.w", np.zeros(3))
    with pytest.raises(KeyError):
        s.add("a.w", np.zeros(3))
    assert "a.w" in s and s["a.w"].data.shape == (3,)


def test_set_trainable_prefixes():
    s = ParamStore()
    s.add("base.w", np.zeros(2))
    s.add("text.w", np.zeros(2))
    s.add("text.b", np.zeros(2))
    s.set_trainable(["text."])
    assert not s.is_trainable("base.w")
    assert s.is_trainable("text.w") and s["text.w"].requires_grad
    assert not s["base.w"].requires_grad
    assert {n for n, _ in s.trainable_items()} == {"text.w", "text.b"}


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(7),
        "scalar": np.float32(2.5).reshape(()),
    }
    p = tmp_path / "ck.bin"
    save_checkpoint(p, arrays)
    back = load_checkpoint(p)
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], np.asarray(arrays[k]))
        assert back[k].dtype == np.asarray(arrays[k]).dtype


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_checkpoint_bytes_deterministic(tmp_path):
    arrays = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, arrays)
    save_checkpoint(p2, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_adamw_first_step_matches_hand_formula():
    # one step from zero state: m = (1-b1) g, v = (1-b2) g^2, bias-corrected
    # update is exactly lr * g / (|g| + eps) elementwise
    lr, eps = 1e-3, 1e-8
    g = np.array([0.3, -2.0, 0.001], dtype=np.float32)
    s = ParamStore()
    p = s.add("w", np.zeros(3, dtype=np.float32))
    p.grad = g.copy()
    AdamW(lr=lr, eps=eps).step(s)
    expect = -lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(p.data, expect, rtol=1e-6)


def test_adamw_two_steps_hand_oracle():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    g1, g2 = 0.5, -0.25
    opt = AdamW(lr=lr, betas=(b1, b2), eps=eps)
    s = ParamStore()
    p = s.add("w", np.array([1.0], dtype=np.float64))
    p.grad = np.array([g1])
    opt.step(s)
    m = (1 - b1) * g1
    v = (1 - b2) * g1 * g1
    x = 1.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    p.grad = np.array([g2])
    opt.step(s)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 * g2
    x = x - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
    np.testing.assert_allclose(p.data, [x], rtol=1e-10)


def test_adamw_weight_decay_decoupled():
    s = ParamStore()
    p = s.add("w", np.array([2.0], dtype=np.float64))
    p.grad = np.array([0.0])
    AdamW(lr=0.5, weight_decay=0.1).step(s)
    # zero gradient: only the decay term acts, x -= lr * wd * x
    np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.1 * 2.0])


def test_adamw_skips_frozen_and_requires_grads():
    s = ParamStore()
    s.add("a.w", np.ones(2))
    s.add("b.w", np.ones(2))
    s.set_trainable(["a."])
    s["a.w"].grad = np.ones(2, dtype=np.float32)
    before = s["b.w"].data.copy()
    AdamW(lr=0.1).step(s)
    np.testing.assert_array_equal(s["b.w"].data, before)
    s["a.w"].grad = None
    with pytest.raises(ValueError):
        AdamW(lr=0.1).step(s)


def test_state_dict_round_trip():
    s = ParamStore()
    s.add("x", np.arange(3, dtype=np.float32))
    sd = s.state_dict()
    sd["x"][0] = 99  # state dict must be a copy
    assert s["x"].data[0] == 0
    s.load_state_dict({"x": np.array([5, 6, 7], dtype=np.float32)})
    np.testing.assert_array_equal(s["x"].data, [5, 6, 7])
    with pytest.raises(KeyError):
        s.load_state_dict({"nope": np.zeros(1)})
