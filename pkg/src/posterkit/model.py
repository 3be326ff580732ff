"""Pixel-space rectified-flow transformer with two control branches.

The base model is a stack of MM-DiT blocks (joint attention over image
patches and context tokens, adaLN time conditioning). A text-rendering
branch conditioned on character tokens and a scene branch conditioned on
subject mask + masked image mirror the base blocks; their per-block outputs
pass zero-initialized projections and are added to the base image stream,
so a fresh model is exactly the base model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import glyphs
from .autodiff import Tensor
from .rng import RngStream

NEG_BIAS = -1e9  # additive key-mask value for padded context tokens


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    patch: int = 8
    width: int = 128
    heads: int = 4
    base_blocks: int = 8
    scene_blocks: int = 8
    text_blocks: int = 4
    prompt_vocab: int = 16
    steps: int = 28  # T' sampler steps
    cfg_scale: float = 5.0
    token_dim: int = glyphs.TOKEN_DIM

    def __post_init__(self):
        if self.scene_blocks != self.base_blocks:
            raise ValueError("scene branch must match base depth")
        if self.text_blocks != math.ceil(self.base_blocks / 2):
            raise ValueError("text branch depth must be ceil(base/2) so the merge rule is total")
        if self.image_size % self.patch:
            raise ValueError("image size must be divisible by patch size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def n_patches(self):
        return (self.image_size // self.patch) ** 2

    @property
    def null_prompt_id(self):
        return self.prompt_vocab


@dataclass
class ControlBundle:
    """Conditioning for one batch: text tokens, prompt ids, subject mask, masked image.

    `text_tokens` may be a plain array (inference, from the dictionary) or a
    Tensor (training, through the live glyph encoder). All-zero text tokens
    mean the text condition was dropped.
    """

    text_tokens: object  # (B, S_txt, token_dim)
    prompt_ids: np.ndarray  # (B, P) int
    mask: np.ndarray  # (B, 1, H, W), 1 = known region
    masked_image: np.ndarray  # (B, C, H, W)
    token_mask: np.ndarray = None  # (B, S_txt) bool, False = padding

    def __post_init__(self):
        if self.token_mask is None:
            s = self.text_tokens.shape
            self.token_mask = np.ones((s[0], s[1]), dtype=bool)


# ---------------------------------------------------------------------------
# parameter construction


def _linear(store, rng, name, din, dout, zero=False):
    if zero:
        w = np.zeros((din, dout), dtype=np.float32)
    else:
        w = (rng.normal((din, dout)) / np.sqrt(din)).astype(np.float32)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(dout, dtype=np.float32))


def _block_parts(stream, ctx_out=True):
    parts = ["mod", "q", "k", "v"]
    if stream == "img" or ctx_out:
        parts += ["o", "mlp1", "mlp2"]
    return parts


def _init_block(store, rng, prefix, width, ctx_out=True):
    """One joint-attention block. The last block of a stack drops the
    context-stream output projection and MLP: that stream's output is
    discarded, so the parameters would never receive gradients."""
    dims = {"mod": (width, 6 * width), "q": (width, width), "k": (width, width),
            "v": (width, width), "o": (width, width),
            "mlp1": (width, 4 * width), "mlp2": (4 * width, width)}
    for s in ("img", "ctx"):
        for p in _block_parts(s, ctx_out):
            _linear(store, rng, f"{prefix}.{s}.{p}", *dims[p], zero=(p == "mod"))


def init_base_params(cfg: ModelConfig, store, rng: RngStream) -> None:
    w, p, c = cfg.width, cfg.patch, cfg.channels
    _linear(store, rng, "base.patch", p * p * c, w)
    store.add("base.pos", (rng.normal((cfg.n_patches, w)) * 0.02).astype(np.float32))
    _linear(store, rng, "base.time1", w, w)
    _linear(store, rng, "base.time2", w, w)
    store.add("base.prompt", (rng.normal((cfg.prompt_vocab + 1, w)) * 0.02).astype(np.float32))
    for i in range(cfg.base_blocks):
        _init_block(store, rng, f"base.b{i}", w, ctx_out=i < cfg.base_blocks - 1)
    _linear(store, rng, "base.final.mod", w, 2 * w, zero=True)
    _linear(store, rng, "base.final", w, p * p * c, zero=True)


def add_control_branches(cfg: ModelConfig, store, rng: RngStream, init: str = "copy") -> None:
    """Create scene and text branch parameters.

    `init="copy"` clones the current base block weights (the branch starts as
    a twin of the base); `init="random"` draws fresh weights. Zero output
    projections guarantee the branches are inert either way.
    """
    w, p, c = cfg.width, cfg.patch, cfg.channels

    def branch_block(branch, i, ctx_out):
        _init_block(store, rng, f"{branch}.b{i}", w, ctx_out=ctx_out)
        if init == "copy":
            for s in ("img", "ctx"):
                for part in _block_parts(s, ctx_out):
                    for wb in ("w", "b"):
                        name = f"{branch}.b{i}.{s}.{part}.{wb}"
                        store[name].data = store[f"base.b{i}.{s}.{part}.{wb}"].data.copy()

    # text branch: same patch input as the base
    _linear(store, rng, "text.patch", p * p * c, w)
    store.add("text.pos", (rng.normal((cfg.n_patches, w)) * 0.02).astype(np.float32))
    if init == "copy":
        store["text.patch.w"].data = store["base.patch.w"].data.copy()
        store["text.patch.b"].data = store["base.patch.b"].data.copy()
        store["text.pos"].data = store["base.pos"].data.copy()
    for i in range(cfg.text_blocks):
        branch_block("text", i, ctx_out=i < cfg.text_blocks - 1)
        _linear(store, rng, f"text.zero{i}", w, w, zero=True)

    # scene branch: visual input is channel-concat(z_t, mask, masked image)
    cin = 2 * c + 1
    _linear(store, rng, "scene.patch", p * p * cin, w)
    store.add("scene.pos", (rng.normal((cfg.n_patches, w)) * 0.02).astype(np.float32))
    if init == "copy":
        # rows for the z_t channels mirror the base; mask/masked-image rows start at zero
        wmat = np.zeros((p * p * cin, w), dtype=np.float32)
        base_w = store["base.patch.w"].data.reshape(p * p, c, w)
        wmat.reshape(p * p, cin, w)[:, :c] = base_w
        store["scene.patch.w"].data = wmat
        store["scene.patch.b"].data = store["base.patch.b"].data.copy()
        store["scene.pos"].data = store["base.pos"].data.copy()
    for i in range(cfg.scene_blocks):
        branch_block("scene", i, ctx_out=i < cfg.scene_blocks - 1)
        _linear(store, rng, f"scene.zero{i}", w, w, zero=True)


def init_model_params(cfg: ModelConfig, store, rng: RngStream, branches: bool = True,
                      branch_init: str = "copy") -> None:
    init_base_params(cfg, store, rng)
    glyphs.init_adapter(store, rng, cfg.width)
    if branches:
        add_control_branches(cfg, store, rng, init=branch_init)


def has_branches(store) -> bool:
    return "scene.patch.w" in store


# ---------------------------------------------------------------------------
# forward pieces


def _lin(store, name, x):
    return ad.linear(x, store[f"{name}.w"], store[f"{name}.b"])


def patchify(z, cfg: ModelConfig):
    """(B, C, H, W) -> (B, S, p*p*C) row-major patch order."""
    z = ad.as_tensor(z)
    b = z.shape[0]
    c, p = cfg.channels, cfg.patch
    g = cfg.image_size // p
    x = ad.reshape(z, (b, c, g, p, g, p))
    x = ad.transpose(x, (0, 2, 4, 3, 5, 1))
    return ad.reshape(x, (b, g * g, p * p * c))


def unpatchify(x, cfg: ModelConfig, channels=None):
    c = channels or cfg.channels
    p = cfg.patch
    g = cfg.image_size // p
    b = x.shape[0]
    x = ad.reshape(x, (b, g, g, p, p, c))
    x = ad.transpose(x, (0, 5, 1, 3, 2, 4))
    return ad.reshape(x, (b, c, g * p, g * p))


def timestep_embedding(t, cfg: ModelConfig, store):
    """Sinusoidal embedding of continuous time (scaled x1000), then a 2-layer MLP."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float32))
    half = cfg.width // 2
    freqs = (10000.0 ** (-np.arange(half) / half)).astype(np.float32)
    ang = 1000.0 * t[:, None] * freqs[None, :]
    emb = np.empty((t.shape[0], cfg.width), dtype=np.float32)
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    h = ad.silu(_lin(store, "base.time1", Tensor(emb)))
    return _lin(store, "base.time2", h)


def _modulation(store, name, temb, b):
    m = _lin(store, name, temb)  # (B, 6W)
    m = ad.reshape(m, (b, 1, m.shape[-1]))
    return ad.split(m, 6, axis=2)  # shift1, scale1, gate1, shift2, scale2, gate2


def mmdit_block(store, prefix, img, ctx, temb, cfg: ModelConfig, key_bias=None, ctx_out=True):
    """One joint-attention block; returns updated (img, ctx) streams.

    `key_bias` is an additive (B, 1, 1, S_img+S_ctx) mask for padded context
    keys. With ctx_out=False (last block of a stack) the context stream is
    only read, not updated.
    """
    b, si, w = img.shape
    sc = ctx.shape[1]
    im = _modulation(store, f"{prefix}.img.mod", temb, b)
    cm = _modulation(store, f"{prefix}.ctx.mod", temb, b)

    xi = ad.mod_layernorm(img, im[1], im[0])
    xc = ad.mod_layernorm(ctx, cm[1], cm[0])
    q = ad.concat([_lin(store, f"{prefix}.img.q", xi), _lin(store, f"{prefix}.ctx.q", xc)], axis=1)
    k = ad.concat([_lin(store, f"{prefix}.img.k", xi), _lin(store, f"{prefix}.ctx.k", xc)], axis=1)
    v = ad.concat([_lin(store, f"{prefix}.img.v", xi), _lin(store, f"{prefix}.ctx.v", xc)], axis=1)
    out = ad.attention(q, k, v, cfg.heads, bias=key_bias)
    oi = ad.narrow(out, 1, 0, si)
    img = ad.addcmul(img, im[2], _lin(store, f"{prefix}.img.o", oi))
    hi = ad.mod_layernorm(img, im[4], im[3])
    hi = _lin(store, f"{prefix}.img.mlp2", ad.gelu(_lin(store, f"{prefix}.img.mlp1", hi)))
    img = ad.addcmul(img, im[5], hi)
    if not ctx_out:
        return img, None
    oc = ad.narrow(out, 1, si, sc)
    ctx = ad.addcmul(ctx, cm[2], _lin(store, f"{prefix}.ctx.o", oc))
    hc = ad.mod_layernorm(ctx, cm[4], cm[3])
    hc = _lin(store, f"{prefix}.ctx.mlp2", ad.gelu(_lin(store, f"{prefix}.ctx.mlp1", hc)))
    ctx = ad.addcmul(ctx, cm[5], hc)
    return img, ctx


def _key_bias(b, s_img, token_mask):
    if token_mask is None or token_mask.all():
        return None
    bias = np.zeros((b, 1, 1, s_img + token_mask.shape[1]), dtype=np.float32)
    bias[:, 0, 0, s_img:] = np.where(token_mask, 0.0, NEG_BIAS)
    return bias


def _prompt_ctx(store, prompt_ids):
    ids = np.asarray(prompt_ids)
    if ids.ndim == 1:
        ids = ids[:, None]
    if ids.ndim != 2:
        raise ad.ShapeError(f"prompt ids must be (B,) or (B, P), got {ids.shape}")
    return ad.embedding(store["base.prompt"], ids)


def base_forward(store, cfg: ModelConfig, z, t, prompt_ids, residuals=None, temb=None):
    """Base velocity prediction; residuals (one per block) add to the image stream."""
    z = ad.as_tensor(z)
    b = z.shape[0]
    if residuals is not None and len(residuals) != cfg.base_blocks:
        raise ad.ShapeError(f"expected {cfg.base_blocks} residuals, got {len(residuals)}")
    if temb is None:
        temb = timestep_embedding(t, cfg, store)
    x = ad.add(_lin(store, "base.patch", patchify(z, cfg)), store["base.pos"])
    ctx = _prompt_ctx(store, prompt_ids)
    for i in range(cfg.base_blocks):
        x, ctx = mmdit_block(store, f"base.b{i}", x, ctx, temb, cfg,
                             ctx_out=i < cfg.base_blocks - 1)
        if residuals is not None:
            x = ad.add(x, residuals[i])
    fm = _modulation_final(store, temb, b)
    x = ad.mod_layernorm(x, fm[1], fm[0])
    x = _lin(store, "base.final", x)
    return unpatchify(x, cfg)


def _modulation_final(store, temb, b):
    m = _lin(store, "base.final.mod", temb)
    w = m.shape[-1] // 2
    m = ad.reshape(m, (b, 1, 2 * w))
    return ad.split(m, 2, axis=2)


def text_render_branch(store, cfg: ModelConfig, z, t, adapted_tokens, token_mask=None, temb=None):
    """Residual list (length text_blocks) from the text-conditioned branch."""
    z = ad.as_tensor(z)
    adapted_tokens = ad.as_tensor(adapted_tokens)
    if adapted_tokens.shape[-1] != cfg.width:
        raise ad.ShapeError("text tokens must be adapted to model width")
    b = z.shape[0]
    if temb is None:
        temb = timestep_embedding(t, cfg, store)
    x = ad.add(_lin(store, "text.patch", patchify(z, cfg)), store["text.pos"])
    ctx = adapted_tokens
    bias = _key_bias(b, cfg.n_patches, token_mask)
    res = []
    for i in range(cfg.text_blocks):
        x, ctx = mmdit_block(store, f"text.b{i}", x, ctx, temb, cfg, key_bias=bias,
                             ctx_out=i < cfg.text_blocks - 1)
        res.append(_lin(store, f"text.zero{i}", x))
    return res


def scene_gen_branch(store, cfg: ModelConfig, z, t, prompt_ids, mask, masked_image, temb=None):
    """Residual list (length scene_blocks) from the inpainting-conditioned branch."""
    z = ad.as_tensor(z)
    mask_arr = np.asarray(mask, dtype=np.float32)
    if not np.isin(mask_arr, (0.0, 1.0)).all():
        raise ValueError("subject mask must be binary")
    b = z.shape[0]
    if temb is None:
        temb = timestep_embedding(t, cfg, store)
    vis = ad.concat([z, Tensor(mask_arr), Tensor(np.asarray(masked_image, dtype=np.float32))], axis=1)
    x = ad.add(_lin(store, "scene.patch", patchify(vis, cfg_channels(cfg))), store["scene.pos"])
    ctx = _prompt_ctx(store, prompt_ids)
    res = []
    for i in range(cfg.scene_blocks):
        x, ctx = mmdit_block(store, f"scene.b{i}", x, ctx, temb, cfg,
                             ctx_out=i < cfg.scene_blocks - 1)
        res.append(_lin(store, f"scene.zero{i}", x))
    return res


def cfg_channels(cfg: ModelConfig) -> ModelConfig:
    """Config view with the scene branch's widened channel count."""
    return replace(cfg, channels=2 * cfg.channels + 1)


def merge_residuals(scene_res, text_res):
    """residual[i] = scene[i] + text[ceil(i/2)] (1-indexed block numbering)."""
    out = []
    for i in range(1, len(scene_res) + 1):
        j = math.ceil(i / 2) - 1
        if j >= len(text_res):
            raise ad.ShapeError("text branch too shallow for merge rule")
        out.append(ad.add(scene_res[i - 1], text_res[j]))
    return out


def model_velocity(store, cfg: ModelConfig, z, t, bundle: ControlBundle):
    """Full velocity: both branches, merged residuals, base forward."""
    temb = timestep_embedding(t, cfg, store)
    adapted = glyphs.adapt(bundle.text_tokens, store)
    text_res = text_render_branch(store, cfg, z, t, adapted, bundle.token_mask, temb=temb)
    scene_res = scene_gen_branch(store, cfg, z, t, bundle.prompt_ids, bundle.mask,
                                 bundle.masked_image, temb=temb)
    res = merge_residuals(scene_res, text_res)
    return base_forward(store, cfg, z, t, bundle.prompt_ids, residuals=res, temb=temb)


# ---------------------------------------------------------------------------
# training loss and sampling


def flow_loss(store, cfg: ModelConfig, images, bundle: ControlBundle, rng: RngStream,
              loss_mask=None, t=None, eps=None):
    """Rectified-flow matching loss on a batch of images in [-1, 1].

    z_t = (1-t) x0 + t eps, target velocity eps - x0. `loss_mask` (B,1,H,W)
    zeroes excluded pixels out of the reduction.
    """
    x0 = np.asarray(images, dtype=np.float32)
    b = x0.shape[0]
    if t is None:
        t = rng.uniform(0.0, 1.0, (b,)).astype(np.float32)
    if eps is None:
        eps = rng.normal(x0.shape)
    tb = t[:, None, None, None]
    zt = (1.0 - tb) * x0 + tb * eps
    target = eps - x0
    v = model_velocity(store, cfg, Tensor(zt), t, bundle)
    weight = None
    if loss_mask is not None:
        weight = np.broadcast_to(np.asarray(loss_mask, dtype=np.float32), x0.shape)
    return ad.mse(v, Tensor(target), weight=weight)


def cfg_combine(v_cond, v_uncond, scale):
    """Classifier-free guidance: v_uncond + scale * (v_cond - v_uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ad.ShapeError("CFG operands must share a shape")
    return v_uncond + scale * (v_cond - v_uncond)


def unconditional_bundle(bundle: ControlBundle, cfg: ModelConfig) -> ControlBundle:
    """Drop conditions: zero text tokens, null prompt embedding; scene inputs kept."""
    tok = bundle.text_tokens
    tok = tok.data if isinstance(tok, Tensor) else tok
    return ControlBundle(
        text_tokens=np.zeros_like(tok),
        prompt_ids=np.full_like(bundle.prompt_ids, cfg.null_prompt_id),
        mask=bundle.mask,
        masked_image=bundle.masked_image,
        token_mask=bundle.token_mask,
    )


def sample(store, cfg: ModelConfig, bundle: ControlBundle, steps=None, cfg_scale=None,
           seed=0, stream="sample", velocity_fn=None):
    """Euler sampler from pure noise at t=1 down to the image at t=0.

    Deterministic given (params, bundle, steps, cfg_scale, seed). Returns a
    (B, C, H, W) array clamped to [-1, 1].
    """
    steps = cfg.steps if steps is None else steps
    if steps < 1:
        raise ValueError("need at least one sampler step")
    scale = cfg.cfg_scale if cfg_scale is None else cfg_scale
    b = bundle.prompt_ids.shape[0]
    noise_rng = RngStream(seed, f"{stream}/noise")
    z = noise_rng.normal((b, cfg.channels, cfg.image_size, cfg.image_size))
    uncond = unconditional_bundle(bundle, cfg) if scale != 1.0 else None
    with ad.no_grad():
        for i in range(steps, 0, -1):
            t = np.full(b, i / steps, dtype=np.float32)
            if velocity_fn is not None:
                v = velocity_fn(z, t)
            else:
                v_c = model_velocity(store, cfg, Tensor(z), t, bundle).data
                if uncond is None:
                    v = v_c
                else:
                    v_u = model_velocity(store, cfg, Tensor(z), t, uncond).data
                    v = cfg_combine(v_c, v_u, scale)
            if not np.all(np.isfinite(v)):
                raise ad.NonFiniteError("non-finite velocity during sampling")
            z = z - v / steps
    return np.clip(z, -1.0, 1.0)
