"""Two-stage training: text rendering first, background generation second.

Stage 1 treats text boxes as the unknown region and optimizes only the text
branch, the token adapter, and (unless frozen) the glyph encoder. Stage 2
keeps only the subject as the known region and optimizes the scene branch
alone. A third "reward" stage repeats stage 2 with the subject-fidelity
feedback loss added. Condition dropout (text and prompt independently, per
sample) supports classifier-free guidance, and a per-pixel loss mask removes
excluded decoration text from the objective.
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from . import detector as det
from . import feedback as fb
from . import glyphs
from . import model as gm
from . import synth
from .autodiff import Tensor
from .optim import AdamW
from .params import ParamStore, load_checkpoint, save_checkpoint
from .rng import RngStream

log = logging.getLogger(__name__)

WARMUP_STEPS = 500  # base-only flow matching before branch weights are copied
SCENE_PRETRAIN_STEPS = 1000  # background-inpainting warm start for the scene branch
LOG_EVERY = 50


@dataclass
class StageConfig:
    stage: str = "1"  # "1" | "2" | "reward"
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-4
    dropout_p: float = 0.10
    lam: float = 0.0005
    t1: int = 10
    t_prime: int = 28
    cfg_scale: float = 5.0
    alphabet_size: int = 16
    image_size: int = 64
    seed: int = 0
    data_dir: str = ""
    out_dir: str = ""
    from_scratch: bool = False
    representation: str = "char"  # "char" | "line"
    detector_path: str = ""  # reward stage only
    freeze_glyph_encoder: bool = False
    checkpoint_every: int = 1000

    def __post_init__(self):
        if str(self.stage) not in ("1", "2", "reward"):
            raise ValueError(f"unknown stage {self.stage!r}")
        self.stage = str(self.stage)
        if self.representation not in ("char", "line"):
            raise ValueError(f"unknown representation {self.representation!r}")
        if not (0.0 <= self.dropout_p <= 1.0):
            raise ValueError("dropout_p must lie in [0, 1]")


_JSON_ALIASES = {"lambda": "lam", "T_prime": "t_prime"}


def load_stage_config(path) -> StageConfig:
    """Read a JSON config; `lambda` and `T_prime` map onto field names."""
    with open(path) as f:
        raw = json.load(f)
    kwargs = {}
    fields = StageConfig.__dataclass_fields__
    for key, value in raw.items():
        name = _JSON_ALIASES.get(key, key)
        if name not in fields:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[name] = value
    return StageConfig(**kwargs)


def save_stage_config(path, cfg: StageConfig) -> None:
    d = asdict(cfg)
    d["lambda"] = d.pop("lam")
    d["T_prime"] = d.pop("t_prime")
    with open(path, "w") as f:
        json.dump(d, f, indent=1, sort_keys=True)


def model_config(cfg: StageConfig) -> gm.ModelConfig:
    return gm.ModelConfig(image_size=cfg.image_size, steps=cfg.t_prime,
                          cfg_scale=cfg.cfg_scale)


# ---------------------------------------------------------------------------
# per-sample inputs


def _pixel_box(bbox, size) -> tuple:
    x0, y0, x1, y1 = bbox
    return (int(round(x0 * size)), int(round(y0 * size)),
            int(round(x1 * size)), int(round(y1 * size)))


def mask_untrained_text(sample, mask=None):
    """(loss_mask in {0,1}, adjusted known-mask) for excluded decorations.

    Excluded boxes contribute zero loss and are marked known in the scene
    mask so the model is never asked to generate them.
    """
    base = sample.mask if mask is None else mask
    size = base.shape[-1]
    loss_mask = np.ones((size, size), dtype=np.float32)
    adjusted = np.asarray(base, dtype=np.float32).copy()
    for box in sample.excluded_boxes:
        x0, y0, x1, y1 = _pixel_box(box, size)
        loss_mask[y0:y1, x0:x1] = 0.0
        adjusted[y0:y1, x0:x1] = 1.0
    return loss_mask, adjusted


def make_stage_inputs(sample, stage):
    """(mask (1,H,W), masked_image (C,H,W), loss_mask (1,H,W)) for one sample.

    Stage 1 marks text boxes as the region to inpaint (everything else is
    known); stage 2 and reward keep only the subject. Returns None (with a
    warning) for a stage-1 sample without text lines, which would be a
    degenerate all-known input.
    """
    stage = str(stage)
    size = sample.image.shape[-1]
    if stage == "1":
        if not sample.spec.lines:
            warnings.warn(f"sample {sample.seed} has no text lines; skipped in stage 1")
            return None
        known = np.ones((size, size), dtype=np.float32)
        for ln in sample.spec.lines:
            x0, y0, x1, y1 = _pixel_box(ln.bbox, size)
            if x1 > size or y1 > size or x0 < 0 or y0 < 0:
                raise ValueError(f"text bbox {ln.bbox} outside image")
            known[y0:y1, x0:x1] = 0.0
    elif stage in ("2", "reward"):
        known = np.asarray(sample.mask, dtype=np.float32)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    loss_mask, known = mask_untrained_text(sample, known)
    masked_image = sample.image * known[None]
    return known[None], masked_image, loss_mask[None]


def _glyph_features(store, alphabet_size, font_seed=0):
    bitmaps = glyphs.render_alphabet(alphabet_size, font_seed)
    return glyphs.encode_chars(bitmaps, store)


def build_bundle(batch, store, cfg: StageConfig, stage=None):
    """(images (B,C,H,W), ControlBundle, loss_mask (B,1,H,W)) for a batch.

    Text tokens go through the live glyph encoder so stage-1 gradients reach
    it; samples rejected by make_stage_inputs must be filtered out first.
    """
    stage = cfg.stage if stage is None else str(stage)
    feats = _glyph_features(store, cfg.alphabet_size)
    line_level = cfg.representation == "line"
    toks, masks, masked, losses = [], [], [], []
    counts = []
    for s in batch:
        parts = make_stage_inputs(s, stage)
        if parts is None:
            raise ValueError("batch contains a sample rejected by make_stage_inputs")
        m, mi, lm = parts
        masks.append(m)
        masked.append(mi)
        losses.append(lm)
        toks.append(glyphs.text_tokens_from_encoder(s.spec, feats, line_level=line_level))
        counts.append(toks[-1].shape[0])
    s_txt = max(max(counts), 1)
    padded, token_mask = [], np.zeros((len(batch), s_txt), dtype=bool)
    for i, t in enumerate(toks):
        n = t.shape[0]
        token_mask[i, :n] = True
        if n < s_txt:
            t = ad.pad(t, ((0, s_txt - n), (0, 0)))
        padded.append(ad.reshape(t, (1, s_txt, t.shape[-1])))
    bundle = gm.ControlBundle(
        text_tokens=ad.concat(padded, axis=0),
        prompt_ids=np.asarray([s.prompt_tokens for s in batch], dtype=np.int64),
        mask=np.stack(masks),
        masked_image=np.stack(masked),
        token_mask=token_mask,
    )
    images = np.stack([s.image for s in batch])
    return images, bundle, np.stack(losses)


def apply_condition_dropout(bundle, p, rng, null_prompt_id):
    """Independently zero text tokens / null the prompt per sample with prob p."""
    b = bundle.prompt_ids.shape[0]
    drop_text = rng.uniform(0.0, 1.0, (b,)) < p
    drop_prompt = rng.uniform(0.0, 1.0, (b,)) < p
    keep = (~drop_text).astype(np.float32)[:, None, None]
    tok = bundle.text_tokens
    if isinstance(tok, Tensor):
        tok = ad.mul(tok, ad.constant(keep))
    else:
        tok = tok * keep
    prompt = np.where(drop_prompt[:, None], null_prompt_id, bundle.prompt_ids)
    return gm.ControlBundle(text_tokens=tok, prompt_ids=prompt, mask=bundle.mask,
                            masked_image=bundle.masked_image, token_mask=bundle.token_mask)


# ---------------------------------------------------------------------------
# training loops


def _train(store, samples, steps, batch_size, loss_fn, opt, rng, tag):
    """Generic seeded loop; returns [(step, loss)] logged every LOG_EVERY steps."""
    history = []
    for step in range(steps):
        idx = rng.choice(len(samples), size=min(batch_size, len(samples)))
        batch = [samples[int(i)] for i in idx]
        loss = loss_fn(batch, step)
        ad.backward(loss)
        opt.step(store)
        store.zero_grads()
        if step % LOG_EVERY == 0 or step == steps - 1:
            log.info("%s step %d loss %.5f", tag, step, float(loss.data))
            history.append((step, float(loss.data)))
    return history


def _base_flow_loss(store, mcfg, images, prompt_ids, rng):
    """Flow-matching loss through the base model alone (no branches)."""
    x0 = np.asarray(images, dtype=np.float32)
    b = x0.shape[0]
    t = rng.uniform(0.0, 1.0, (b,)).astype(np.float32)
    eps = rng.normal(x0.shape)
    tb = t[:, None, None, None]
    zt = (1.0 - tb) * x0 + tb * eps
    v = gm.base_forward(store, mcfg, Tensor(zt), t, prompt_ids)
    return ad.mse(v, Tensor(eps - x0))


def _zero_text_bundle(batch, mcfg):
    """Stage-2 geometry with the text condition dropped (scene-only pretraining)."""
    masks = np.stack([np.asarray(s.mask, dtype=np.float32)[None] for s in batch])
    images = np.stack([s.image for s in batch])
    return images, gm.ControlBundle(
        text_tokens=np.zeros((len(batch), 1, glyphs.TOKEN_DIM), dtype=np.float32),
        prompt_ids=np.asarray([s.prompt_tokens for s in batch], dtype=np.int64),
        mask=masks,
        masked_image=images * masks,
    )


def _stage_trainable(cfg: StageConfig) -> list:
    if cfg.stage == "1":
        prefixes = ["text.", "adapter."]
        if not cfg.freeze_glyph_encoder:
            prefixes.append("glyph.")
        return prefixes
    return ["scene."]


def _checkpoint_name(cfg: StageConfig) -> str:
    if cfg.stage == "1":
        return "stage1.ckpt" if cfg.representation == "char" else "stage1_line.ckpt"
    return "stage2.ckpt" if cfg.stage == "2" else "reward.ckpt"


def _init_stage1_store(cfg: StageConfig, mcfg, samples, history):
    """Fresh parameters for stage 1, optionally with warmup and scene pretraining."""
    store = ParamStore()
    rng_init = RngStream(cfg.seed, "trainer/init")
    glyphs.init_glyph_encoder(store, rng_init)
    if cfg.from_scratch:
        gm.init_model_params(mcfg, store, rng_init, branches=True, branch_init="random")
        return store
    gm.init_model_params(mcfg, store, rng_init, branches=False)
    rng = RngStream(cfg.seed, "trainer/warmup")
    store.set_trainable(["base."])
    opt = AdamW(lr=cfg.lr)

    def warmup_loss(batch, step):
        prompts = np.asarray([s.prompt_tokens for s in batch], dtype=np.int64)
        images = np.stack([s.image for s in batch])
        return _base_flow_loss(store, mcfg, images, prompts, rng)

    history["warmup"] = _train(store, samples, WARMUP_STEPS, cfg.batch_size,
                               warmup_loss, opt, rng, "warmup")
    gm.add_control_branches(mcfg, store, rng_init, init="copy")

    rng = RngStream(cfg.seed, "trainer/scene_pretrain")
    store.set_trainable(["scene."])
    opt = AdamW(lr=cfg.lr)

    def pretrain_loss(batch, step):
        images, bundle = _zero_text_bundle(batch, mcfg)
        return gm.flow_loss(store, mcfg, images, bundle, rng)

    history["scene_pretrain"] = _train(store, samples, SCENE_PRETRAIN_STEPS,
                                       cfg.batch_size, pretrain_loss, opt, rng,
                                       "scene-pretrain")
    return store


def run_stage(cfg: StageConfig):
    """Train one stage; returns (store, history). Writes checkpoint + log JSON.

    Stage 2 and reward refuse to run without the previous stage's checkpoint
    unless from_scratch is set; frozen namespaces are bit-identical after.
    """
    samples = synth.load_split(cfg.data_dir, "train")
    if not samples:
        raise ValueError("empty training dataset")
    mcfg = model_config(cfg)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
    history = {}

    if cfg.stage == "1":
        usable = [s for s in samples if s.spec.lines]
        if len(usable) < len(samples):
            warnings.warn(f"skipping {len(samples) - len(usable)} samples without text lines")
        samples = usable
        store = _init_stage1_store(cfg, mcfg, samples, history)
    else:
        store = ParamStore()
        rng_init = RngStream(cfg.seed, "trainer/init")
        glyphs.init_glyph_encoder(store, rng_init)
        gm.init_model_params(mcfg, store, rng_init, branches=True)
        if cfg.from_scratch:
            pass
        else:
            prev = "stage1.ckpt" if cfg.stage == "2" else "stage2.ckpt"
            path = os.path.join(cfg.out_dir, prev)
            if not os.path.exists(path):
                raise FileNotFoundError(
                    f"stage {cfg.stage} needs {path}; pass from_scratch to override")
            store.load_state_dict(load_checkpoint(path))

    det_store = None
    if cfg.stage == "reward":
        if not cfg.detector_path:
            raise ValueError("reward stage needs detector_path")
        det_store = ParamStore()
        det.init_detector(det_store, RngStream(0, "detector/init"))
        det_store.load_state_dict(load_checkpoint(cfg.detector_path))
        det_store.set_trainable([])

    store.set_trainable(_stage_trainable(cfg))
    opt = AdamW(lr=cfg.lr)
    rng = RngStream(cfg.seed, f"trainer/stage{cfg.stage}")
    fcfg = fb.FeedbackConfig(t1=cfg.t1, lam=cfg.lam, steps=cfg.t_prime)

    def stage_loss(batch, step):
        images, bundle, loss_mask = build_bundle(batch, store, cfg)
        bundle = apply_condition_dropout(bundle, cfg.dropout_p, rng, mcfg.null_prompt_id)
        loss = gm.flow_loss(store, mcfg, images, bundle, rng, loss_mask=loss_mask)
        if cfg.stage == "reward" and cfg.lam > 0:
            x0, _ = fb.refl_rollout(store, mcfg, bundle, fcfg, rng)
            rewards = []
            for i, s in enumerate(batch):
                xi = ad.reshape(ad.narrow(x0, 0, i, 1), x0.shape[1:])
                r, _ = fb.reward_loss(xi, s.mask, det_store, fcfg)
                if r is not None:
                    rewards.append(ad.reshape(r, (1,)))
            if rewards:
                mean_r = ad.affine(ad.sum_(ad.concat(rewards, axis=0)), 1.0 / len(rewards))
                loss = fb.total_loss(loss, mean_r, cfg.lam)
        return loss

    tag = f"stage-{cfg.stage}" + ("-line" if cfg.representation == "line" else "")
    history["stage"] = _train(store, samples, cfg.steps, cfg.batch_size,
                              stage_loss, opt, rng, tag)

    if cfg.out_dir:
        name = _checkpoint_name(cfg)
        save_checkpoint(os.path.join(cfg.out_dir, name), store.state_dict())
        with open(os.path.join(cfg.out_dir, name.replace(".ckpt", "_log.json")), "w") as f:
            json.dump(history, f)
    return store, history


def run_line_level_baseline(cfg: StageConfig):
    """Stage 1 with one mean-pooled token per line; everything else identical."""
    return run_stage(replace(cfg, stage="1", representation="line"))
