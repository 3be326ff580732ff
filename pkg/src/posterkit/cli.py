"""Command-line entry point: data synthesis, glyph dictionary, training,
generation, evaluation, gradient self-check, and the char/line ablation.

Exit codes: 0 success, 2 validation error (bad flags, missing files, config
schema), 1 runtime error. Every command records a hash of its effective
configuration in its primary output so runs are traceable.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import detector as det
from . import glyphs
from . import metrics
from . import model as gm
from . import synth
from . import training as tr
from .params import ParamStore, load_checkpoint, save_checkpoint
from .rng import RngStream

log = logging.getLogger("posterkit")


class ValidationError(Exception):
    """Bad inputs detected before any output is touched."""


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _limit_threads(n):
    if n is None:
        n = os.environ.get("PM_THREADS")
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(n))
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(int(n))


def _args_hash(args, skip=("func", "out", "report", "threads", "verbose")):
    """Hash of the semantic arguments only: paths and plumbing excluded so
    identical settings hash identically regardless of where output lands."""
    d = {k: v for k, v in vars(args).items() if k not in skip}
    return config_hash(d)


def _require_file(path, what):
    if not path or not os.path.exists(path):
        raise ValidationError(f"{what} not found: {path!r}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    if args.count <= 0:
        raise ValidationError("--count must be positive")
    cfg = synth.SynthConfig(image_size=args.image_size, alphabet_size=args.alphabet_size)
    manifest = synth.write_dataset(args.out, args.count, args.split, args.seed,
                                   cfg, extensions=args.extensions)
    mpath = os.path.join(args.out, args.split, "manifest.json")
    manifest["config_hash"] = _args_hash(args)
    with open(mpath, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    log.info("wrote %d samples to %s", len(manifest["ids"]), args.out)
    return 0


def cmd_build_glyph_dict(args) -> int:
    if args.dim != glyphs.GLYPH_DIM:
        raise ValidationError(
            f"--dim must equal the encoder feature width {glyphs.GLYPH_DIM}")
    if not (2 <= args.alphabet_size <= 256):
        raise ValidationError("--alphabet-size out of range [2, 256]")
    if os.path.dirname(args.out):
        os.makedirs(os.path.dirname(args.out), exist_ok=True)
    store = ParamStore()
    glyphs.init_glyph_encoder(store, RngStream(args.seed, "glyph/init"))
    table = glyphs.build_glyph_table(args.alphabet_size, store, font_seed=args.seed)
    glyphs.save_glyph_table(args.out, table)
    with open(args.out + ".json", "w") as f:
        json.dump({"config_hash": _args_hash(args),
                   "alphabet_size": args.alphabet_size, "dim": args.dim}, f)
    return 0


def cmd_train(args) -> int:
    _require_file(args.config, "config file")
    try:
        cfg = tr.load_stage_config(args.config)
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise ValidationError(f"bad config: {e}") from e
    _require_file(cfg.data_dir, "data_dir")
    if not cfg.out_dir:
        raise ValidationError("config must set out_dir")
    tr.run_stage(cfg)
    with open(os.path.join(cfg.out_dir, "config_used.json"), "w") as f:
        d = json.load(open(args.config))
        d["config_hash"] = config_hash(d)
        json.dump(d, f, sort_keys=True, indent=1)
    return 0


def _load_model(checkpoint, image_size):
    mcfg = gm.ModelConfig(image_size=image_size)
    store = ParamStore()
    rng = RngStream(0, "cli/init")
    glyphs.init_glyph_encoder(store, rng)
    gm.init_model_params(mcfg, store, rng, branches=True)
    store.load_state_dict(load_checkpoint(checkpoint))
    return store, mcfg


def _sample_from_spec(args):
    """Build a PosterSample from a generation spec JSON (annotation schema)."""
    with open(args.spec) as f:
        rec = json.load(f)
    base = os.path.dirname(os.path.abspath(args.spec))
    image_file = args.image or (os.path.join(base, rec["image_file"])
                                if rec.get("image_file") else None)
    mask_file = args.mask or (os.path.join(base, rec["mask_file"])
                              if rec.get("mask_file") else None)
    if not image_file or not mask_file:
        raise ValidationError("generation needs an input image and subject mask "
                              "(--image/--mask or image_file/mask_file in the spec)")
    _require_file(image_file, "input image")
    _require_file(mask_file, "subject mask")
    return synth.PosterSample(
        image=synth.load_image(image_file),
        mask=synth.load_mask(mask_file),
        prompt_tokens=list(rec["prompt_tokens"]),
        spec=synth.spec_from_annotation(rec),
        excluded_boxes=[tuple(b) for b in rec.get("excluded_boxes", [])],
        seed=int(rec.get("seed", 0)),
    )


def cmd_generate(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.spec, "spec file")
    sample = _sample_from_spec(args)
    store, mcfg = _load_model(args.checkpoint, sample.image.shape[-1])
    scfg = tr.StageConfig(stage="2", image_size=mcfg.image_size,
                          representation=args.representation)
    with ad.no_grad():
        _, bundle, _ = tr.build_bundle([sample], store, scfg, stage="2")
        out = gm.sample(store, mcfg, bundle, steps=args.steps,
                        cfg_scale=args.cfg, seed=args.seed)
    synth.save_image(args.out, out[0])
    with open(args.out + ".json", "w") as f:
        json.dump({"config_hash": _args_hash(args),
                   "seed": args.seed, "steps": args.steps, "cfg": args.cfg}, f)
    return 0


def generate_for_samples(store, mcfg, samples, representation="char",
                         steps=None, cfg_scale=None, seed0=0, stage="1"):
    """Render each sample's layout with the model; returns (B-list of images).

    Stage-1 geometry: ground-truth pixels stay known outside the text boxes
    and the model inpaints the text, matching how stage 1 was trained.
    """
    scfg = tr.StageConfig(stage=str(stage), image_size=mcfg.image_size,
                          representation=representation)
    images = []
    with ad.no_grad():
        for i, s in enumerate(samples):
            _, bundle, _ = tr.build_bundle([s], store, scfg)
            out = gm.sample(store, mcfg, bundle, steps=steps, cfg_scale=cfg_scale,
                            seed=seed0 + i)
            images.append(out[0])
    return images


def cmd_evaluate(args) -> int:
    _require_file(args.data, "data directory")
    if not args.identity:
        _require_file(args.checkpoint, "checkpoint")
    samples = synth.load_split(args.data, args.split)
    if args.count:
        samples = samples[: args.count]
    if not samples:
        raise ValidationError("no samples to evaluate")
    bitmaps = glyphs.render_alphabet(args.alphabet_size)
    if args.identity:
        images = [s.image for s in samples]
    else:
        store, mcfg = _load_model(args.checkpoint, samples[0].image.shape[-1])
        images = generate_for_samples(store, mcfg, samples,
                                      representation=args.representation,
                                      steps=args.steps, cfg_scale=args.cfg,
                                      seed0=args.seed)
    det_store = None
    if args.detector:
        _require_file(args.detector, "detector checkpoint")
        det_store = ParamStore()
        det.init_detector(det_store, RngStream(0, "detector/init"))
        det_store.load_state_dict(load_checkpoint(args.detector))
    report = metrics.build_report(samples, images, bitmaps, det_store=det_store,
                                  config_hash=_args_hash(args))
    metrics.save_report(args.report, report)
    log.info("sen_acc %.4f ned %.4f miou %.4f", report["sen_acc"], report["ned"],
             report["miou"])
    return 0


def _gradcheck_cases():
    rng = np.random.default_rng(0)

    def t(*shape):
        return ad.Tensor(rng.standard_normal(shape))

    a, b = t(3, 4), t(3, 4)
    w = t(4, 5)
    cases = [
        ("add", lambda x, y: ad.sum_(ad.add(x, y)), [t(3, 4), t(3, 4)]),
        ("mul", lambda x, y: ad.sum_(ad.mul(x, y)), [t(3, 4), t(3, 4)]),
        ("matmul", lambda x, y: ad.sum_(ad.matmul(x, y)), [t(3, 4), t(4, 5)]),
        ("linear", lambda x, y, z: ad.sum_(ad.linear(x, y, z)), [t(2, 3, 4), t(4, 5), t(5)]),
        ("sigmoid", lambda x: ad.sum_(ad.sigmoid(x)), [t(3, 4)]),
        ("silu", lambda x: ad.sum_(ad.silu(x)), [t(3, 4)]),
        ("gelu", lambda x: ad.sum_(ad.gelu(x)), [t(3, 4)]),
        ("softplus", lambda x: ad.sum_(ad.softplus(x)), [t(3, 4)]),
        ("exp", lambda x: ad.sum_(ad.exp(x)), [t(3, 4)]),
        ("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(x), x)), [t(2, 3, 5)]),
        ("layernorm", lambda x: ad.sum_(ad.mul(ad.layernorm(x), x)), [t(2, 3, 8)]),
        ("mod_layernorm", lambda x, s, h: ad.sum_(ad.mul(ad.mod_layernorm(x, s, h), x)),
         [t(2, 3, 8), t(2, 1, 8), t(2, 1, 8)]),
        ("attention", lambda q, k, v: ad.sum_(ad.mul(ad.attention(q, k, v, 2), q)),
         [t(2, 5, 8), t(2, 5, 8), t(2, 5, 8)]),
        ("conv2d", lambda x, w_, b_: ad.sum_(ad.conv2d(x, w_, b_, stride=2, padding=1)),
         [t(1, 3, 8, 8), t(4, 3, 3, 3), t(4)]),
        ("upsample2", lambda x: ad.sum_(ad.mul(ad.upsample2(x), ad.upsample2(x))),
         [t(1, 2, 4, 4)]),
        ("mse", lambda x, y: ad.mse(x, y), [t(2, 3, 4, 4), t(2, 3, 4, 4)]),
    ]
    return cases


def cmd_gradcheck(args) -> int:
    failures = []
    for name, fn, inputs in _gradcheck_cases():
        try:
            ad.finite_difference_check(fn, inputs)
            log.info("gradcheck %-14s ok", name)
        except AssertionError as e:
            failures.append((name, str(e)))
            log.error("gradcheck %-14s FAILED: %s", name, e)
    if failures:
        print(f"{len(failures)} gradient check(s) failed", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def cmd_ablation(args) -> int:
    _require_file(args.config, "config file")
    try:
        base = tr.load_stage_config(args.config)
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise ValidationError(f"bad config: {e}") from e
    _require_file(base.data_dir, "data_dir")
    if not base.out_dir:
        raise ValidationError("config must set out_dir")
    holdout = synth.load_split(base.data_dir, args.split)
    if args.count:
        holdout = holdout[: args.count]
    bitmaps = glyphs.render_alphabet(base.alphabet_size)
    results = {}
    for rep in ("char", "line"):
        cfg = replace(base, stage="1", representation=rep,
                      out_dir=os.path.join(base.out_dir, rep))
        store, _ = tr.run_stage(cfg)
        mcfg = tr.model_config(cfg)
        images = generate_for_samples(store, mcfg, holdout, representation=rep)
        acc, mean_ned, _ = metrics.text_metrics(holdout, images, bitmaps)
        results[rep] = {"sen_acc": acc, "ned": mean_ned}
    results["gap"] = results["char"]["sen_acc"] - results["line"]["sen_acc"]
    results["config_hash"] = config_hash(json.load(open(args.config)))
    out = os.path.join(base.out_dir, "ablation.json")
    with open(out, "w") as f:
        json.dump(results, f, sort_keys=True, indent=1)
    print(json.dumps(results, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posterkit", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (or set PM_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic poster dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--extensions", action="store_true",
                   help="emit clean/extended pairs for detector training")
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--alphabet-size", type=int, default=16)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("build-glyph-dict", help="precompute the glyph feature dictionary")
    s.add_argument("--out", required=True)
    s.add_argument("--alphabet-size", type=int, default=16)
    s.add_argument("--dim", type=int, default=glyphs.GLYPH_DIM)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_build_glyph_dict)

    s = sub.add_parser("train", help="run one training stage from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="render one poster from a spec JSON")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--image", help="input image (overrides spec image_file)")
    s.add_argument("--mask", help="subject mask (overrides spec mask_file)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--cfg", type=float, default=None)
    s.add_argument("--representation", choices=("char", "line"), default="char")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="generate from held-out layouts and score")
    s.add_argument("--checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--detector")
    s.add_argument("--split", default="test")
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--identity", action="store_true",
                   help="score the ground-truth images themselves (oracle closure)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--cfg", type=float, default=None)
    s.add_argument("--alphabet-size", type=int, default=16)
    s.add_argument("--representation", choices=("char", "line"), default="char")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablation", help="paired char vs line stage-1 runs")
    s.add_argument("--config", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--count", type=int, default=None)
    s.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.exception("command failed: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
