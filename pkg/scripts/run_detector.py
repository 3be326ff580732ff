"""Acceptance-scale detector run: 2k extension pairs, 10% held out.

Writes runs/detector/detector.ckpt and metrics.json.
"""
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from posterkit import detector, synth
from posterkit.params import save_checkpoint
from posterkit.rng import derive_seed

OUT = os.path.join(os.path.dirname(__file__), "..", "runs", "detector")


def main():
    t0 = time.time()
    cfg = synth.SynthConfig()
    pairs = []
    i = 0
    while len(pairs) < 2000:
        seed = derive_seed(0, f"det/{i}")
        i += 1
        try:
            pairs.append(synth.synth_extension_pair(seed, cfg))
        except synth.PlacementError:
            continue
    samples = [s for p in pairs for s in (p.clean, p.extended)]
    print(f"data: {len(samples)} samples in {time.time()-t0:.0f}s", flush=True)

    dcfg = detector.DetectorConfig(steps=3000, batch_size=8, lr=1e-3, seed=1)
    store, metrics = detector.train_detector(samples, dcfg)
    metrics["wall_s"] = time.time() - t0
    print(json.dumps({k: v for k, v in metrics.items() if k != "loss_log"}), flush=True)
    print("loss:", metrics["loss_log"][::6], flush=True)

    os.makedirs(OUT, exist_ok=True)
    save_checkpoint(os.path.join(OUT, "detector.ckpt"), store.state_dict())
    with open(os.path.join(OUT, "metrics.json"), "w") as f:
        json.dump(metrics, f, indent=1)


if __name__ == "__main__":
    main()
