"""Fine-tune the dual-branch model with and without clone-face tuning and compare.

Reports the training loss curve and the clone-face loss on held-out spliced scenes.
"""
import argparse
import json
from pathlib import Path

import torch

from idforge.conditioning import TextEncoder, clone_face_splice
from idforge.denoiser import ToyDenoiser
from idforge.repcontrol import build_dual_model
from idforge.synth import make_dataset
from idforge.training import TrainConfig, eval_cfa, train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--scenes", type=int, default=64)
    ap.add_argument("--held-out", type=int, default=16)
    ap.add_argument("--lam", type=float, default=TrainConfig.lam)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/clone_face")
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    data = make_dataset(args.scenes, seed=args.seed)
    held = [clone_face_splice(s, cell=16) for s in make_dataset(args.held_out, seed=99)]
    torch.manual_seed(args.seed)
    base = ToyDenoiser()
    rows = {}
    for on in (True, False):
        dual = build_dual_model(base)
        cfg = TrainConfig(steps=args.steps, seed=args.seed, lam=args.lam, clone_face=on)
        log = train_toy(dual, data, TextEncoder().null(), cfg)
        w = max(1, min(50, args.steps // 10))
        first, last = log.window_mean(0, w), log.window_mean(args.steps - w, w)
        cfa = eval_cfa(dual, held)
        name = "with clone-face" if on else "without"
        rows[name] = {"first_window": first, "last_window": last, "held_out_cfa": cfa, "cfa_log": log.cfa}
        print(f"{name:<16} loss {first:.3f} -> {last:.3f} ({100 * (1 - last / first):.1f}% drop), held-out L_cfa {cfa:.4f}", flush=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
