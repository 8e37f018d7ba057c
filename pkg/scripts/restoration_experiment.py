"""Train (or load) the toy dual-branch model, merge it, and score face restoration.

    python3 scripts/restoration_experiment.py --out runs/restore
    python3 scripts/restoration_experiment.py --model runs/restore/dual.ckpt --jobs 20
"""
import argparse
import json
import time
from pathlib import Path

import torch

from idforge import io as fio
from idforge.conditioning import TextEncoder
from idforge.denoiser import ToyDenoiser
from idforge.diffusion import make_schedule
from idforge.diir import RestoreConfig
from idforge.evaluation import eval_identity, eval_restoration
from idforge.repcontrol import build_dual_model, equivalence_report, merge_model
from idforge.synth import SceneStream, make_dataset
from idforge.training import PretrainConfig, TrainConfig, pretrain_base, train_toy


def train(out: Path, pre_steps: int, ft_steps: int, seed: int):
    te = TextEncoder()
    torch.manual_seed(seed)
    base = ToyDenoiser()
    t0 = time.perf_counter()
    pretrain_base(base, SceneStream(seed), te.null(), PretrainConfig(steps=pre_steps, seed=seed))
    print(f"pretrained base in {time.perf_counter() - t0:.0f} s", flush=True)
    dual = build_dual_model(base)
    log = train_toy(dual, SceneStream(seed + 1), te.null(), TrainConfig(steps=ft_steps, seed=seed))
    print(f"fine-tuned in {time.perf_counter() - t0:.0f} s, final loss {log.window_mean(ft_steps - 50, 50):.4f}", flush=True)
    fio.save_checkpoint(out / "dual.ckpt", fio.model_checkpoint(dual, seed=seed))
    return dual


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", help="dual checkpoint; trains one when omitted")
    ap.add_argument("--out", default="runs/restore")
    ap.add_argument("--pretrain-steps", type=int, default=1500)
    ap.add_argument("--finetune-steps", type=int, default=9000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=20)
    ap.add_argument("--guidance", type=float, default=RestoreConfig.guidance)
    ap.add_argument("--steps", type=int, default=30)
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.model:
        dual = fio.model_from_checkpoint(fio.load_checkpoint(args.model))
    else:
        dual = train(out, args.pretrain_steps, args.finetune_steps, args.seed)
    dual.eval().requires_grad_(False)
    merged = merge_model(dual)
    eq = equivalence_report(dual, merged, probes=20)
    print(f"merge max abs diff {eq['max_abs_diff']:.2e}")

    sched = make_schedule(args.steps)
    scenes = make_dataset(args.jobs, seed=7)
    t0 = time.perf_counter()
    rest = eval_restoration(merged, scenes, sched, RestoreConfig(guidance=args.guidance))
    rest["seconds"] = time.perf_counter() - t0
    print(
        f"restoration: {rest['improved']}/{rest['jobs']} faces improved, mean similarity gain "
        f"{rest['mean_gain']:+.3f}, background max diff {rest['background_max_diff']:.1e}, {rest['seconds']:.0f} s"
    )
    ident = eval_identity(merged, make_dataset(8, seed=11), sched, args.guidance)
    print(f"generation identity score {ident.mean_gated:.3f} (raw {ident.mean_raw:.3f}, IoU {ident.mean_iou:.2f})")
    (out / "restoration.json").write_text(json.dumps({"equivalence": eq, "restoration": rest, "identity": ident.to_dict()}, indent=2))


if __name__ == "__main__":
    main()
