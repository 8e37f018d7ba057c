"""Command line entry point: ``idforge <command> [--config FILE] [--seed N] [--out DIR] ...``.

Exit codes:
    0  success
    1  invariant violation (equivalence, background lock, divergence, cache mismatch)
    2  usage error (unknown flag, bad argument)
    3  input/output error (missing or unreadable file, bad file format)
    4  configuration error (unknown section or key, bad value)
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io as fio
from .conditioning import TextEncoder
from .denoiser import ModelConfig, ToyDenoiser
from .diffusion import GuidanceConfig, ToyAutoencoder, invert, make_schedule, sample
from .diir import CacheMisalignment, RestorationJob, RestoreConfig, restore, restore_multi
from .embeddings import Conditions, RegionMask
from .evaluation import eval_identity, generate
from .profiler import MODES, CONVENTIONS, SpecError, bundled_spec_path, count_model, format_report, load_spec
from .repcontrol import MergeConfig, build_dual_model, equivalence_report, is_dual, merge_model
from .synth import SceneStream, face_sim, gen_identity, make_dataset, random_scene, render_scene
from .training import PretrainConfig, TrainConfig, TrainingDiverged, pretrain_base, train_toy

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3, 4
EQUIVALENCE_TOL = 1e-4
BACKGROUND_TOL = 1e-3

log = logging.getLogger("idforge")


class InvariantViolation(RuntimeError):
    pass


@dataclass
class DataConfig:
    n: int = 64
    n_people: int = 1
    stream: bool = False  # fine-tune on freshly rendered scenes instead of n fixed ones


@dataclass
class SampleConfig:
    T: int = 30
    guidance: float = 5.0


@dataclass
class ProbeConfig:
    probes: int = 100


SCHEMA = {
    "model": ModelConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "restore": RestoreConfig,
    "merge": MergeConfig,
    "probe": ProbeConfig,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _tokens(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(path):
    if path is None:
        raise fio.FormatError("--model checkpoint is required")
    return fio.model_from_checkpoint(fio.load_checkpoint(path))


def _bbox_of(mask: torch.Tensor):
    return RegionMask(mask).bbox()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, out: Path) -> int:
    """Append ``--n`` scenes to ``out/manifest.jsonl`` (one line per scene)."""
    manifest = out / "manifest.jsonl"
    data_dir = out / "scenes"
    data_dir.mkdir(parents=True, exist_ok=True)
    done = manifest.read_text().splitlines() if manifest.exists() else []
    start = len(done)
    n = args.n if args.n is not None else cfg["data"].n
    people = args.people if args.people is not None else cfg["data"].n_people
    with manifest.open("a") as fh:
        for i in range(start, start + n):
            seed = args.seed * 100_003 + i
            spec = random_scene(seed, people)
            s = render_scene(spec)
            stem = f"scene_{i:06d}"
            files = {"image": f"{stem}.ppm", "skeleton": f"{stem}_skeleton.pgm", "landmarks": f"{stem}_landmarks.pgm"}
            fio.write_pnm(data_dir / files["image"], s.image.clamp(0, 1))
            fio.write_pnm(data_dir / files["skeleton"], s.cond[0])
            fio.write_pnm(data_dir / files["landmarks"], s.cond[1])
            for j, m in enumerate(s.masks):
                files[f"mask{j}"] = f"{stem}_mask{j}.pgm"
                fio.write_pnm(data_dir / files[f"mask{j}"], m.grid)
            line = {"index": i, "seed": seed, "spec": spec.to_dict(), "files": files}
            fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")
    print(f"appended {n} scenes ({start}..{start + n - 1}) to {manifest}")
    return EXIT_OK


def cmd_train_toy(args, cfg, out: Path) -> int:
    te = TextEncoder()
    dcfg = cfg["data"]
    fixed = make_dataset(dcfg.n, seed=args.seed, n_people=dcfg.n_people)
    if args.base:
        base = _load_model(args.base)
    else:
        base = ToyDenoiser(cfg["model"])
        pcfg = cfg["pretrain"]
        pcfg.seed = args.seed
        plog = pretrain_base(base, SceneStream(args.seed) if dcfg.stream else fixed, te.null(), pcfg)
        fio.save_checkpoint(out / "base.ckpt", fio.model_checkpoint(base, seed=args.seed))
        _write_json(out / "pretrain_log.json", plog.to_dict())
    dual = build_dual_model(base)
    tcfg = cfg["train"]
    tcfg.seed = args.seed
    tlog = train_toy(dual, SceneStream(args.seed + 1) if dcfg.stream else fixed, te.null(), tcfg)
    fio.save_checkpoint(out / "dual.ckpt", fio.model_checkpoint(dual, seed=args.seed))
    _write_json(out / "train_log.json", tlog.to_dict())
    w = max(1, min(50, len(tlog.losses) // 10))
    print(f"loss first window {tlog.window_mean(0, w):.4f} last window {tlog.window_mean(len(tlog.losses) - w, w):.4f}")
    return EXIT_OK


def cmd_sample(args, cfg, out: Path) -> int:
    model = _load_model(args.model)
    scfg = cfg["sample"]
    s = render_scene(random_scene(args.scene, args.people))
    img = generate(model, s, make_schedule(scfg.T), scfg.guidance, args.seed)
    fio.write_pnm(out / "sample.ppm", img)
    fio.write_pnm(out / "reference.ppm", s.image.clamp(0, 1))
    sims = [face_sim(img, b, ident) for ident, b in zip(s.identities, s.bboxes)]
    _write_json(out / "sample.json", {"scene": args.scene, "seed": args.seed, "face_sim": sims, "guidance": scfg.guidance})
    print("face similarity at designated boxes:", " ".join(f"{x:.3f}" for x in sims))
    return EXIT_OK


def cmd_invert(args, cfg, out: Path) -> int:
    model = _load_model(args.model)
    ae = ToyAutoencoder()
    image = fio.read_pnm(args.image)
    if image.dim() != 3:
        raise fio.FormatError("invert needs a color pixmap")
    sched = make_schedule(cfg["sample"].T)
    z0 = ae.encode(image)
    conds = Conditions(TextEncoder()(args.caption))
    traj = invert(model, z0, conds, sched, refine=cfg["restore"].refine)
    z, _ = sample(model, traj.latents[-1], conds, GuidanceConfig(1.0, TextEncoder().null()), sched)
    rel = float((z - z0).norm() / z0.norm())
    fio.write_pnm(out / "reconstruction.ppm", ae.decode(z).clamp(0, 1))
    torch.save(traj.latents[-1], out / "noise.pt")
    _write_json(out / "invert.json", {"relative_l2": rel, "T": sched.T, "refine": cfg["restore"].refine})
    print(f"round-trip relative L2 {rel:.4f}")
    return EXIT_OK


def _restore_report(result, broken, jobs_info, ae, t_total) -> dict:
    ref = ae.project(broken)
    bg = result.background_pixels(ae.factor)
    diff = float((result.image - ref)[:, bg].abs().max()) if bool(bg.any()) else 0.0
    faces = []
    for bbox, ident in jobs_info:
        before = face_sim(broken, bbox, ident) if bbox else None
        after = face_sim(result.image.clamp(0, 1), bbox, ident) if bbox else None
        faces.append({"bbox": list(bbox) if bbox else None, "face_sim_before": before, "face_sim_after": after})
    return {
        "background_max_diff": diff,
        "background_identical": diff <= BACKGROUND_TOL,
        "faces": faces,
        "steps": result.trajectory.T,
        "timings": {**result.timings, "total": t_total},
    }


def _job(broken, mask_path, landmarks, key, text, steps):
    mask = fio.read_mask(mask_path)
    ident = gen_identity(key).embedding
    return RestorationJob(broken, RegionMask(mask), landmarks, ident, text, steps), (_bbox_of(mask), ident)


def cmd_restore(args, cfg, out: Path, multi: bool = False) -> int:
    model = _load_model(args.model)
    ae = ToyAutoencoder()
    broken = fio.read_pnm(args.image)
    if broken.dim() != 3:
        raise fio.FormatError("restore needs a color pixmap")
    landmarks = fio.read_mask(args.landmarks)
    T = cfg["sample"].T
    text = TextEncoder()(args.caption)
    masks, keys = (args.mask, args.identity) if multi else ([args.mask], [args.identity])
    if len(masks) != len(keys):
        raise argparse.ArgumentTypeError("need one --identity per --mask")
    pairs = [_job(broken, m, landmarks, k, text, T) for m, k in zip(masks, keys)]
    jobs = [p[0] for p in pairs]
    rcfg = cfg["restore"]
    t0 = time.perf_counter()
    fn = restore_multi if multi else (lambda js, *a: restore(js[0], *a))
    result = fn(jobs, model, make_schedule(T), ae, rcfg)
    report = _restore_report(result, broken, [p[1] for p in pairs], ae, time.perf_counter() - t0)
    fio.write_pnm(out / "restored.ppm", result.image.clamp(0, 1))
    _write_json(out / "restore.json", report)
    print(f"background max diff {report['background_max_diff']:.2e}")
    for f in report["faces"]:
        if f["bbox"]:
            print(f"face {f['bbox']}: similarity {f['face_sim_before']:.3f} -> {f['face_sim_after']:.3f}")
    if not report["background_identical"]:
        raise InvariantViolation(f"background changed by {report['background_max_diff']:.3e}")
    return EXIT_OK


def _merge_cfg(args, cfg) -> MergeConfig:
    m = cfg["merge"]
    return MergeConfig(m.alpha if args.alpha is None else args.alpha, m.beta if args.beta is None else args.beta)


def _dual_for(args, cfg):
    if args.model:
        dual = _load_model(args.model)
        if not is_dual(dual):
            raise fio.FormatError(f"{args.model} is not a dual-branch checkpoint")
        return dual
    torch.manual_seed(args.seed)
    return build_dual_model(ToyDenoiser(cfg["model"]), seed=args.seed + 1)


def cmd_merge(args, cfg, out: Path) -> int:
    dual = _dual_for(args, cfg)
    mcfg = _merge_cfg(args, cfg)
    merged = merge_model(dual, mcfg)
    rep = equivalence_report(dual, merged, mcfg, args.probes or cfg["probe"].probes, args.seed)
    fio.save_checkpoint(out / "merged.ckpt", fio.model_checkpoint(merged, alpha=mcfg.alpha, beta=mcfg.beta))
    _write_json(out / "equivalence.json", rep)
    print(f"max abs diff {rep['max_abs_diff']:.3e} mean {rep['mean_abs_diff']:.3e}")
    return EXIT_OK


def cmd_verify(args, cfg, out: Path) -> int:
    dual = _dual_for(args, cfg)
    mcfg = _merge_cfg(args, cfg)
    rep = equivalence_report(dual, merge_model(dual, mcfg), mcfg, args.probes or cfg["probe"].probes, args.seed)
    ok = rep["max_abs_diff"] <= EQUIVALENCE_TOL
    rep["pass"] = ok
    _write_json(out / "equivalence.json", rep)
    print(f"max abs diff {rep['max_abs_diff']:.3e} over {rep['probes']} probes: {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise InvariantViolation("merged model does not match the dual-branch model")
    return EXIT_OK


def cmd_profile(args, cfg, out: Path) -> int:
    path = Path(args.spec)
    if not path.exists() and not path.suffix:
        path = bundled_spec_path(args.spec)
    elif not path.exists() and bundled_spec_path(path.stem).exists():
        path = bundled_spec_path(path.stem)
    spec = load_spec(path)
    rep = count_model(spec, args.mode, args.convention)
    print(format_report(rep, f"{spec.name} [{args.mode}]"))
    _write_json(out / f"profile_{spec.name}_{args.mode}.json", rep.to_dict())
    return EXIT_OK


def cmd_eval_id(args, cfg, out: Path) -> int:
    model = _load_model(args.model)
    scfg = cfg["sample"]
    scenes = make_dataset(args.n, seed=args.scene_seed, n_people=args.people)
    res = eval_identity(model, scenes, make_schedule(scfg.T), scfg.guidance, args.seed)
    _write_json(out / "eval_id.json", res.to_dict())
    print(f"faces {len(res.faces)} mean IoU {res.mean_iou:.3f} raw {res.mean_raw:.3f} gated {res.mean_gated:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="idforge", description="Identity-conditioned toy diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        c = sub.add_parser(name, help=help)
        c.add_argument("--config", help="INI run config")
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--out", default="out", help="output directory")
        c.add_argument("-v", "--verbose", action="store_true")
        return c

    c = command("gen-data", "render synthetic scenes and append them to a manifest")
    c.add_argument("--n", type=int)
    c.add_argument("--people", type=int)

    c = command("train-toy", "pretrain the base denoiser and fine-tune the dual-branch model")
    c.add_argument("--base", help="start from this base checkpoint instead of pretraining")

    c = command("sample", "generate one synthetic scene")
    c.add_argument("--model", required=True)
    c.add_argument("--scene", type=int, default=0, help="scene seed")
    c.add_argument("--people", type=int, default=1)

    c = command("invert", "invert an image and report the round-trip error")
    c.add_argument("--model", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--caption", type=_tokens, default=(2, 5, 10))

    for name, multi in (("restore", False), ("restore-multi", True)):
        c = command(name, "restore several faces (repeat --mask/--identity)" if multi else "restore one masked face")
        c.add_argument("--model", required=True)
        c.add_argument("--image", required=True, help="broken image (pixmap)")
        c.add_argument("--mask", required=True, action="append" if multi else None, help="face mask graymap (PGM)")
        c.add_argument("--landmarks", required=True, help="landmark raster graymap")
        c.add_argument("--identity", required=True, type=int, action="append" if multi else None, help="identity key")
        c.add_argument("--caption", type=_tokens, default=(2, 5, 10))

    for name in ("merge", "verify-equivalence"):
        c = command(name, "fold the dual branches" if name == "merge" else "check merged == dual outputs")
        c.add_argument("--model", help="dual checkpoint (default: freshly initialised)")
        c.add_argument("--alpha", type=float)
        c.add_argument("--beta", type=float)
        c.add_argument("--probes", type=int)

    c = command("profile", "count FLOPs, MACs and parameters of an architecture spec")
    c.add_argument("--spec", required=True, help="spec file or bundled name (sd15, sd15_controlnet)")
    c.add_argument("--mode", choices=MODES, default="base")
    c.add_argument("--convention", choices=CONVENTIONS, default="module")

    c = command("eval-id", "generate scenes and score identity with the overlap gate")
    c.add_argument("--model", required=True)
    c.add_argument("--n", type=int, default=8)
    c.add_argument("--people", type=int, default=1)
    c.add_argument("--scene-seed", type=int, default=7)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-toy": cmd_train_toy,
    "sample": cmd_sample,
    "invert": cmd_invert,
    "restore": cmd_restore,
    "restore-multi": lambda a, c, o: cmd_restore(a, c, o, multi=True),
    "merge": cmd_merge,
    "verify-equivalence": cmd_verify,
    "profile": cmd_profile,
    "eval-id": cmd_eval_id,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.manual_seed(args.seed)
    np.random.seed(args.seed % 2**32)
    try:
        cfg = fio.load_config(args.config, SCHEMA) if args.config else fio.read_config("", SCHEMA)
    except fio.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (InvariantViolation, TrainingDiverged, CacheMisalignment) as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except argparse.ArgumentTypeError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, fio.FormatError, SpecError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
