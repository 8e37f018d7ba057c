"""Print FLOPs / MACs / parameters of the full-size base, ControlNet and merged models."""
import argparse
import json

from idforge.archspecs import controlnet_spec, sd15_spec
from idforge.profiler import count_model, format_report, overhead_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--convention", choices=("module", "analytic"), default="module")
    ap.add_argument("--json", help="also write the rows to this file")
    ap.add_argument("-v", "--verbose", action="store_true", help="print per-group breakdowns")
    args = ap.parse_args()

    sd, cn = sd15_spec(), controlnet_spec()
    reps = {
        "SD1.5": count_model(sd, "base", args.convention),
        "ControlNet+SD1.5": count_model(cn, "merged", args.convention),
        "RepControlNet merged": count_model(sd, "merged", args.convention),
    }
    print(f"counting convention: {args.convention}")
    print(f"{'model':<22}{'FLOPs (T)':>11}{'MACs (T)':>10}{'params (M)':>12}")
    for name, r in reps.items():
        print(f"{name:<22}{r.flops / 1e12:>11.3f}{r.macs / 1e12:>10.3f}{r.params / 1e6:>12.1f}")
    over = overhead_report(reps["SD1.5"], reps["RepControlNet merged"])
    print("merged vs base: " + ", ".join(f"{k} {100 * over[k]:+.2f}%" for k in ("flops", "macs", "params")))
    if args.verbose:
        for name, r in reps.items():
            print()
            print(format_report(r, name))
    if args.json:
        with open(args.json, "w") as f:
            json.dump({k: r.to_dict() for k, r in reps.items()}, f, indent=2)


if __name__ == "__main__":
    main()
