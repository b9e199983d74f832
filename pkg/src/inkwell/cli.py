"""Command-line entry point.

    inkwell run      --config cfg.yaml [--out DIR] [--seed N] [--subset N]
    inkwell extract  --config cfg.yaml --checkpoint final.inkw --keys keys.json --out DIR
    inkwell verify   --config cfg.yaml --checkpoint final.inkw --out DIR [--seed N]
    inkwell capacity --config cfg.yaml [--out DIR] [--seed N]
    inkwell attack   --config cfg.yaml --checkpoint final.inkw --out DIR [--seed N]

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, bundled_config_path, load_config


def _add_common(p, checkpoint=False, keys=False, out_required=False):
    p.add_argument("--config", required=True, help="experiment YAML (or bundled name)")
    p.add_argument("--out", required=out_required, default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="trained .inkw checkpoint")
    if keys:
        p.add_argument("--keys", required=True, help="keys JSON file")


def build_parser():
    parser = argparse.ArgumentParser(prog="inkwell", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="full pipeline: harden, train, attack, extract")
    _add_common(run)
    run.add_argument("--subset", type=int, default=None, help="cap the training set size")

    extract = sub.add_parser("extract", help="extract images from a checkpoint")
    _add_common(extract, checkpoint=True, keys=True, out_required=True)

    verify = sub.add_parser("verify", help="extract and score against the configured secrets")
    _add_common(verify, checkpoint=True, out_required=True)

    capacity = sub.add_parser("capacity", help="payload watermark run with BER reporting")
    _add_common(capacity)

    attack = sub.add_parser("attack", help="run the configured attacks on a checkpoint")
    _add_common(attack, checkpoint=True, out_required=True)
    return parser


def _load(config_arg):
    from pathlib import Path

    path = Path(config_arg)
    if not path.exists():
        path = bundled_config_path(config_arg)
    return load_config(path)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args.config)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    try:
        if args.command == "run":
            from .runner import run_experiment

            manifest, results = run_experiment(cfg, out_dir=args.out, seed=args.seed, subset=args.subset)
            print(json.dumps({"manifest": manifest["config_hash"], "metrics": _summary(results)}, indent=1))
        elif args.command == "extract":
            from .runner import run_extract

            paths = run_extract(cfg, args.checkpoint, args.keys, args.out)
            print("\n".join(paths))
        elif args.command == "verify":
            from .runner import run_verify

            doc = run_verify(cfg, args.checkpoint, args.out, seed=args.seed)
            print(json.dumps(doc, indent=1, sort_keys=True))
        elif args.command == "capacity":
            if cfg.watermark.secret_source != "payload":
                print("config error: capacity needs watermark.secret_source: payload", file=sys.stderr)
                return 2
            from .runner import run_experiment

            manifest, results = run_experiment(cfg, out_dir=args.out, seed=args.seed)
            print(json.dumps(results.get("capacity", {}), indent=1, sort_keys=True))
        elif args.command == "attack":
            from .runner import run_attacks_on_checkpoint

            doc = run_attacks_on_checkpoint(cfg, args.checkpoint, args.out, seed=args.seed)
            print(json.dumps(_summary_attacks(doc), indent=1))
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error [{args.command}]: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def _summary(results):
    keep = {}
    for k in ("final_accuracy", "final_mean_ssim", "capacity"):
        if k in results:
            keep[k] = results[k]
    if "hardening" in results:
        keep["hardening_steps"] = results["hardening"]["steps"]
        keep["hardening_ssim"] = results["hardening"]["eval_mean_ssim"]
    return keep


def _summary_attacks(doc):
    out = []
    for entry in doc.get("attacks", []):
        row = {"kind": entry["kind"]}
        trace = entry.get("trace")
        if trace and trace["entries"]:
            row["final"] = trace["entries"][-1]
        if "curve" in entry:
            row["curve"] = entry["curve"]
        out.append(row)
    return out


if __name__ == "__main__":
    sys.exit(main())
