"""Command line entry point: ``geartrain run|compare|ttl-sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness


def _ttl_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geartrain", description="Gear training experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--output", help=f"output directory (overrides config and ${harness.OUTPUT_ENV})")

    c = sub.add_parser("compare", help="compare two run summaries")
    c.add_argument("summary_a", help="summary.json or run directory")
    c.add_argument("summary_b")
    c.add_argument("--threshold", type=float, help="loss threshold (default: run a's final smoothed loss)")
    c.add_argument("--window", type=int, default=20)
    c.add_argument("--full", action="store_true", help="print the per-step deltas too")

    s = sub.add_parser("ttl-sweep", help="one gear run per ttl plus a nogear baseline")
    s.add_argument("--config", required=True)
    s.add_argument("--ttls", type=_ttl_list, required=True, help="e.g. 1,5,20")
    s.add_argument("--baseline-steps", type=int, help="steps for the nogear threshold run")
    s.add_argument("--window", type=int, default=20)
    s.add_argument("--output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.cmd == "run":
            res = harness.run(harness.load_config(args.config), output=args.output)
            s = res.summary
            print(f"{s['mode']} run {s['run_id']}: {s['steps']} steps, final loss {s['final_loss']:.6f}, "
                  f"dense forwards {s['totals']['dense_forward_count']} -> {res.output_dir}")
        elif args.cmd == "compare":
            rep = harness.compare(args.summary_a, args.summary_b, args.threshold, args.window)
            if not args.full:
                rep = {k: v for k, v in rep.items() if k not in ("loss_delta", "accuracy_delta")}
            print(json.dumps(rep, indent=1))
        else:
            table = harness.ttl_sweep(harness.load_config(args.config), args.ttls, args.baseline_steps,
                                      args.window, output=args.output)
            print(f"threshold {table['threshold']:.6f} (nogear, {table['baseline_steps']} steps)")
            print(f"{'ttl':>8} {'steps_to_thr':>13} {'dense_fwd':>10} {'final_loss':>11}")
            for r in table["rows"]:
                stt = "-" if r["steps_to_threshold"] is None else r["steps_to_threshold"]
                print(f"{r['ttl']:>8g} {stt:>13} {r['dense_forward_count']:>10} {r['final_loss']:>11.6f}")
    except (harness.ConfigError, harness.AlignmentError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
