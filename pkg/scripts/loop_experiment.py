"""View-centric vs. world-centric mapping on a drifted loop with one loop closure.

Generates the loop stream, runs both modes on it and writes the time-series
plots plus an A/B table next to the runs.
"""

import argparse
import json
import logging
from pathlib import Path

from viewmap.cli import emit_report
from viewmap.experiments import loop_comparison, loop_runs, make_loop_stream


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/loop")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=30)
    ap.add_argument("--rays", type=int, default=1024)
    ap.add_argument("--rgb-only", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    out = Path(args.out)
    stream = make_loop_stream(out / "stream", seed=args.seed)
    extra = {"render.rgb_only": True} if args.rgb_only else None
    runs = loop_runs(stream, out, args.seed, args.n_train, args.rays, extra=extra)
    emit_report(list(runs.values()), out / "report", list(runs))
    result = loop_comparison(runs)
    (out / "comparison.json").write_text(json.dumps(result, indent=1))
    print(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
