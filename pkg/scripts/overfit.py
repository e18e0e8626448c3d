"""Single-model overfit on eight neighboring views; prints the PSNR curve."""

import argparse
import json
import logging
from pathlib import Path

from viewmap.experiments import overfit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--views", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rays", type=int, default=1024)
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = overfit(args.views, args.steps, args.seed, args.rays, args.eval_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res["atlas"].save(out / "checkpoint")
    summary = {"history": res["history"], "final_psnr": res["final_psnr"]}
    (out / "overfit.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
