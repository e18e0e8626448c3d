"""Feature propagation on vs. off: early losses of each new model and final PSNR."""

import argparse
import json
import logging
from pathlib import Path

from viewmap.cli import read_summary
from viewmap.experiments import early_losses, loop_runs, make_loop_stream


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/propagation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=30)
    ap.add_argument("--rays", type=int, default=1024)
    ap.add_argument("--stream", help="reuse an existing stream instead of generating the loop stream")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    out = Path(args.out)
    stream = args.stream or make_loop_stream(out / "stream", seed=args.seed)
    runs = loop_runs(stream, out, args.seed, args.n_train, args.rays,
                     modes=("view_centric", "view_centric_noprop"))
    result = {}
    for name, run in runs.items():
        losses = early_losses(run)
        result[name] = {"early_losses": losses,
                        "mean_early_loss": sum(losses.values()) / max(len(losses), 1),
                        "final_psnr": read_summary(run)[-1]["psnr_mean"]}
    (out / "ablation.json").write_text(json.dumps(result, indent=1))
    print(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
