"""Run the whole CLI chain on a synthetic cohort and print the headline metrics."""

import argparse
import json
import sys
from pathlib import Path

from busdensity.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--women", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--model", default="logreg", choices=["logreg", "forest", "mlp"])
    ap.add_argument("--out", type=Path, default=Path("runs/synthetic"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cfg = args.out / "config.json"
    cfg.write_text(json.dumps({"seed": args.seed, "out": str(args.out), "model": args.model,
                               "synth": {"n_women": args.women}}, indent=2))
    code = cli_main(["all", "--config", str(cfg)])
    if code:
        return code

    ev = json.loads((args.out / "eval.json").read_text())
    for level in ("image", "patient"):
        m = ev[level]["overall"]["micro"]
        print(f"{level:8s} micro AUROC {m['auc']:.3f} [{m['lower']:.3f}, {m['upper']:.3f}]")
    risk = json.loads((args.out / "risk.json").read_text())
    for source, res in risk["auroc"].items():
        print(f"risk AUROC ({source}): {res.get('auc', res.get('error'))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
