"""Run the full baseline / fused-aided / fused-masked experiment.

    python scripts/run_experiment.py --workdir runs/acc
    python scripts/run_experiment.py --workdir runs/sweep --voice-noise 0.8 1.5 2.0 3.0
"""
import argparse
import dataclasses
import json
import time
from pathlib import Path

from fuseid.cli import run_pipeline
from fuseid.config import resolve
from fuseid.embedding_store import SynthConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--voice-noise", type=float, nargs="+", default=[SynthConfig.voice_noise_sigma])
    p.add_argument("--epochs", type=int)
    args = p.parse_args()

    rows = []
    for sigma in args.voice_noise:
        synth = dataclasses.asdict(SynthConfig(seed=args.seed, voice_noise_sigma=sigma))
        doc = {"seed": args.seed, "SynthConfig": synth}
        if args.epochs is not None:
            doc["TrainConfig"] = {"epochs": args.epochs}
        t = time.perf_counter()
        out = run_pipeline(resolve(doc, env={}), Path(args.workdir) / f"sigma_v_{sigma:g}")
        row = {"voice_noise_sigma": sigma, "seconds": round(time.perf_counter() - t, 1)}
        row.update({c: r.top1 for c, r in out["reports"].items()})
        rows.append(row)
        print(json.dumps(row, sort_keys=True), flush=True)

    summary = Path(args.workdir) / "summary.json"
    summary.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
