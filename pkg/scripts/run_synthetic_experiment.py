"""Pretrain, finetune at each data ratio and report utterance/word F1 on the synthetic task.

    python3 scripts/run_synthetic_experiment.py --seed 0 --interface hconv --out results/seed0.json
"""

import argparse
import json
from pathlib import Path

from stutterdet.experiment import SyntheticSettings, run_synthetic_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, nargs="+", default=[0])
    ap.add_argument("--interface", default="hconv", help="hconv | weighted_sum | single_layer:K")
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.0, 1.0])
    ap.add_argument("--out", type=Path, help="write every run's full result as JSON")
    args = ap.parse_args()

    runs = []
    for seed in args.seed:
        settings = SyntheticSettings(seed=seed, interface_kind=args.interface, data_ratios=tuple(args.ratios))
        res = run_synthetic_experiment(settings)
        runs.append(res.as_dict())
        for r in settings.data_ratios:
            print(f"seed {seed} {args.interface:>15} ratio {r:.2f}  utterance F1 {res.utterance[r]['all']['f1']:.3f}"
                  f"  word F1 {res.word[r]['all']['f1']:.3f}")
        print(f"  {res.seconds['total']:.1f}s")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(runs, indent=2))


if __name__ == "__main__":
    main()
