"""Long SFT on a small training set: train NLL keeps falling while validation NLL turns up."""
import argparse
import time
from pathlib import Path

from tmslab import config, experiments

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "knee.ini"))
    args = ap.parse_args()
    t0 = time.time()
    seeds = experiments.knee_point(config.load(args.config))
    print("seed  ok     val@0    val_min  (step)  val_end  rise    train@0  train_end")
    for s in seeds:
        print(f"{s.seed:>4}  {str(s.ok):<5}  {s.val_nll[0]:7.3f}  {s.val_nll[s.argmin]:7.3f}  ({s.steps[s.argmin]:>4})"
              f"  {s.val_nll[-1]:7.3f}  {s.rise:6.3f}  {s.train_nll[0]:7.3f}  {s.train_nll[-1]:7.3f}")
    print(f"knee point in {sum(s.ok for s in seeds)}/{len(seeds)} seeds; verdict {experiments.knee_verdict(seeds)}; "
          f"{time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
