"""Final KL-to-base and retention forgetting of SFT, TMS and GRPO at a matched step budget."""
import argparse
import time
from pathlib import Path

import numpy as np

from tmslab import config, experiments

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "drift.ini"))
    args = ap.parse_args()
    t0 = time.time()
    seeds = experiments.drift_ordering(config.load(args.config))
    print("seed  ok     KL sft/tms/grpo              forgetting sft/tms/grpo")
    for s in seeds:
        k, f = s.kl_to_base, s.forgetting
        print(f"{s.seed:>4}  {str(s.ok):<5}  {k['sft']:.4f} {k['tms']:.4f} {k['grpo']:.2e}   "
              f"{f['sft']:.3f} {f['tms']:.3f} {f['grpo']:.3f}")
    kl = {m: np.mean([s.kl_to_base[m] for s in seeds]) for m in ("sft", "tms", "grpo")}
    print(f"mean KL sft {kl['sft']:.4f} tms {kl['tms']:.4f} grpo {kl['grpo']:.2e}; "
          f"verdict {experiments.drift_verdict(seeds)}; {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
