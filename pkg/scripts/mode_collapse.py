"""Answer entropy and pass@K of the base, SFT and TMS policies on the training prompts."""
import argparse
import time
from pathlib import Path

import numpy as np

from tmslab import config, experiments

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "mode_collapse.ini"))
    args = ap.parse_args()
    cfg = config.load(args.config)
    t0 = time.time()
    seeds = experiments.mode_collapse(cfg)
    K = cfg.eval.K
    print(f"seed  ok     AnsEnt base/sft/tms      pass@{K} base/sft/tms   pass@1 base/sft/tms")
    for s in seeds:
        h, p, p1 = s.ans_entropy, s.pass_at, s.pass_at_1
        print(f"{s.seed:>4}  {str(s.ok):<5}  {h['base']:.3f} {h['sft']:.3f} {h['tms']:.3f}      "
              f"{p['base']:.2f} {p['sft']:.2f} {p['tms']:.2f}      {p1['base']:.2f} {p1['sft']:.2f} {p1['tms']:.2f}")
    mean = {k: np.mean([s.ans_entropy[k] for s in seeds]) for k in ("base", "sft", "tms")}
    print(f"mean AnsEnt base {mean['base']:.3f} sft {mean['sft']:.3f} tms {mean['tms']:.3f}; "
          f"verdict {experiments.collapse_verdict(seeds)}; {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
