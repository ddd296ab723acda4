"""
A continual-learning stream
===========================

Runs a handful of strategies over stream ST1 (S-BASE, S-OXO, S-BASE, S-OOX)
at a reduced budget and prints the six metrics. The full desk-scale run is
``contnav train-stream --config <file>`` with the defaults.
"""
import json
import sys
import tempfile

import numpy as np

from contnav.bench import RunConfig, run
from contnav.metrics import SuccessMatrix

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
methods = ["SC1", "FT1", "FRZ", "EWC", "PNN", "HiSPO"]
out = tempfile.mkdtemp(prefix="contnav_demo_")
cfg = RunConfig(stream="ST1", methods=methods, seeds=[0], steps_per_task=steps, eval_episodes=50,
                inf_passes=500, output_dir=out, save_checkpoints=False)
report = run(cfg, log=print)

print(f"\n{'method':6s}" + "".join(f"{k:>8s}" for k in ("PER", "BWT", "FWT", "MEM", "INF", "TRN")))
for m, entry in report["streams"]["ST1"].items():
    a = entry["aggregate"]
    print(f"{m:6s}" + "".join(f"{a[k]:8.3f}" for k in ("PER", "BWT", "FWT", "MEM", "INF", "TRN")))

# the success matrix behind the numbers: row i = after task i, column j = task j
cell = report["streams"]["ST1"]["FT1"]["cells"][0]
m = SuccessMatrix.from_dict(cell["success_matrix"])
print("\nFT1 success matrix (nan = not evaluated):")
print(np.array2string(m.sigma, precision=2))

# HiSPO grows its subspace only when a new anchor pays for itself
print("\nHiSPO anchor decisions:")
for t, entry in enumerate(report["streams"]["ST1"]["HiSPO"]["cells"][0]["hispo_log"]):
    print(f"  task {t}:", {lv: e["retained"] for lv, e in entry.items()})
print(f"\nreports written to {out}:", json.dumps(sorted(["metrics.json", "metrics.csv", "radar.json"])))
