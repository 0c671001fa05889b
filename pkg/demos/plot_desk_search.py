"""
A complete search on the synthetic task
=======================================

Warm up the SuperNet, evolve for a few generations and export the final
front.  The configuration is a cut-down version of ``configs/desk.json``
so the script finishes in well under a minute.  A cost estimate for the
full-size setting closes the script.
"""

import json
from dataclasses import replace

from evonas.engine import EvolutionConfig, TimeModel, estimate_search_time, run_search

cfg = EvolutionConfig.load("configs/desk.json")
cfg = replace(cfg, P=8, E_warm=2, E_evo=4, E_param=1)
res = run_search(cfg, "runs/demo")

for gen, acc in res.mean_accuracy.items():
    print(f"generation {gen}: mean validation accuracy {acc:.3f}")

doc = json.loads((res.out_dir / "pareto.json").read_text())
for row in doc["front"]:
    print(f"  #{row['genome_id']:3d} error {float(row['error']):.3f} params {row['params']:6d}  {row['genome']}")

###############################################################################
# Resuming from the checkpoint continues exactly where the run stopped.

more = run_search(replace(cfg, E_evo=6), "runs/demo", resume="runs/demo/state.ckpt")
print("resumed to generation", more.state.generation)

###############################################################################
# Search cost for 50 warmup epochs, 45 generations of 10 epochs, B=1, with a
# training epoch of 60 s and a validation pass of 5 s.

b = estimate_search_time(EvolutionConfig(), TimeModel(T_tr=60.0, T_val=5.0))
print(json.dumps(b.to_dict(), indent=1))
