"""Bias, coverage and power of the six borrowing methods in one scenario.

    python3 demos/simulation_scenario.py [label] [n_reps]
"""

import sys

from iwborrow import simlab

label = sys.argv[1] if len(sys.argv) > 1 else "1"
n_reps = int(sys.argv[2]) if len(sys.argv) > 2 else 10
scenario = {s.label: s for s in simlab.default_scenarios()}[label]

rows = simlab.run_study(scenario, n_reps, seed=1)
truth, _ = simlab.true_marginal_effect(scenario, 200_000)
print(f"scenario {label}: truth {truth:.4f}, {n_reps} replicates")
for m in simlab.aggregate_metrics(rows, truth):
    print(f"{m.method:>7}: bias {m.bias:+.4f}  rmse {m.rmse:.4f}  coverage {m.coverage:.2f}  "
          f"reject@0.95 {m.rejection['0.95']:.2f}")
