# The five-experiment ablation matrix on reduced-size clients: local
# baselines, whole-model federation (fl1), equal coefficients (fl2),
# statistics excluded (fl3), and backbone-only 1:6 federation (proposed).
#
# The full desk-scale matrix is `fedbox matrix --seed 7 --out <dir>` and
# takes under a minute; this demo shrinks the clients to run in seconds.

import tempfile
from pathlib import Path

from fedbox.data import default_profiles, scaled_profile
from fedbox.experiments import ExperimentConfig, run_matrix
from fedbox.protocol import RoundSchedule

client1, client2 = (scaled_profile(p, 0.25) for p in default_profiles())
config = ExperimentConfig(
    seed=7,
    profiles=(client1, client2),
    schedule=RoundSchedule(
        total_rounds=5,
        epochs_per_round={"client1": 10, "client2": 2},
        warmup_epochs={"client1": 20, "client2": 8},
    ),
    local_epochs={"client1": 50, "client2": 12},
)

out = Path(tempfile.mkdtemp(prefix="fedbox_matrix_"))
results, comparison = run_matrix(config, out_root=out)

print(f"{'experiment':>10} {'client':>8} {'Prec':>7} {'Rec':>7} {'F1':>7} "
      f"{'Round':>5} {'dRec':>7}")
for row in comparison:
    print(f"{row['experiment']:>10} {row['client_id']:>8} {row['precision']:>7} "
          f"{row['recall']:>7} {row['f1']:>7} {row['round']:>5} "
          f"{row['delta_recall'] or '-':>7}")

print(f"\nper-round curves and summaries written under {out}")
print("render any results directory with: fedbox report --in", out)
