# Weighted federated averaging over filtered parameter subsets.
#
# Two clients hold the same model schema. The server combines their tensors
# as sum(c_i * x_i) / sum(c_i), and a filter rule decides which tensors are
# shared at all.

import numpy as np

from fedbox import (
    AggregationPlan,
    ClientWeight,
    FilterRule,
    NamedParameterSet,
    apply_global,
    fedavg,
    filter_shared,
)
from fedbox.experiments import builtin_plan

client1 = NamedParameterSet([
    ("backbone.l1.w", "trainable", np.array([[2.0, 0.0]], np.float32)),
    ("backbone.norm.running_mean", "statistic", np.array([1.0, 1.0], np.float32)),
    ("head.out.w", "trainable", np.array([[5.0]], np.float32)),
])
client2 = NamedParameterSet([
    ("backbone.l1.w", "trainable", np.array([[9.0, 7.0]], np.float32)),
    ("backbone.norm.running_mean", "statistic", np.array([3.0, 0.0], np.float32)),
    ("head.out.w", "trainable", np.array([[-5.0]], np.float32)),
])

# The headline coefficients: the large client contributes six times as much,
# and the normalized mean of 2.0 and 9.0 lands at (1*2 + 6*9) / 7 = 8.0.
plan = AggregationPlan(
    weights=(ClientWeight("client1", 1.0), ClientWeight("client2", 6.0)),
    filter=FilterRule(include_prefixes=("backbone.",)),
)
shared1 = filter_shared(client1, plan.filter)
shared2 = filter_shared(client2, plan.filter)
print("shared names:", shared1.names())

global_shared = fedavg([("client1", shared1), ("client2", shared2)], plan)
print("aggregated backbone.l1.w:", global_shared.get("backbone.l1.w"))

# Applying the global update touches only shared entries; the head is local.
merged = apply_global(client1, global_shared)
print("head after merge (unchanged):", merged.get("head.out.w"))

# The built-in experiment matrix differs only in plan construction:
for experiment in ("proposed", "fl1", "fl2", "fl3"):
    p = builtin_plan(experiment)
    print(
        f"{experiment:>8}: coefficients="
        f"{[(w.client_id, w.coefficient) for w in p.weights]}, "
        f"include={p.filter.include_prefixes}, exclude_roles={set(p.filter.exclude_roles)}"
    )
