"""Sequential routing: a declined request walks the replica ring.

Shows the placement rules on hand-made decision vectors, then runs the full
simulator on a four-replica cluster and reports how many hops requests took.
"""

from collections import Counter

from sloplan import RoutingPolicy, SloScheduler, builtin_scenario, generate_trace, run
from sloplan.perf_model import PerfModel
from sloplan.sim_executor import SimConfig
from sloplan.tiers_router import BACKUP_DECLINE, dispatch

policy = RoutingPolicy(num_replicas=4, routing_limit=2)
for decisions in ([True, True, True, True], [False, False, True, True], [False, False, False, True]):
    p = dispatch("r", decisions, policy, origin=0)
    print(f"admit vector {decisions} -> {p.action} on replica {p.replica}")
p = dispatch("r", [False] * 4, RoutingPolicy(4, 2, BACKUP_DECLINE))
print(f"everyone declines, decline backup -> {p.action}")
print()

model = PerfModel(((8e-5, 3e-3, 0.008), (0.0, 4e-3, 0.025)))
scenario = builtin_scenario("coder").with_rate(24.0)
trace = generate_trace(scenario, seed=0, duration=20.0)
log = run(
    trace,
    [SloScheduler(model) for _ in range(4)],
    model,
    scenario.slo,
    SimConfig(memory_total=4000),
    RoutingPolicy(4, 3),
)
hops = Counter(r.hops for r in log.records)
print(f"{len(trace)} requests on 4 replicas; hops taken: {dict(sorted(hops.items()))}")
print("summary:", {k: v for k, v in log.summary().items() if not isinstance(v, dict)})
