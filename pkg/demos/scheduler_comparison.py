"""Compare the admission-controlled planner with two baselines on one trace.

All three see the same bursty coding trace on one replica.  Prefill-greedy
runs every waiting prompt at once, fixed-cap limits every batch to what the
tightest TPOT allows, and the planner admits only what it can finish on time.
"""

from sloplan import SloScheduler, attainment, overall_attainment, builtin_scenario, generate_trace, run
from sloplan.baselines import FixedCapScheduler, PrefillGreedyScheduler
from sloplan.perf_model import PerfModel
from sloplan.sim_executor import SimConfig

model = PerfModel(((8e-5, 3e-3, 0.008), (0.0, 4e-3, 0.025)))
scenario = builtin_scenario("coder").with_rate(6.0)
trace = generate_trace(scenario, seed=0, duration=60.0)
tight = min(scenario.slo.tpot_tiers)

makers = {
    "planner": lambda: SloScheduler(model),
    "prefill-greedy": lambda: PrefillGreedyScheduler(model),
    "fixed-cap": lambda: FixedCapScheduler(model, tightest_tpot=tight),
}
print(f"{len(trace)} requests over 60 s\n")
print(f"{'scheduler':<15} {'overall':>8} {'admitted':>9} {'demoted':>8}")
for name, make in makers.items():
    log = run(trace, make(), model, scenario.slo, SimConfig(memory_total=4000))
    s = log.summary()
    print(f"{name:<15} {overall_attainment(log):8.3f} {attainment(log):9.3f} {s['demoted']:8d}")

# "overall" scores every request, with demoted ones counted as misses.
# "admitted" only scores the standard tier, where the planner's guarantee
# applies; the baselines never demote, so their two columns agree.
