"""Walk through admission on a tiny instance with whole-number batch times.

A replica emits 6 tokens per time unit.  Three requests are already decoding
with a TPOT of one unit, and four new requests each bring a 6-token prompt
due within 6 units.  The planner decides which of them to take.
"""

from sloplan import PerfModel, PlanItem, RunningRequest, SchedulerConfig, schedule

model = PerfModel(((1 / 6, 0.0, 0.0),))  # 6 tokens per unit, no fixed overhead
running = [RunningRequest(f"run{k}", tpot=1.0, decode_left=8, last_emission=0.0) for k in range(3)]
new = [PlanItem(f"new{k}", deadline=6.0, prefill_tokens=6, tpot=1.0, decode_tokens=4) for k in range(4)]

plan = schedule(running, new, 0.0, model, 100, SchedulerConfig(timeout=1.0))

print("admitted:", sorted(plan.admitted))
print("declined:", sorted(plan.declined))
print()
print(f"{'start':>6} {'end':>6}  entries")
for b in plan.batches:
    entries = ", ".join(f"{rid}:{kind[0]}{n}" for rid, kind, n in b.entries)
    print(f"{b.start:6.2f} {b.end:6.2f}  {entries}")

# The running decoders take 3 of the 6 tokens in every unit, leaving 18
# prefill tokens before the shared deadline.  Three prompts fit; a fourth
# would need 24.  Prefills are done earliest deadline first, and the new
# decoders join once their prompts finish.
