"""Requests, SLO tiers, trace files and synthetic workload generators."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import InvalidDistributionError, InvariantViolation, ParseError
from .perf_model import PerfModel

PREFILL = "prefill"
DECODE = "decode"
KV_BLOCK_TOKENS = 16


@dataclass(frozen=True)
class SloConfig:
    tpot_tiers: tuple[float, ...]
    ttft_slowdown_tiers: tuple[float, ...]
    tpot_window: int = 10

    def __post_init__(self):
        object.__setattr__(self, "tpot_tiers", tuple(float(x) for x in self.tpot_tiers))
        object.__setattr__(self, "ttft_slowdown_tiers", tuple(float(x) for x in self.ttft_slowdown_tiers))
        for name in ("tpot_tiers", "ttft_slowdown_tiers"):
            tiers = getattr(self, name)
            if not tiers or any(t <= 0 for t in tiers):
                raise ValueError(f"{name} must be non-empty and strictly positive")
            if any(a >= b for a, b in zip(tiers, tiers[1:])):
                raise ValueError(f"{name} must be strictly ascending")
        if self.tpot_window < 1:
            raise ValueError("tpot_window must be >= 1")

    def to_dict(self) -> dict:
        return {
            "tpot_tiers": list(self.tpot_tiers),
            "ttft_slowdown_tiers": list(self.ttft_slowdown_tiers),
            "tpot_window": self.tpot_window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SloConfig":
        return cls(tuple(d["tpot_tiers"]), tuple(d["ttft_slowdown_tiers"]), int(d.get("tpot_window", 10)))


@dataclass(frozen=True)
class StageSpec:
    kind: str
    tokens: int
    slo_tier: int
    external_delay: float = 0.0


@dataclass(frozen=True)
class RequestSpec:
    id: str
    arrival: float
    stages: tuple[StageSpec, ...]
    value: float = 1.0
    memory_units: int = 0  # 0 -> derived from token counts

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.memory_units == 0:
            object.__setattr__(self, "memory_units", memory_units_for(self.stages))

    @property
    def prompt_tokens(self) -> int:
        return self.stages[0].tokens

    @property
    def total_tokens(self) -> int:
        return sum(s.tokens for s in self.stages)

    def validate(self, slo: SloConfig | None = None) -> None:
        rid = self.id
        if not self.stages:
            raise InvariantViolation("request has no stages", rid)
        if self.stages[0].kind != PREFILL:
            raise InvariantViolation("first stage must be a prefill", rid)
        if self.arrival < 0:
            raise InvariantViolation("arrival must be >= 0", rid)
        if self.value < 0:
            raise InvariantViolation("value must be >= 0", rid)
        if self.memory_units < 1:
            raise InvariantViolation("memory_units must be >= 1", rid)
        prev = None
        for st in self.stages:
            if st.kind not in (PREFILL, DECODE):
                raise InvariantViolation(f"unknown stage kind {st.kind!r}", rid)
            if st.tokens < 1:
                raise InvariantViolation("stage tokens must be >= 1", rid)
            if st.external_delay < 0:
                raise InvariantViolation("external_delay must be >= 0", rid)
            if prev == PREFILL and st.kind == PREFILL:
                raise InvariantViolation("two consecutive prefill stages", rid)
            if slo is not None:
                tiers = slo.ttft_slowdown_tiers if st.kind == PREFILL else slo.tpot_tiers
                if not 0 <= st.slo_tier < len(tiers):
                    raise InvariantViolation(f"invalid slo_tier {st.slo_tier}", rid)
            prev = st.kind

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "arrival_s": self.arrival,
            "value": self.value,
            "memory_units": self.memory_units,
            "stages": [
                {"kind": s.kind, "tokens": s.tokens, "slo_tier": s.slo_tier, "external_delay_s": s.external_delay}
                for s in self.stages
            ],
        }


def memory_units_for(stages: Iterable[StageSpec], overprovision: float = 1.0) -> int:
    total = sum(s.tokens for s in stages)
    return max(1, math.ceil(total * overprovision / KV_BLOCK_TOKENS))


@dataclass(frozen=True)
class DerivedDeadlines:
    prefill_deadline: float  # absolute deadline of the first prefill stage
    zero_load_ttft: tuple[float, ...]  # one per prefill stage
    slowdowns: tuple[float, ...]  # one per prefill stage
    decode_tpots: tuple[float, ...]  # one per decode stage
    planning_tpot: float  # tightest decode TPOT of the request (inf if none)

    def stage_deadline(self, prefill_index: int, available_at: float) -> float:
        return available_at + self.slowdowns[prefill_index] * self.zero_load_ttft[prefill_index]


def derive_deadlines(req: RequestSpec, slo: SloConfig, model: PerfModel) -> DerivedDeadlines:
    """Deadlines anchored at stage availability (arrival for the first stage).

    The zero-load TTFT of a prefill stage is its latency as a single
    un-chunked batch.
    """
    zl, slow, tpots = [], [], []
    for st in req.stages:
        if st.kind == PREFILL:
            zl.append(model.predict(st.tokens, 0))
            slow.append(slo.ttft_slowdown_tiers[st.slo_tier])
        else:
            tpots.append(slo.tpot_tiers[st.slo_tier])
    return DerivedDeadlines(
        prefill_deadline=req.arrival + slow[0] * zl[0],
        zero_load_ttft=tuple(zl),
        slowdowns=tuple(slow),
        decode_tpots=tuple(tpots),
        planning_tpot=min(tpots) if tpots else math.inf,
    )


# --------------------------------------------------------------------------
# Trace files (one JSON object per line)


def _request_from_record(rec: dict, lineno: int) -> RequestSpec:
    try:
        stages = tuple(
            StageSpec(
                kind=str(s["kind"]),
                tokens=int(s["tokens"]),
                slo_tier=int(s.get("slo_tier", 0)),
                external_delay=float(s.get("external_delay_s", 0.0)),
            )
            for s in rec["stages"]
        )
        return RequestSpec(
            id=str(rec["id"]),
            arrival=float(rec["arrival_s"]),
            stages=stages,
            value=float(rec.get("value", 1.0)),
            memory_units=int(rec.get("memory_units", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record: {exc!r}", lineno) from None


def load_trace(path: str | Path, slo: SloConfig | None = None) -> list[RequestSpec]:
    requests = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            req = _request_from_record(rec, lineno)
            req.validate(slo)
            if req.id in seen:
                raise InvariantViolation("duplicate id", req.id)
            seen.add(req.id)
            requests.append(req)
    requests.sort(key=lambda r: (r.arrival, r.id))
    return requests


def dump_trace(requests: Iterable[RequestSpec]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in requests)


def write_trace(path: str | Path, requests: Iterable[RequestSpec]) -> None:
    Path(path).write_text(dump_trace(requests))


# --------------------------------------------------------------------------
# Synthetic generation


def lognormal_params(mean: float, std: float) -> tuple[float, float]:
    """(mu, sigma) of the underlying normal for a target mean and std."""
    if not mean > 0 or std < 0 or not math.isfinite(mean) or not math.isfinite(std):
        raise InvalidDistributionError(f"invalid length distribution mean={mean} std={std}")
    sigma2 = math.log1p((std / mean) ** 2)
    return math.log(mean) - sigma2 / 2.0, math.sqrt(sigma2)


@dataclass
class LengthDist:
    mean: float
    std: float
    min: int = 1
    max: int = 32768

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        mu, sigma = lognormal_params(self.mean, self.std)
        if self.min < 1 or self.max < self.min:
            raise InvalidDistributionError(f"invalid clamp range [{self.min}, {self.max}]")
        x = rng.lognormal(mu, sigma, size) if sigma > 0 else np.full(size, float(self.mean))
        return np.clip(np.rint(x), self.min, self.max).astype(int)

    @classmethod
    def from_dict(cls, d: dict) -> "LengthDist":
        return cls(float(d["mean"]), float(d.get("std", 0.0)), int(d.get("min", 1)), int(d.get("max", 32768)))


@dataclass
class ArrivalProcess:
    process: str = "poisson"  # or "bursty"
    rate: float = 1.0  # mean requests/second
    on_multiplier: float = 4.0
    mean_on_s: float = 20.0
    mean_off_s: float = 60.0

    def sample(self, rng: np.random.Generator, duration: float) -> np.ndarray:
        if self.rate < 0 or not math.isfinite(self.rate):
            raise InvalidDistributionError(f"invalid arrival rate {self.rate}")
        if self.rate == 0 or duration <= 0:
            return np.empty(0)
        if self.process == "poisson":
            return _poisson_times(rng, self.rate, 0.0, duration)
        if self.process != "bursty":
            raise InvalidDistributionError(f"unknown arrival process {self.process!r}")
        if self.on_multiplier < 1 or self.mean_on_s <= 0 or self.mean_off_s <= 0:
            raise InvalidDistributionError("bursty process needs on_multiplier>=1 and positive periods")
        f_on = self.mean_on_s / (self.mean_on_s + self.mean_off_s)
        off_rate = self.rate / (f_on * self.on_multiplier + (1.0 - f_on))
        on_rate = off_rate * self.on_multiplier
        times = []
        t, on = 0.0, False
        while t < duration:
            length = rng.exponential(self.mean_on_s if on else self.mean_off_s)
            end = min(duration, t + length)
            times.append(_poisson_times(rng, on_rate if on else off_rate, t, end))
            t, on = end, not on
        return np.concatenate(times) if times else np.empty(0)

    @classmethod
    def from_dict(cls, d: dict) -> "ArrivalProcess":
        return cls(
            process=d.get("process", "poisson"),
            rate=float(d.get("rate", 1.0)),
            on_multiplier=float(d.get("on_multiplier", 4.0)),
            mean_on_s=float(d.get("mean_on_s", 20.0)),
            mean_off_s=float(d.get("mean_off_s", 60.0)),
        )


def _poisson_times(rng: np.random.Generator, rate: float, start: float, end: float) -> np.ndarray:
    if rate <= 0 or end <= start:
        return np.empty(0)
    # Draw in blocks; the expected count plus a generous margin almost always suffices.
    out = []
    t = start
    block = max(16, int((end - start) * rate * 1.2) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate, block)
        ts = t + np.cumsum(gaps)
        out.append(ts[ts < end])
        if ts[-1] >= end:
            break
        t = ts[-1]
    return np.concatenate(out)


@dataclass
class Template:
    """Stage structure and SLO tiers for one request class."""

    kind: str = "chat"  # chat | tool | reasoning
    prompt: LengthDist = field(default_factory=lambda: LengthDist(763, 424))
    output: LengthDist = field(default_factory=lambda: LengthDist(266, 160))
    prefill_tier: int = 0
    decode_tier: int = 0
    # tool loops
    pairs_mean: float = 2.7
    pairs_std: float = 1.1
    tool_response: LengthDist = field(default_factory=lambda: LengthDist(150, 80))
    delay_range_s: tuple[float, float] = (0.05, 0.2)
    loop_prefill_tier: int = 0
    loop_decode_tier: int = 0
    # reasoning
    thinking: LengthDist = field(default_factory=lambda: LengthDist(4693, 1442))
    thinking_tier: int = 0
    value: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "Template":
        t = cls()
        t.kind = d.get("template", d.get("kind", "chat"))
        for key in ("prompt", "output", "tool_response", "thinking"):
            if key in d:
                setattr(t, key, LengthDist.from_dict(d[key]))
        for key in ("prefill_tier", "decode_tier", "loop_prefill_tier", "loop_decode_tier", "thinking_tier"):
            if key in d:
                setattr(t, key, int(d[key]))
        for key in ("pairs_mean", "pairs_std", "value"):
            if key in d:
                setattr(t, key, float(d[key]))
        if "delay_range_s" in d:
            lo, hi = d["delay_range_s"]
            t.delay_range_s = (float(lo), float(hi))
        if t.kind not in ("chat", "tool", "reasoning"):
            raise InvalidDistributionError(f"unknown template {t.kind!r}")
        return t

    def stages(self, rng: np.random.Generator) -> tuple[StageSpec, ...]:
        prompt = int(self.prompt.sample(rng, 1)[0])
        if self.kind == "chat":
            out = int(self.output.sample(rng, 1)[0])
            return (StageSpec(PREFILL, prompt, self.prefill_tier), StageSpec(DECODE, out, self.decode_tier))
        if self.kind == "reasoning":
            think = int(self.thinking.sample(rng, 1)[0])
            out = int(self.output.sample(rng, 1)[0])
            return (
                StageSpec(PREFILL, prompt, self.prefill_tier),
                StageSpec(DECODE, think, self.thinking_tier),
                StageSpec(DECODE, out, self.decode_tier),
            )
        if self.pairs_mean <= 0 or self.pairs_std < 0:
            raise InvalidDistributionError("invalid tool pair distribution")
        pairs = max(1, int(round(rng.normal(self.pairs_mean, self.pairs_std))))
        outs = self.output.sample(rng, pairs)
        stages = [StageSpec(PREFILL, prompt, self.prefill_tier)]
        lo, hi = self.delay_range_s
        for k in range(pairs):
            if k > 0:
                resp = int(self.tool_response.sample(rng, 1)[0])
                stages.append(StageSpec(PREFILL, resp, self.loop_prefill_tier, float(rng.uniform(lo, hi))))
            tier = self.decode_tier if k == pairs - 1 else self.loop_decode_tier
            stages.append(StageSpec(DECODE, int(outs[k]), tier))
        return tuple(stages)


@dataclass
class Scenario:
    name: str
    slo: SloConfig
    arrival: ArrivalProcess
    templates: list[tuple[float, Template]]  # (weight, template)
    memory_overprovision: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        slo = SloConfig.from_dict(d["slo"])
        arrival = ArrivalProcess.from_dict(d.get("arrival", {}))
        if "mix" in d:
            templates = [(float(c.get("weight", 1.0)), Template.from_dict(c)) for c in d["mix"]]
        else:
            templates = [(1.0, Template.from_dict(d))]
        if not templates or any(w <= 0 for w, _ in templates):
            raise InvalidDistributionError("mix weights must be positive")
        return cls(d.get("name", "scenario"), slo, arrival, templates, float(d.get("memory_overprovision", 1.0)))

    def scaled(self, factor: float) -> "Scenario":
        """Scale the mean arrival rate; burst periods compress by the same factor."""
        s = copy.deepcopy(self)
        s.arrival.rate *= factor
        if factor > 0:
            s.arrival.mean_on_s /= factor
            s.arrival.mean_off_s /= factor
        return s

    def with_rate(self, rate: float) -> "Scenario":
        base = self.arrival.rate
        if base <= 0:
            s = copy.deepcopy(self)
            s.arrival.rate = rate
            return s
        return self.scaled(rate / base)


def load_scenario(path: str | Path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()))


def generate_trace(scenario: Scenario, seed: int, duration: float) -> list[RequestSpec]:
    """Deterministic synthetic trace for ``scenario`` over ``[0, duration)``."""
    rng = np.random.default_rng(seed)
    arrivals = scenario.arrival.sample(rng, duration)
    weights = np.array([w for w, _ in scenario.templates], dtype=float)
    weights /= weights.sum()
    # Validate distributions even when the trace is empty.
    for _, t in scenario.templates:
        for dist in (t.prompt, t.output):
            lognormal_params(dist.mean, dist.std)
    reqs = []
    for k, t_arr in enumerate(arrivals):
        idx = int(rng.choice(len(weights), p=weights)) if len(weights) > 1 else 0
        tmpl = scenario.templates[idx][1]
        stages = tmpl.stages(rng)
        reqs.append(
            RequestSpec(
                id=f"r{k:06d}",
                arrival=round(float(t_arr), 9),
                stages=stages,
                value=tmpl.value,
                memory_units=memory_units_for(stages, scenario.memory_overprovision),
            )
        )
    for r in reqs:
        r.validate(scenario.slo)
    return reqs


# --------------------------------------------------------------------------
# Built-in scenario shapes (token statistics follow the evaluation datasets)

TIGHT, LOOSE = 0, 1
DEFAULT_SLO = {"tpot_tiers": [0.05, 0.1], "ttft_slowdown_tiers": [3.0, 5.0], "tpot_window": 10}

BUILTIN_SCENARIOS: dict[str, dict[str, Any]] = {
    "chatbot": {
        "name": "chatbot",
        "slo": DEFAULT_SLO,
        "arrival": {"process": "poisson", "rate": 1.0},
        "template": "chat",
        "prompt": {"mean": 763, "std": 424},
        "output": {"mean": 266, "std": 160},
        "prefill_tier": LOOSE,
        "decode_tier": LOOSE,
    },
    "coder": {
        "name": "coder",
        "slo": DEFAULT_SLO,
        "arrival": {"process": "bursty", "rate": 1.0, "on_multiplier": 4.0, "mean_on_s": 20.0, "mean_off_s": 60.0},
        "template": "chat",
        "prompt": {"mean": 847, "std": 617},
        "output": {"mean": 26, "std": 47},
        "prefill_tier": LOOSE,
        "decode_tier": TIGHT,
    },
    "summarizer": {
        "name": "summarizer",
        "slo": DEFAULT_SLO,
        "arrival": {"process": "poisson", "rate": 1.0},
        "template": "chat",
        "prompt": {"mean": 1333, "std": 444},
        "output": {"mean": 202, "std": 234},
        "prefill_tier": TIGHT,
        "decode_tier": LOOSE,
    },
    "toolllm": {
        "name": "toolllm",
        "slo": DEFAULT_SLO,
        "arrival": {"process": "bursty", "rate": 1.0},
        "template": "tool",
        "prompt": {"mean": 690, "std": 356},
        "output": {"mean": 116, "std": 66},
        "tool_response": {"mean": 150, "std": 80},
        "pairs_mean": 2.7,
        "pairs_std": 1.1,
        "prefill_tier": TIGHT,
        "loop_prefill_tier": TIGHT,
        "loop_decode_tier": TIGHT,
        "decode_tier": LOOSE,
    },
    "reasoning": {
        "name": "reasoning",
        "slo": DEFAULT_SLO,
        "arrival": {"process": "poisson", "rate": 1.0},
        "template": "reasoning",
        "prompt": {"mean": 127, "std": 83},
        "thinking": {"mean": 4693, "std": 1442},
        "output": {"mean": 803, "std": 280},
        "prefill_tier": TIGHT,
        "thinking_tier": TIGHT,
        "decode_tier": LOOSE,
    },
}
BUILTIN_SCENARIOS["mixed"] = {
    "name": "mixed",
    "slo": DEFAULT_SLO,
    "arrival": {"process": "poisson", "rate": 1.0},
    "mix": [
        dict(BUILTIN_SCENARIOS["chatbot"], weight=1.0),
        dict(BUILTIN_SCENARIOS["coder"], weight=1.0),
        dict(BUILTIN_SCENARIOS["summarizer"], weight=1.0),
    ],
}


def builtin_scenario(name: str, **arrival_overrides) -> Scenario:
    d = copy.deepcopy(BUILTIN_SCENARIOS[name])
    d.setdefault("arrival", {}).update(arrival_overrides)
    return Scenario.from_dict(d)
