"""Batch execution-time model.

A batched forward pass is modeled as the max of a few affine terms in the
total token count and the drafter step count::

    T(n, s) = max_l (k1_l * n + k2_l * s + b_l)

Each term stands for a bottleneck (compute, weight streaming, drafter
overhead).  ``time2bs`` inverts the model along the token axis and is the
workhorse of the batch planner.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from .errors import (
    DegenerateSamplesError,
    InfeasibleBudgetError,
    InsufficientSamplesError,
    ParseError,
)

# Absolute slack (seconds) when comparing a predicted latency to a budget.
TIME_EPS = 1e-12
DEFAULT_MAX_TOKENS = 16384


@dataclass(frozen=True)
class ProfileSample:
    num_tokens: int
    spec_step: int
    latency: float

    def __post_init__(self):
        if self.num_tokens < 1:
            raise ValueError("num_tokens must be >= 1")
        if self.spec_step < 0:
            raise ValueError("spec_step must be >= 0")
        if not self.latency > 0:
            raise ValueError("latency must be > 0")


@dataclass(frozen=True)
class PerfModel:
    """Immutable max-of-affine latency model.

    ``terms`` holds ``(k1, k2, b)`` triples: seconds per token, seconds per
    drafter step and a constant.
    """

    terms: tuple[tuple[float, float, float], ...]
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if not self.terms:
            raise ValueError("a PerfModel needs at least one term")
        terms = tuple(tuple(float(x) for x in t) for t in self.terms)
        for k1, k2, b in terms:
            if k1 < 0 or k2 < 0 or b < 0:
                raise ValueError(f"negative coefficient in term {(k1, k2, b)}")
        object.__setattr__(self, "terms", terms)

    def predict(self, num_tokens: int, spec_step: int = 0) -> float:
        if num_tokens < 1:
            raise ValueError("num_tokens must be >= 1")
        return max(k1 * num_tokens + k2 * spec_step + b for k1, k2, b in self.terms)

    def predict_many(self, num_tokens, spec_step=0) -> np.ndarray:
        n = np.asarray(num_tokens, dtype=float)
        s = np.broadcast_to(np.asarray(spec_step, dtype=float), n.shape)
        coef = np.asarray(self.terms)
        return np.max(np.outer(n, coef[:, 0]) + np.outer(s, coef[:, 1]) + coef[:, 2], axis=1)

    def time2bs(self, budget: float, spec_step: int = 0) -> int:
        """Largest token count whose predicted latency fits in ``budget``.

        Solved per term in closed form, then nudged by one token in either
        direction so that rounding can never break the inverse property.
        """
        if self.predict(1, spec_step) > budget + TIME_EPS:
            raise InfeasibleBudgetError(
                f"budget {budget:.6g}s is below single-token latency "
                f"{self.predict(1, spec_step):.6g}s"
            )
        limit = float(self.max_tokens)
        for k1, k2, b in self.terms:
            if k1 > 0:
                limit = min(limit, (budget + TIME_EPS - k2 * spec_step - b) / k1)
        n = max(1, min(self.max_tokens, int(math.floor(limit))))
        while n > 1 and self.predict(n, spec_step) > budget + TIME_EPS:
            n -= 1
        while n < self.max_tokens and self.predict(n + 1, spec_step) <= budget + TIME_EPS:
            n += 1
        return n

    def time2bs_bisect(self, budget: float, spec_step: int = 0) -> int:
        """Reference inverse by binary search over ``[1, max_tokens]``."""
        if self.predict(1, spec_step) > budget + TIME_EPS:
            raise InfeasibleBudgetError(f"budget {budget:.6g}s below single-token latency")
        lo, hi = 1, self.max_tokens
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.predict(mid, spec_step) <= budget + TIME_EPS:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def to_dict(self) -> dict:
        return {
            "terms": [{"k1": k1, "k2": k2, "b": b} for k1, k2, b in self.terms],
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PerfModel":
        terms = tuple((t["k1"], t["k2"], t["b"]) for t in data["terms"])
        return cls(terms, int(data.get("max_tokens", DEFAULT_MAX_TOKENS)))


def predict(model: PerfModel, num_tokens: int, spec_step: int = 0) -> float:
    return model.predict(num_tokens, spec_step)


def time2bs(model: PerfModel, budget: float, spec_step: int = 0) -> int:
    return model.time2bs(budget, spec_step)


def _design(samples: Sequence[ProfileSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([[s.num_tokens, s.spec_step, 1.0] for s in samples], dtype=float)
    y = np.array([s.latency for s in samples], dtype=float)
    return X, y


def _fit_group(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Columns are rescaled so NNLS is not dominated by the token column.
    scale = np.maximum(np.abs(X).max(axis=0), 1e-12)
    coef, _ = nnls(X / scale, y)
    return coef / scale


def fit(samples: Sequence[ProfileSample], num_terms: int = 2, max_iter: int = 100) -> PerfModel:
    """Fit a max-of-affine model by alternating regime assignment.

    Samples start split into ``num_terms`` contiguous groups by token count;
    each round refits every group with nonnegative least squares and then
    reassigns every sample to the term that currently attains the max.  The
    best model seen (lowest squared error) is returned.
    """
    samples = list(samples)
    if num_terms < 1:
        raise ValueError("num_terms must be >= 1")
    if len(samples) < 3 * num_terms:
        raise InsufficientSamplesError(
            f"need at least {3 * num_terms} samples for {num_terms} terms, got {len(samples)}"
        )
    if len({s.num_tokens for s in samples}) < 2:
        raise DegenerateSamplesError("all samples share the same num_tokens")

    X, y = _design(samples)
    order = np.argsort(X[:, 0], kind="stable")
    assign = np.empty(len(samples), dtype=int)
    for g, idx in enumerate(np.array_split(order, num_terms)):
        assign[idx] = g

    coefs = np.zeros((num_terms, 3))
    best, best_sse = None, math.inf
    for _ in range(max_iter):
        for g in range(num_terms):
            mask = assign == g
            if mask.any():
                coefs[g] = _fit_group(X[mask], y[mask])
        pred_terms = X @ coefs.T
        sse = float(np.sum((pred_terms.max(axis=1) - y) ** 2))
        if sse < best_sse - 1e-18:
            best, best_sse = coefs.copy(), sse
        new_assign = np.argmax(pred_terms, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    terms = sorted((tuple(float(max(0.0, c)) for c in row) for row in best), key=lambda t: (t[0], t[2]))
    return PerfModel(tuple(terms))


def r_squared(model: PerfModel, samples: Sequence[ProfileSample]) -> float:
    X, y = _design(samples)
    pred = model.predict_many(X[:, 0], X[:, 1])
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


def load_profile(path: str | Path) -> list[ProfileSample]:
    """Read ``num_tokens,spec_step,latency_seconds`` rows (header required)."""
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("missing header row", 1)
        cols = [c.strip() for c in header]
        if cols != ["num_tokens", "spec_step", "latency_seconds"]:
            raise ParseError(f"unexpected header {cols}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", lineno)
            try:
                samples.append(ProfileSample(int(row[0]), int(row[1]), float(row[2])))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return samples


def write_profile(path: str | Path, samples: Iterable[ProfileSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["num_tokens", "spec_step", "latency_seconds"])
        for s in samples:
            w.writerow([s.num_tokens, s.spec_step, repr(s.latency)])


def save_model(model: PerfModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_model(path: str | Path) -> PerfModel:
    return PerfModel.from_dict(json.loads(Path(path).read_text()))


def synthetic_profile(
    model: PerfModel,
    num_tokens: Sequence[int],
    spec_steps: Sequence[int] = (0,),
    noise: float = 0.0,
    seed: int = 0,
) -> list[ProfileSample]:
    """Profile samples drawn from ``model`` with multiplicative Gaussian noise."""
    rng = np.random.default_rng(seed)
    out = []
    for s in spec_steps:
        for n in num_tokens:
            lat = model.predict(int(n), int(s))
            if noise:
                lat *= max(1e-3, 1.0 + rng.normal(0.0, noise))
            out.append(ProfileSample(int(n), int(s), lat))
    return out
