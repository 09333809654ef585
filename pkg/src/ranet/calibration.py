"""Threshold calibration against compute budgets, plus evaluation reports.

A validation trace stores every classifier's confidence and correctness
per sample, so any threshold can be simulated without re-running the
network. Exit simulation and adaptive inference apply the same rule,
which makes simulated exits and real exits identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InfeasibleBudgetError, UsageError
from .inference import ExitPolicy, forward_adaptive, forward_anytime


@dataclass
class ValidationTrace:
    confidences: np.ndarray  # (N, K) max softmax probability
    correct: np.ndarray  # (N, K) bool
    costs: np.ndarray  # (K,) prefix MACs, int64

    @property
    def num_samples(self):
        return self.confidences.shape[0]

    @property
    def num_classifiers(self):
        return self.confidences.shape[1]

    @classmethod
    def from_probs(cls, probs, labels, costs):
        labels = np.asarray(labels)
        conf = np.stack([p.max(axis=1) for p in probs], axis=1)
        correct = np.stack([np.argmax(p, axis=1) == labels for p in probs], axis=1)
        return cls(conf, correct, np.asarray(costs, dtype=np.int64))


def collect_validation_traces(graph, images, labels):
    """One anytime forward over normalized validation ``images``."""
    if not len(labels):
        raise DataError("validation set is empty")
    return ValidationTrace.from_probs(forward_anytime(graph, images), labels, graph.prefix_costs())


def simulate_exits(confidences, policy):
    """1-based exit index per row; the last classifier always accepts."""
    conf = np.asarray(confidences)
    K = conf.shape[1]
    thr = np.asarray(ExitPolicy.coerce(policy, K).thresholds)
    ok = conf >= thr
    ok[:, -1] = True
    return np.argmax(ok, axis=1) + 1


def _mean_cost(exits, costs):
    return float(np.sum(costs[exits - 1])) / len(exits)


def expected_cost(trace, epsilon):
    return _mean_cost(simulate_exits(trace.confidences, epsilon), trace.costs)


def candidate_thresholds(trace):
    """Distinct confidences of classifiers 1..K-1, ascending.

    Only these values change which samples exit, so the expected cost is
    constant between consecutive candidates.
    """
    c = np.unique(trace.confidences[:, :-1])
    return c if c.size else np.array([0.0])


def candidate_costs(trace, candidates=None, chunk=128):
    """Expected cost at every candidate threshold (vectorized scan)."""
    cand = candidate_thresholds(trace) if candidates is None else np.asarray(candidates)
    conf = trace.confidences[:, :-1]
    N, K = trace.confidences.shape
    out = np.empty(len(cand))
    for s in range(0, len(cand), chunk):
        e = cand[s:s + chunk]
        ok = conf[None, :, :] >= e[:, None, None]
        ok = np.concatenate([ok, np.ones((len(e), N, 1), bool)], axis=2)
        exits = np.argmax(ok, axis=2)
        out[s:s + chunk] = trace.costs[exits].sum(axis=1) / N
    return out


def threshold_for_budget(trace, budget):
    """Largest candidate epsilon whose expected validation cost is within ``budget``."""
    minimum = int(trace.costs[0])
    if budget < minimum:
        raise InfeasibleBudgetError(budget, minimum)
    cand = candidate_thresholds(trace)
    costs = candidate_costs(trace, cand)
    feasible = np.flatnonzero(costs <= budget)
    return float(cand[feasible[-1]])


@dataclass
class BudgetReport:
    budget: float
    epsilon: float
    expected_val_cost: float
    accuracy: float
    avg_cost: float
    histogram: list  # exits per classifier
    num_samples: int

    def recomputed_cost(self, costs):
        return float(np.sum(np.asarray(self.histogram, dtype=np.int64) * np.asarray(costs, dtype=np.int64))) / self.num_samples


def report_from_exits(exits, correct, costs, budget, epsilon, expected_val_cost):
    exits = np.asarray(exits)
    costs = np.asarray(costs, dtype=np.int64)
    K = len(costs)
    hist = np.bincount(exits - 1, minlength=K).astype(np.int64)
    n = len(exits)
    avg = float(np.sum(hist * costs)) / n if n else 0.0
    acc = float(np.mean(correct)) if n else 0.0
    return BudgetReport(float(budget), float(epsilon), float(expected_val_cost), acc, avg, hist.tolist(), n)


def evaluate_budgeted(graph, images, labels, epsilon, budget=float("nan"), expected_val_cost=float("nan")):
    """Adaptive inference on every sample of normalized ``images``."""
    traces = [forward_adaptive(graph, images[i], epsilon) for i in range(len(labels))]
    exits = np.array([t.exit_index for t in traces], dtype=np.int64)
    correct = np.array([t.prediction == int(y) for t, y in zip(traces, labels)])
    rep = report_from_exits(exits, correct, graph.prefix_costs(), budget, epsilon, expected_val_cost)
    return rep, traces


def simulate_budgeted(trace, epsilon, budget=float("nan")):
    """Budget report computed from a stored trace of the test set."""
    exits = simulate_exits(trace.confidences, epsilon)
    correct = trace.correct[np.arange(len(exits)), exits - 1]
    return report_from_exits(exits, correct, trace.costs, budget, epsilon, float("nan"))


def anytime_curve(graph, images, labels):
    """(prefix MACs, accuracy) per classifier."""
    probs = forward_anytime(graph, images)
    labels = np.asarray(labels)
    return [(graph.count_flops(k), float(np.mean(np.argmax(p, axis=1) == labels)) if len(labels) else 0.0)
            for k, p in enumerate(probs, start=1)]


def resolve_budgets(values, full_cost, unit="fraction"):
    """Budgets in MACs from fractions of the full network cost or absolute MACs."""
    if unit == "fraction":
        return [float(v) * full_cost for v in values]
    if unit == "macs":
        return [float(v) for v in values]
    raise UsageError(f"budget unit must be 'fraction' or 'macs', got {unit!r}")


ANYTIME_COLUMNS = ("classifier", "macs", "accuracy")
BUDGET_COLUMNS = ("budget", "epsilon", "accuracy", "avg_macs", "expected_val_macs", "exit_histogram")


def _writer(path):
    fh = Path(path).open("w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_anytime_csv(path, curve):
    fh, w = _writer(path)
    with fh:
        w.writerow(ANYTIME_COLUMNS)
        for k, (macs, acc) in enumerate(curve, start=1):
            w.writerow([k, int(macs), f"{acc:.6f}"])
    return Path(path)


def write_budget_csv(path, reports):
    fh, w = _writer(path)
    with fh:
        w.writerow(BUDGET_COLUMNS)
        for r in reports:
            w.writerow([f"{r.budget:.1f}", f"{r.epsilon:.10f}", f"{r.accuracy:.6f}", f"{r.avg_cost:.3f}",
                        f"{r.expected_val_cost:.3f}", ";".join(str(h) for h in r.histogram)])
    return Path(path)


def export_reports(out_dir, curve=(), reports=()):
    """Write anytime.csv and budgeted.csv into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return write_anytime_csv(out / "anytime.csv", curve), write_budget_csv(out / "budgeted.csv", reports)
    except OSError as exc:
        raise UsageError(f"cannot write reports to {out}: {exc}") from exc
