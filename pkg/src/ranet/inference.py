"""Anytime and confidence-gated adaptive inference over a built graph.

Adaptive mode runs one sample at a time through the zigzag order and stops
at the first classifier whose softmax maximum reaches its threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, UsageError
from .network import Execution


@dataclass(frozen=True)
class ExitPolicy:
    """One confidence threshold per classifier; classifier K always answers."""

    thresholds: tuple

    @classmethod
    def scalar(cls, epsilon, num_classifiers):
        return cls((float(epsilon),) * int(num_classifiers))

    @classmethod
    def coerce(cls, policy, num_classifiers):
        if isinstance(policy, ExitPolicy):
            if len(policy.thresholds) != num_classifiers:
                raise UsageError(f"exit policy has {len(policy.thresholds)} thresholds, graph has {num_classifiers} classifiers")
            return policy
        if np.ndim(policy) == 0:
            return cls.scalar(policy, num_classifiers)
        return cls.coerce(cls(tuple(float(t) for t in policy)), num_classifiers)

    @property
    def num_classifiers(self):
        return len(self.thresholds)


def confidence(probs):
    """Maximum class probability."""
    return float(np.max(probs))


def argmax_lowest(probs):
    """Argmax with ties resolved toward the lowest class index."""
    return int(np.argmax(probs))


def select_exit(confidences, policy):
    """Smallest 1-based k with confidence_k >= threshold_k, else K."""
    K = len(confidences)
    policy = ExitPolicy.coerce(policy, K)
    for k in range(1, K):
        if confidences[k - 1] >= policy.thresholds[k - 1]:
            return k
    return K


@dataclass
class InferenceTrace:
    exit_index: int
    prediction: int
    confidence: float
    macs_used: int
    per_classifier_probs: list = field(default_factory=list)
    executed: list = field(default_factory=list)


def _as_batch(graph, batch):
    data = batch.data if isinstance(batch, ad.Tensor) else np.asarray(batch, dtype=np.float32)
    cfg = graph.config
    expected = (cfg.input_channels,) + tuple(cfg.input_resolution)
    if data.ndim != 4 or tuple(data.shape[1:]) != expected:
        raise DataError(f"input batch must have shape (N, {', '.join(map(str, expected))}), got {data.shape}")
    return data


def forward_anytime(graph, batch, chunk=256):
    """Softmax outputs of all K classifiers, each an (N, C) float64 matrix.

    Evaluation-mode batch norm; the batch is processed in chunks, which does
    not change any output because every op is per-sample in eval mode.
    """
    data = _as_batch(graph, batch)
    outs = [[] for _ in range(graph.num_classifiers)]
    for start in range(0, len(data), chunk):
        logits = Execution(graph, ad.Tensor(data[start:start + chunk])).run_all()
        for k, lg in enumerate(logits):
            outs[k].append(ad.softmax(lg))
    if not len(data):
        return [np.zeros((0, graph.config.num_classes)) for _ in outs]
    return [np.concatenate(o, axis=0) for o in outs]


def forward_adaptive(graph, sample, policy):
    """Run one sample lazily, exiting at the first confident classifier."""
    data = _as_batch(graph, sample if np.ndim(sample) == 4 else np.asarray(sample)[None])
    if len(data) != 1:
        raise DataError(f"adaptive inference takes a single sample, got a batch of {len(data)}")
    K = graph.num_classifiers
    policy = ExitPolicy.coerce(policy, K)
    run = Execution(graph, ad.Tensor(data))
    probs = []
    for k in range(1, K + 1):
        p = ad.softmax(run.run_to_head(k))[0]
        probs.append(p)
        if k == K or confidence(p) >= policy.thresholds[k - 1]:
            break
    k_star = len(probs)
    p = probs[-1]
    return InferenceTrace(k_star, argmax_lowest(p), confidence(p), run.macs, probs, list(run.executed))


TRACE_COLUMNS = ("sample_id", "exit_index", "prediction", "label", "confidence", "macs_used")


def write_traces(path, traces, labels=None):
    """One CSV row per sample; ``label`` is blank when unknown."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i, t in enumerate(traces):
            label = "" if labels is None else int(labels[i])
            w.writerow([i, t.exit_index, t.prediction, label, f"{t.confidence:.6f}", t.macs_used])
    return path
