"""Metrics, baselines, and external-prediction scoring.

Localization metrics (top-k hit, precision@k) are computed on buggy samples
only; detection accuracy covers all samples. Precision@k divides the number
of true buggy lines ranked in the top k by min(k, number of buggy lines),
so a perfect short ranking scores 1.0 even when k exceeds the bug size.

Besides scoring the probe's rankings, this module evaluates two reference
points: uniformly random rankings (Monte Carlo, cross-checked against the
closed form) and a logistic-regression probe on the final token whose
per-token scores are pushed through the same line aggregation as the
attention rankings.

Predictions from prompting-style tools arrive as JSON with a
"faultLocalization" array of {"lineNumber", "codeContent"} objects;
line numbers there are 1-based. Entries with a missing or out-of-range
line number fall back to matching their code text against the sample's
lines; entries that still match nothing are dropped (counted), and
unparseable responses score zero on every hit metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .errors import BugprobeError
from .localize import LineRanking, aggregate
from .repstore import CodeRecord, RepRecord
from .trainer import AdamW, TrainSample, split as stratified_split


class EvalError(BugprobeError):
    pass


class ExternalParseError(EvalError):
    """External prediction text is not usable JSON."""


TOP_K_LEVELS = (1, 3, 5)
PRECISION_LEVELS = (2, 3, 5)
LENGTH_BUCKET = 10


def top_k_hit(order: Sequence[int], buggy_lines: Iterable[int], k: int) -> int:
    """1 if any ground-truth line appears in the first k predictions."""
    buggy = set(buggy_lines)
    if not buggy:
        raise EvalError("top_k_hit needs a nonempty ground-truth line set")
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    return int(bool(buggy.intersection(order[:k])))


def precision_at_k(order: Sequence[int], buggy_lines: Iterable[int], k: int) -> float:
    """|top-k ∩ buggy| / min(k, |buggy|)."""
    buggy = set(buggy_lines)
    if not buggy:
        raise EvalError("precision_at_k needs a nonempty ground-truth line set")
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    correct = len(buggy.intersection(order[:k]))
    return correct / min(k, len(buggy))


def exact_random_hit_rate(num_lines: int, n_buggy: int, k: int) -> float:
    """P(a uniformly random ranking hits within top k) = 1 - C(L-b, k)/C(L, k)."""
    if num_lines < 1:
        raise EvalError(f"num_lines must be >= 1, got {num_lines}")
    if n_buggy == 0:
        return 0.0
    k = min(k, num_lines)
    if k > num_lines - n_buggy:
        return 1.0
    return 1.0 - math.comb(num_lines - n_buggy, k) / math.comb(num_lines, k)


@dataclass
class RandomBaseline:
    estimate: float
    exact: float
    trials: int


def random_baseline(num_lines: int, buggy_lines: Iterable[int], k: int, seed: int,
                    trials: int = 10_000) -> RandomBaseline:
    """Monte-Carlo top-k hit rate of random rankings, with the closed form attached."""
    buggy = {int(b) for b in buggy_lines}
    if num_lines < 1:
        raise EvalError(f"num_lines must be >= 1, got {num_lines}")
    if any(not 0 <= b < num_lines for b in buggy):
        raise EvalError("buggy line outside [0, num_lines)")
    exact = exact_random_hit_rate(num_lines, len(buggy), k)
    rng = np.random.Generator(np.random.PCG64(seed))
    kk = min(k, num_lines)
    hits = 0
    for _ in range(trials):
        perm = rng.permutation(num_lines)
        hits += int(bool(buggy.intersection(perm[:kk].tolist())))
    return RandomBaseline(estimate=hits / trials, exact=exact, trials=trials)


# ---------------------------------------------------------------------------
# Linear probe baseline
# ---------------------------------------------------------------------------

@dataclass
class LinearProbe:
    """Logistic regression on the final-token representation."""

    weights: np.ndarray
    bias: float

    def token_scores(self, data: np.ndarray) -> np.ndarray:
        logits = np.asarray(data, dtype=np.float64) @ self.weights + self.bias
        return np.array([ad.sigmoid_value(float(z)) for z in logits])

    def detect(self, data: np.ndarray) -> float:
        return float(self.token_scores(np.asarray(data)[-1:, :])[0])


def linear_probe_train(samples: Sequence[TrainSample], *, epochs: int = 30,
                       learning_rate: float = 1e-4, weight_decay: float = 0.1,
                       batch_size: int = 16, val_fraction: float = 0.2,
                       seed: int = 0) -> LinearProbe:
    """Train the last-token logistic baseline; keeps the best-validation epoch."""
    if not samples:
        raise EvalError("empty dataset")
    dims = {s.data.shape[1] for s in samples}
    if len(dims) > 1:
        raise EvalError(f"mixed hidden dimensions in dataset: {sorted(dims)}")
    d = dims.pop()

    by_id = {s.sample_id: s for s in samples}
    train_ids, val_ids = stratified_split([(s.sample_id, s.label) for s in samples],
                                          val_fraction, seed)
    train_set = [by_id[i] for i in train_ids]
    val_set = [by_id[i] for i in val_ids]

    w = ad.Tensor(np.zeros((d, 1), dtype=np.float32), requires_grad=True)
    b = ad.Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    opt = AdamW([w, b], lr=learning_rate, weight_decay=weight_decay)

    def val_accuracy() -> float:
        probe = LinearProbe(weights=w.data[:, 0].astype(np.float64), bias=float(b.data[0]))
        good = sum(int((probe.detect(s.data) >= 0.5) == bool(s.label)) for s in val_set)
        return good / len(val_set)

    best = (-1.0, w.data.copy(), b.data.copy())
    for epoch in range(1, epochs + 1):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 201, epoch))))
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), batch_size):
            batch = [train_set[i] for i in order[start:start + batch_size]]
            opt.zero_grad()
            for s in batch:
                last = ad.Tensor(s.data[-1:, :].astype(np.float32))
                logit = ad.add_rowvec(last @ w, b)
                loss = ad.bce_with_logits(logit, s.label)
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
        acc = val_accuracy()
        if acc > best[0]:
            best = (acc, w.data.copy(), b.data.copy())
    _, w_best, b_best = best
    return LinearProbe(weights=w_best[:, 0].astype(np.float64), bias=float(b_best[0]))


def linear_probe_localize(probe: LinearProbe, data: np.ndarray, token_line: np.ndarray,
                          sample_id: str = "") -> LineRanking:
    """Score every token with the trained classifier and aggregate per line.

    Token scores are scaled to unit total mass first; scaling preserves the
    ranking and keeps the result inside the LineRanking contract.
    """
    scores = probe.token_scores(data)
    total = scores.sum()
    if total > 0:
        scores = scores / total
    ranking = aggregate(scores, token_line, sample_id=sample_id)
    ranking.detect_prob = probe.detect(data)
    return ranking


# ---------------------------------------------------------------------------
# External (prompting-style) predictions
# ---------------------------------------------------------------------------

@dataclass
class ExternalPrediction:
    """Parsed prompting output: ranked (1-based line number, code text) pairs."""

    items: list[tuple[Optional[int], Optional[str]]]


def parse_external(text: str) -> ExternalPrediction:
    """Parse a faultLocalization JSON payload (object or bare array)."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExternalParseError(f"not valid JSON: {exc}") from exc
    if isinstance(obj, dict):
        arr = obj.get("faultLocalization")
    else:
        arr = obj
    if not isinstance(arr, list):
        raise ExternalParseError("no faultLocalization array found")
    items: list[tuple[Optional[int], Optional[str]]] = []
    for entry in arr:
        if not isinstance(entry, dict):
            raise ExternalParseError(f"prediction entry is not an object: {entry!r}")
        number = entry.get("lineNumber")
        content = entry.get("codeContent")
        items.append((int(number) if isinstance(number, (int, float)) else None,
                      str(content) if content is not None else None))
    return ExternalPrediction(items=items)


def resolve_external(prediction: ExternalPrediction,
                     code: CodeRecord) -> tuple[list[int], int]:
    """Map parsed entries to 0-based line indices.

    A valid 1-based lineNumber wins; otherwise the entry's code text is
    matched (trimmed, exact) against the sample's lines and the first match
    is used. Returns (ranked unique lines, dropped entry count).
    """
    lines = code.lines
    stripped = [ln.strip() for ln in lines]
    resolved: list[int] = []
    dropped = 0
    for number, content in prediction.items:
        index: Optional[int] = None
        if number is not None and 1 <= number <= len(lines):
            index = number - 1
        elif content is not None and content.strip() in stripped:
            index = stripped.index(content.strip())
        if index is None:
            dropped += 1
        elif index not in resolved:
            resolved.append(index)
    return resolved, dropped


def ingest_external(text: str, code: CodeRecord) -> tuple[list[int], int]:
    """Parse + resolve; raises ExternalParseError on unusable JSON."""
    return resolve_external(parse_external(text), code)


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

@dataclass
class TruthEntry:
    sample_id: str
    label: int
    buggy_lines: frozenset[int]
    num_lines: int

    @classmethod
    def from_code(cls, code: CodeRecord) -> "TruthEntry":
        return cls(sample_id=code.sample_id, label=code.label,
                   buggy_lines=frozenset(code.buggy_lines), num_lines=code.num_lines)

    @classmethod
    def from_record(cls, record: RepRecord) -> "TruthEntry":
        return cls(sample_id=record.sample_id, label=record.label,
                   buggy_lines=frozenset(record.buggy_lines), num_lines=record.num_lines)


@dataclass
class SampleRow:
    sample_id: str
    label: int
    num_lines: int
    hits: dict[int, int] = field(default_factory=dict)
    precisions: dict[int, float] = field(default_factory=dict)
    detect_correct: Optional[int] = None
    fold: Optional[int] = None


@dataclass
class EvalReport:
    n_samples: int
    n_buggy: int
    top_k_accuracy: dict[int, float]
    precision_at_k: dict[int, float]
    detection_accuracy: Optional[float]
    length_buckets: list[dict]
    rows: list[SampleRow]
    dropped_predictions: int = 0
    fold_top1: Optional[dict[int, float]] = None

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_buggy": self.n_buggy,
            "top_k_accuracy": {str(k): v for k, v in self.top_k_accuracy.items()},
            "precision_at_k": {str(k): v for k, v in self.precision_at_k.items()},
            "detection_accuracy": self.detection_accuracy,
            "length_buckets": self.length_buckets,
            "dropped_predictions": self.dropped_predictions,
            "fold_top1": ({str(k): v for k, v in self.fold_top1.items()}
                          if self.fold_top1 is not None else None),
            "rows": [{
                "sample_id": r.sample_id,
                "label": r.label,
                "num_lines": r.num_lines,
                "hits": {str(k): v for k, v in r.hits.items()},
                "precisions": {str(k): v for k, v in r.precisions.items()},
                "detect_correct": r.detect_correct,
                "fold": r.fold,
            } for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def format_table(self) -> str:
        rows = [("samples", f"{self.n_samples}"),
                ("buggy samples", f"{self.n_buggy}")]
        for k in sorted(self.top_k_accuracy):
            rows.append((f"top-{k} accuracy", f"{self.top_k_accuracy[k]:.4f}"))
        for k in sorted(self.precision_at_k):
            rows.append((f"precision@{k}", f"{self.precision_at_k[k]:.4f}"))
        if self.detection_accuracy is not None:
            rows.append(("detection accuracy", f"{self.detection_accuracy:.4f}"))
        for bucket in self.length_buckets:
            rows.append((f"top-1 ({bucket['bucket']} lines, n={bucket['n']})",
                         f"{bucket['top1']:.4f}"))
        if self.dropped_predictions:
            rows.append(("dropped prediction entries", f"{self.dropped_predictions}"))
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def _bucket_label(num_lines: int) -> str:
    lo = ((num_lines - 1) // LENGTH_BUCKET) * LENGTH_BUCKET + 1
    return f"{lo}-{lo + LENGTH_BUCKET - 1}"


Prediction = Union[Sequence[int], LineRanking]


def _order_of(prediction: Prediction) -> list[int]:
    if isinstance(prediction, LineRanking):
        return list(prediction.order)
    return [int(i) for i in prediction]


def evaluate(predictions: Mapping[str, Prediction],
             truth: Mapping[str, TruthEntry],
             detect_probs: Optional[Mapping[str, float]] = None,
             fold_ids: Optional[Mapping[str, int]] = None,
             dropped_predictions: int = 0) -> EvalReport:
    """Score predictions against ground truth.

    Every buggy truth sample must have a prediction; an empty list is an
    explicit miss. Aggregate numbers are arithmetic means of the per-sample
    rows. When fold ids are supplied, per-fold top-1 is reported as well.
    """
    unknown = sorted(set(predictions) - set(truth))
    if unknown:
        raise EvalError(f"predictions for unknown sample ids: {unknown[:5]}")

    rows: list[SampleRow] = []
    for sid in truth:
        entry = truth[sid]
        row = SampleRow(sample_id=sid, label=entry.label, num_lines=entry.num_lines,
                        fold=fold_ids.get(sid) if fold_ids else None)
        if entry.label == 1:
            if sid not in predictions:
                raise EvalError(f"buggy sample {sid!r} has no prediction")
            order = _order_of(predictions[sid])
            for k in TOP_K_LEVELS:
                row.hits[k] = int(bool(entry.buggy_lines.intersection(order[:k])))
            for k in PRECISION_LEVELS:
                correct = len(entry.buggy_lines.intersection(order[:k]))
                row.precisions[k] = correct / min(k, len(entry.buggy_lines))
        if detect_probs is not None and sid in detect_probs:
            row.detect_correct = int((detect_probs[sid] >= 0.5) == bool(entry.label))
        rows.append(row)

    buggy_rows = [r for r in rows if r.label == 1]
    n_buggy = len(buggy_rows)
    top_k_accuracy = {k: (sum(r.hits[k] for r in buggy_rows) / n_buggy if n_buggy else 0.0)
                      for k in TOP_K_LEVELS}
    precision = {k: (sum(r.precisions[k] for r in buggy_rows) / n_buggy if n_buggy else 0.0)
                 for k in PRECISION_LEVELS}

    detect_rows = [r for r in rows if r.detect_correct is not None]
    detection_accuracy = (sum(r.detect_correct for r in detect_rows) / len(detect_rows)
                          if detect_rows else None)

    buckets: dict[str, list[int]] = {}
    for r in buggy_rows:
        buckets.setdefault(_bucket_label(r.num_lines), []).append(r.hits[1])
    length_buckets = [{"bucket": label, "n": len(hits), "top1": sum(hits) / len(hits)}
                      for label, hits in sorted(buckets.items(),
                                                key=lambda kv: int(kv[0].split("-")[0]))]

    fold_top1 = None
    if fold_ids:
        fold_groups: dict[int, list[int]] = {}
        for r in buggy_rows:
            if r.fold is not None:
                fold_groups.setdefault(r.fold, []).append(r.hits[1])
        fold_top1 = {f: sum(h) / len(h) for f, h in sorted(fold_groups.items())}

    return EvalReport(n_samples=len(rows), n_buggy=n_buggy,
                      top_k_accuracy=top_k_accuracy, precision_at_k=precision,
                      detection_accuracy=detection_accuracy,
                      length_buckets=length_buckets, rows=rows,
                      dropped_predictions=dropped_predictions, fold_top1=fold_top1)
