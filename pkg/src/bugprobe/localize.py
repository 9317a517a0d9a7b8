"""Token-to-line aggregation and ranking.

A line's score is the sum of the head-averaged attention over the tokens
mapped to it. Tokens mapped to -1 (specials) contribute to no line; their
mass shows up as 1 - coverage_mass, which is reported rather than
renormalized away since renormalizing would not change the ranking but
would hide a useful diagnostic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import BugprobeError
from .probe import ProbeModel, forward
from .repstore import RepRecord


class LocalizeError(BugprobeError):
    pass


@dataclass
class LineRanking:
    """Per-line scores plus the descending-score line order.

    order is a permutation of range(L); ties rank the lower line index
    first, and lines with no tokens score 0 but remain rankable.
    """

    line_scores: np.ndarray
    order: list[int]
    coverage_mass: float
    sample_id: str = ""
    detect_prob: Optional[float] = None

    @property
    def num_lines(self) -> int:
        return len(self.line_scores)

    def to_json(self, top_k: Optional[int] = None) -> str:
        order = self.order if top_k is None else self.order[:top_k]
        obj = {
            "sample_id": self.sample_id,
            "line_scores": [float(s) for s in self.line_scores],
            "order": list(order),
            "coverage_mass": float(self.coverage_mass),
        }
        if self.detect_prob is not None:
            obj["detect_prob"] = float(self.detect_prob)
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "LineRanking":
        try:
            obj = json.loads(text)
            return cls(line_scores=np.asarray(obj["line_scores"], dtype=np.float64),
                       order=[int(i) for i in obj["order"]],
                       coverage_mass=float(obj["coverage_mass"]),
                       sample_id=str(obj["sample_id"]),
                       detect_prob=(float(obj["detect_prob"])
                                    if "detect_prob" in obj else None))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise LocalizeError(f"malformed ranking JSON: {exc}") from exc


def aggregate(a_bar: Sequence[float], token_line: Sequence[int],
              sample_id: str = "") -> LineRanking:
    """Sum per-token scores into per-line scores and rank lines by them.

    Scores accumulate in token order, so the result is bit-identical to a
    naive per-line scan over the token sequence.
    """
    a_bar = np.asarray(a_bar, dtype=np.float64)
    token_line = np.asarray(token_line, dtype=np.int64)
    if a_bar.ndim != 1 or token_line.shape != a_bar.shape:
        raise LocalizeError(
            f"length mismatch: scores {a_bar.shape} vs token_line {token_line.shape}")
    if (a_bar < 0).any():
        raise LocalizeError("negative attention scores")
    if (token_line < -1).any():
        raise LocalizeError("token_line values below -1")

    mapped = token_line >= 0
    num_lines = int(token_line[mapped].max()) + 1 if mapped.any() else 0
    scores = np.zeros(num_lines, dtype=np.float64)
    coverage = 0.0
    for t in range(len(a_bar)):
        line = token_line[t]
        if line >= 0:
            scores[line] += a_bar[t]
            coverage += a_bar[t]
    order = sorted(range(num_lines), key=lambda i: (-scores[i], i))
    return LineRanking(line_scores=scores, order=order, coverage_mass=coverage,
                       sample_id=sample_id)


def top_k(ranking: LineRanking, k: int) -> list[int]:
    if k < 1:
        raise LocalizeError(f"k must be >= 1, got {k}")
    return ranking.order[:min(k, ranking.num_lines)]


def localize_record(model: ProbeModel, record: RepRecord) -> LineRanking:
    """Forward pass plus aggregation; pure in (model, record)."""
    if record.d != model.config.d_in:
        raise LocalizeError(
            f"record {record.sample_id!r} has d={record.d} but the model expects "
            f"d_in={model.config.d_in}")
    out = forward(model, record.data)
    return aggregate(out.a_bar, record.token_line, sample_id=record.sample_id)
