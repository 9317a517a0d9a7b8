"""Deterministic synthetic datasets with planted line-level signal.

Every sample is a matrix of Gaussian token vectors grouped into lines. In
buggy samples a seed-derived unit direction is added to every token of the
planted lines, so bugginess is detectable from the representations and the
planted lines are the ground-truth localization target. An analytic oracle
(project each token onto the planted direction, sum per line) upper-bounds
what any trained model can do on these sets.

The conjunctive variant plants two different directions on two different
lines of buggy samples and exactly one of them on clean samples, keeping
the final line untouched: the last-token representation then carries no
label signal at all, which separates attention pooling from last-token
probes.

Generation is deterministic per seed; each sample draws from its own
generator keyed by (seed, split, index), so any record can be regenerated
in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .errors import BugprobeError
from .repstore import (CodeRecord, Manifest, ManifestEntry, RepRecord,
                       write_code_records, write_manifest, write_record_file)

_MU_TAG = 0
_SAMPLE_TAG = 1
_SPLIT_IDS = {"train": 0, "test": 1}


class SynthError(BugprobeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 2000
    n_test: int = 400
    d: int = 32
    min_lines: int = 3
    max_lines: int = 12
    min_tokens_per_line: int = 2
    max_tokens_per_line: int = 8
    min_buggy_lines: int = 1
    max_buggy_lines: int = 3
    signal_strength: float = 2.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 2 or self.n_test < 2:
            raise SynthError("need at least 2 samples per split")
        if not 1 <= self.min_lines <= self.max_lines:
            raise SynthError("bad line count range")
        if not 1 <= self.min_tokens_per_line <= self.max_tokens_per_line:
            raise SynthError("bad tokens-per-line range")
        if not 1 <= self.min_buggy_lines <= self.max_buggy_lines:
            raise SynthError("bad buggy-lines range")
        if self.signal_strength < 0:
            raise SynthError("signal_strength must be >= 0 (0 = no-signal control)")
        if self.noise_std <= 0:
            raise SynthError("noise_std must be > 0")
        if self.d < 1:
            raise SynthError("d must be >= 1")


@dataclass
class SynthDataset:
    train_manifest: Path
    test_manifest: Path
    truth: Path


def signal_directions(config: SynthConfig, n: int = 1) -> np.ndarray:
    """(n, d) orthonormal seed-derived unit directions."""
    if n > config.d:
        raise SynthError(f"cannot draw {n} orthogonal directions in d={config.d}")
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((config.seed, _MU_TAG))))
    raw = rng.normal(0.0, 1.0, size=(n, config.d))
    # Gram-Schmidt; inputs are generic so no degenerate pivots in practice.
    basis = []
    for v in raw:
        for b in basis:
            v = v - (v @ b) * b
        basis.append(v / np.linalg.norm(v))
    return np.asarray(basis)


def _sample_rng(config: SynthConfig, split: str, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((config.seed, _SAMPLE_TAG, _SPLIT_IDS[split], index))))


def _synthetic_code(sample_id: str, tokens_per_line: np.ndarray) -> str:
    lines = []
    for i, n in enumerate(tokens_per_line):
        lines.append(" ".join(f"{sample_id}_l{i}t{j}" for j in range(int(n))))
    return "\n".join(lines)


def _base_sample(config: SynthConfig, rng: np.random.Generator):
    n_lines = int(rng.integers(config.min_lines, config.max_lines + 1))
    tokens_per_line = rng.integers(config.min_tokens_per_line,
                                   config.max_tokens_per_line + 1, size=n_lines)
    token_line = np.repeat(np.arange(n_lines, dtype=np.int32),
                           tokens_per_line).astype(np.int32)
    data = rng.normal(0.0, config.noise_std,
                      size=(int(tokens_per_line.sum()), config.d))
    return n_lines, tokens_per_line, token_line, data


def make_sample(config: SynthConfig, split: str, index: int,
                variant: Literal["planted", "conjunctive"] = "planted",
                ) -> tuple[RepRecord, CodeRecord]:
    """Build one deterministic sample; labels alternate so splits stay balanced."""
    label = index % 2
    rng = _sample_rng(config, split, index)
    n_lines, tokens_per_line, token_line, data = _base_sample(config, rng)
    buggy: frozenset[int] = frozenset()

    if variant == "planted":
        mu = signal_directions(config, 1)[0]
        if label == 1:
            n_buggy = int(rng.integers(config.min_buggy_lines,
                                       min(config.max_buggy_lines, n_lines) + 1))
            lines = rng.choice(n_lines, size=n_buggy, replace=False)
            for line in lines:
                data[token_line == line] += config.signal_strength * mu
            buggy = frozenset(int(i) for i in lines)
    elif variant == "conjunctive":
        if config.min_lines < 3:
            raise SynthError("conjunctive variant needs min_lines >= 3")
        mu_a, mu_b = signal_directions(config, 2)
        # Never plant on the final line: the last token stays label-free.
        plantable = n_lines - 1
        if label == 1:
            line_a, line_b = rng.choice(plantable, size=2, replace=False)
            data[token_line == line_a] += config.signal_strength * mu_a
            data[token_line == line_b] += config.signal_strength * mu_b
            buggy = frozenset((int(line_a), int(line_b)))
        else:
            line = int(rng.integers(plantable))
            which = mu_a if rng.integers(2) == 0 else mu_b
            data[token_line == line] += config.signal_strength * which
    else:
        raise SynthError(f"unknown variant {variant!r}")

    sample_id = f"{split}-{index:05d}"
    provenance = (f"synthetic variant={variant} seed={config.seed} d={config.d} "
                  f"signal={config.signal_strength} noise={config.noise_std}")
    record = RepRecord(sample_id=sample_id, layer_k=0,
                       data=data.astype(np.float32), token_line=token_line,
                       label=label, buggy_lines=buggy, provenance=provenance)
    code = CodeRecord(sample_id=sample_id, code=_synthetic_code(sample_id, tokens_per_line),
                      label=label, buggy_lines=buggy)
    return record, code


def iter_samples(config: SynthConfig, split: str,
                 variant: Literal["planted", "conjunctive"] = "planted",
                 ) -> Iterator[tuple[RepRecord, CodeRecord]]:
    n = config.n_train if split == "train" else config.n_test
    for index in range(n):
        yield make_sample(config, split, index, variant)


def generate(config: SynthConfig, out_dir, *,
             variant: Literal["planted", "conjunctive"] = "planted") -> SynthDataset:
    """Write record files, train/test manifests, and the test truth corpus."""
    out = Path(out_dir)
    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    provenance = (f"synthetic variant={variant} seed={config.seed} d={config.d} "
                  f"signal={config.signal_strength} noise={config.noise_std}")

    truth: list[CodeRecord] = []
    manifests = {}
    for split in ("train", "test"):
        manifest = Manifest(split=split, provenance=provenance, base_dir=out)
        for record, code in iter_samples(config, split, variant):
            rel = f"records/{record.sample_id}.bin"
            write_record_file(record, out / rel)
            manifest.entries.append(ManifestEntry(sample_id=record.sample_id, path=rel,
                                                  T=record.T, label=record.label))
            if split == "test":
                truth.append(code)
        write_manifest(manifest, out / f"{split}.jsonl")
        manifests[split] = out / f"{split}.jsonl"

    truth_path = out / "truth.jsonl"
    write_code_records(truth, truth_path)
    return SynthDataset(train_manifest=manifests["train"],
                        test_manifest=manifests["test"], truth=truth_path)


def hard_variant(config: SynthConfig, out_dir) -> SynthDataset:
    """Conjunctive-signal dataset: detection needs evidence from two lines."""
    return generate(config, out_dir, variant="conjunctive")


def oracle_line_order(data: np.ndarray, token_line: np.ndarray,
                      direction: np.ndarray) -> list[int]:
    """Analytic localization: project tokens on the planted direction, sum per line.

    This is the generator-side ground truth for ranking quality; it never
    sees a trained model.
    """
    token_line = np.asarray(token_line)
    mapped = token_line >= 0
    num_lines = int(token_line[mapped].max()) + 1 if mapped.any() else 0
    scores = np.zeros(num_lines)
    proj = np.asarray(data, dtype=np.float64) @ np.asarray(direction, dtype=np.float64)
    for t in range(len(token_line)):
        if token_line[t] >= 0:
            scores[token_line[t]] += proj[t]
    return sorted(range(num_lines), key=lambda i: (-scores[i], i))
