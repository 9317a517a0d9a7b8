"""Writer/reader for the bugprobe interchange formats.

Implemented here from the documented layout rather than imported, so this
package and the consumer stay coupled only through bytes on disk.

Record file:
    magic  b"BAPR" | version u32 LE (=1) | header-length u32 LE
    header: UTF-8 JSON {sample_id, layer_k, T, d, label, buggy_lines, provenance}
    token_line: T x int32 LE
    data: T*d x float32 LE, row-major

Manifest: JSON lines; first line {format_version, split, provenance}, then
one {sample_id, path, T, label} per record. Code corpus: JSON lines of
{sample_id, code, label, buggy_lines}.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"BAPR"
VERSION = 1
MANIFEST_VERSION = 1


class FormatError(Exception):
    """Any malformed byte stream or invariant violation."""


@dataclass
class HiddenRecord:
    sample_id: str
    layer_k: int
    data: np.ndarray        # (T, d) float32
    token_line: np.ndarray  # (T,) int32, -1 for special tokens
    label: int
    buggy_lines: tuple[int, ...] = ()
    provenance: str = ""

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def check(self) -> None:
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise FormatError(f"{self.sample_id}: data must be (T>=1, d>=1)")
        if self.token_line.shape != (self.T,):
            raise FormatError(f"{self.sample_id}: token_line length != T")
        if not np.isfinite(self.data).all():
            raise FormatError(f"{self.sample_id}: non-finite hidden states")
        if (self.token_line < -1).any():
            raise FormatError(f"{self.sample_id}: token_line below -1")
        mapped = self.token_line[self.token_line >= 0]
        if mapped.size and (np.diff(mapped) < 0).any():
            raise FormatError(f"{self.sample_id}: token_line not monotone")
        if self.label not in (0, 1):
            raise FormatError(f"{self.sample_id}: bad label {self.label}")
        if self.label == 0 and self.buggy_lines:
            raise FormatError(f"{self.sample_id}: clean sample with buggy lines")


def record_bytes(record: HiddenRecord) -> bytes:
    record.check()
    header = json.dumps({
        "sample_id": record.sample_id,
        "layer_k": int(record.layer_k),
        "T": record.T,
        "d": record.d,
        "label": int(record.label),
        "buggy_lines": sorted(int(i) for i in record.buggy_lines),
        "provenance": record.provenance,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)),
             header, record.token_line.astype("<i4").tobytes(),
             record.data.astype("<f4").tobytes()]
    return b"".join(parts)


def write_record(record: HiddenRecord, path: Union[str, Path]) -> int:
    payload = record_bytes(record)
    Path(path).write_bytes(payload)
    return len(payload)


def read_record(path: Union[str, Path]) -> HiddenRecord:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated preamble")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
        T, d = int(header["T"]), int(header["d"])
        record = HiddenRecord(
            sample_id=str(header["sample_id"]), layer_k=int(header["layer_k"]),
            data=np.empty((0, 0)), token_line=np.empty(0, np.int32),
            label=int(header["label"]),
            buggy_lines=tuple(int(i) for i in header["buggy_lines"]),
            provenance=str(header.get("provenance", "")))
    except (KeyError, ValueError, TypeError, UnicodeDecodeError,
            json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    tl_end = header_end + 4 * T
    data_end = tl_end + 4 * T * d
    if len(raw) < data_end:
        raise FormatError(f"{path}: truncated payload")
    record.token_line = np.frombuffer(raw[header_end:tl_end], dtype="<i4").astype(np.int32)
    record.data = (np.frombuffer(raw[tl_end:data_end], dtype="<f4")
                   .astype(np.float32).reshape(T, d))
    record.check()
    return record


@dataclass
class ManifestWriter:
    split: str
    provenance: str
    entries: list[dict] = field(default_factory=list)

    def add(self, sample_id: str, path: str, T: int, label: int) -> None:
        self.entries.append({"sample_id": sample_id, "path": path,
                             "T": int(T), "label": int(label)})

    def write(self, path: Union[str, Path]) -> None:
        lines = [json.dumps({"format_version": MANIFEST_VERSION, "split": self.split,
                             "provenance": self.provenance},
                            sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(e, sort_keys=True, separators=(",", ":"))
                  for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> tuple[dict, list[dict]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    head = json.loads(lines[0])
    return head, [json.loads(ln) for ln in lines[1:]]


def read_corpus(path: Union[str, Path]) -> list[dict]:
    """Code corpus: one {sample_id, code, label, buggy_lines} object per line."""
    samples = []
    for i, ln in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not ln.strip():
            continue
        try:
            obj = json.loads(ln)
            samples.append({"sample_id": str(obj["sample_id"]),
                            "code": str(obj["code"]),
                            "label": int(obj["label"]),
                            "buggy_lines": [int(b) for b in obj.get("buggy_lines", [])]})
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path} line {i}: malformed corpus entry: {exc}") from exc
    return samples
