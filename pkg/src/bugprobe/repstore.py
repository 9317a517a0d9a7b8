"""Binary dataset format for hidden-representation records.

One record file holds the hidden-state matrix of a single code sample plus
its token-to-line map and labels. The layout is fixed so that independently
written tools can produce and consume the same files:

    magic           4 bytes, b"BAPR"
    version         u32 little-endian, currently 1
    header length   u32 little-endian
    header          UTF-8 JSON object with keys sample_id, layer_k, T, d,
                    label, buggy_lines (sorted list), provenance
    token_line      T  x int32 little-endian
    data            T*d x float32 little-endian, row-major (row = token)

A dataset is a directory of record files plus a JSON-lines manifest: the
first line is a header object {format_version, split, provenance}, each
following line one entry {sample_id, path, T, label} with path relative to
the manifest. Raw code corpora are JSON-lines of CodeRecord objects.

Records are immutable once built; reading is thread-safe. The reader never
crashes on malformed bytes: every failure mode raises a distinct typed
error.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Union

import numpy as np

from .errors import BugprobeError

RECORD_MAGIC = b"BAPR"
RECORD_VERSION = 1
MANIFEST_VERSION = 1


class RecordError(BugprobeError):
    """Base for record read/write failures."""


class BadMagicError(RecordError):
    pass


class VersionError(RecordError):
    pass


class TruncatedError(RecordError):
    pass


class HeaderError(RecordError):
    """Header is not valid JSON or lacks required fields."""


class DataError(RecordError):
    """Matrix payload contains NaN or Inf."""


class TokenLineError(RecordError):
    """token_line has values below -1 or breaks source order."""


class InvariantError(RecordError):
    """A record violates its own consistency rules."""


class ManifestError(BugprobeError):
    pass


@dataclass
class RepRecord:
    """Hidden states for one code sample at one model layer.

    data is (T, d) float32, one row per token in sequence order.
    token_line[t] is the 0-based source line of token t, or -1 for
    special/prompt tokens that belong to no source line. buggy_lines is
    ground truth for evaluation only; training code never sees it.
    """

    sample_id: str
    layer_k: int
    data: np.ndarray
    token_line: np.ndarray
    label: int
    buggy_lines: frozenset[int] = frozenset()
    provenance: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.token_line = np.ascontiguousarray(self.token_line, dtype=np.int32)
        self.buggy_lines = frozenset(int(i) for i in self.buggy_lines)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def num_lines(self) -> int:
        """L = 1 + max non-negative token_line (0 if every token is special)."""
        nonneg = self.token_line[self.token_line >= 0]
        return int(nonneg.max()) + 1 if nonneg.size else 0

    def validate(self) -> None:
        if not self.sample_id:
            raise InvariantError("empty sample_id")
        if self.layer_k < 0:
            raise InvariantError(f"layer_k must be >= 0, got {self.layer_k}")
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise InvariantError(f"data must be (T, d) with T, d >= 1, got {self.data.shape}")
        if self.token_line.shape != (self.T,):
            raise InvariantError(
                f"token_line length {self.token_line.shape} does not match T={self.T}")
        if not np.isfinite(self.data).all():
            raise DataError(f"record {self.sample_id}: non-finite values in data")
        if (self.token_line < -1).any():
            raise TokenLineError(f"record {self.sample_id}: token_line below -1")
        mapped = self.token_line[self.token_line >= 0]
        if mapped.size and (np.diff(mapped) < 0).any():
            raise TokenLineError(
                f"record {self.sample_id}: token_line decreases over mapped tokens")
        if self.label not in (0, 1):
            raise InvariantError(f"record {self.sample_id}: label must be 0 or 1")
        if self.label == 0 and self.buggy_lines:
            raise InvariantError(f"record {self.sample_id}: clean record with buggy_lines")
        if any(i < 0 for i in self.buggy_lines):
            raise InvariantError(f"record {self.sample_id}: negative buggy line index")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RepRecord):
            return NotImplemented
        return (self.sample_id == other.sample_id
                and self.layer_k == other.layer_k
                and self.label == other.label
                and self.buggy_lines == other.buggy_lines
                and self.provenance == other.provenance
                and self.data.shape == other.data.shape
                and np.array_equal(self.token_line, other.token_line)
                # bit-exact, including signed zero and float payload
                and self.data.tobytes() == other.data.tobytes())


@dataclass
class CodeRecord:
    """Raw source text with label and ground-truth buggy lines."""

    sample_id: str
    code: str
    label: int
    buggy_lines: frozenset[int] = frozenset()

    def __post_init__(self):
        self.buggy_lines = frozenset(int(i) for i in self.buggy_lines)

    @property
    def lines(self) -> list[str]:
        return self.code.split("\n")

    @property
    def num_lines(self) -> int:
        return len(self.lines)

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise InvariantError(f"code record {self.sample_id}: label must be 0 or 1")
        if self.label == 0 and self.buggy_lines:
            raise InvariantError(f"code record {self.sample_id}: clean record with buggy_lines")
        bad = [i for i in self.buggy_lines if not 0 <= i < self.num_lines]
        if bad:
            raise InvariantError(
                f"code record {self.sample_id}: buggy lines {sorted(bad)} outside "
                f"[0, {self.num_lines})")


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    T: int
    label: int


@dataclass
class Manifest:
    split: str
    provenance: str = ""
    format_version: int = MANIFEST_VERSION
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Optional[Path] = None

    def validate(self) -> None:
        if self.split not in ("train", "test"):
            raise ManifestError(f"split must be 'train' or 'test', got {self.split!r}")
        ids = [e.sample_id for e in self.entries]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate sample ids in manifest: {dupes[:5]}")

    def records(self, base_dir: Union[str, Path, None] = None) -> Iterator[RepRecord]:
        """Yield records lazily in manifest order, one in memory at a time.

        Each record's header is checked against its manifest entry.
        """
        base = Path(base_dir) if base_dir is not None else self.base_dir
        if base is None:
            raise ManifestError("no base directory known for manifest record paths")
        for entry in self.entries:
            path = base / entry.path
            if not path.exists():
                raise ManifestError(
                    f"record file missing for sample {entry.sample_id!r}: {path}")
            record = read_record_file(path)
            if (record.sample_id != entry.sample_id or record.T != entry.T
                    or record.label != entry.label):
                raise ManifestError(
                    f"record {path} header (id={record.sample_id!r}, T={record.T}, "
                    f"label={record.label}) does not match manifest entry "
                    f"(id={entry.sample_id!r}, T={entry.T}, label={entry.label})")
            yield record


def write_record(record: RepRecord, dest: BinaryIO) -> int:
    """Serialize a record; returns bytes written.

    Validation happens before any byte is emitted, so a failed write leaves
    the sink untouched.
    """
    record.validate()
    header = {
        "sample_id": record.sample_id,
        "layer_k": int(record.layer_k),
        "T": record.T,
        "d": record.d,
        "label": int(record.label),
        "buggy_lines": sorted(record.buggy_lines),
        "provenance": record.provenance,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray()
    buf += RECORD_MAGIC
    buf += struct.pack("<I", RECORD_VERSION)
    buf += struct.pack("<I", len(header_bytes))
    buf += header_bytes
    buf += record.token_line.astype("<i4").tobytes()
    buf += record.data.astype("<f4").tobytes()
    dest.write(bytes(buf))
    return len(buf)


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    chunk = source.read(n)
    if chunk is None or len(chunk) < n:
        got = 0 if chunk is None else len(chunk)
        raise TruncatedError(f"truncated while reading {what}: wanted {n} bytes, got {got}")
    return chunk


def read_record(source: BinaryIO) -> RepRecord:
    """Parse one record from a byte stream.

    Any malformed input raises a typed RecordError subclass; this function
    never returns a record that violates the RepRecord invariants.
    """
    magic = _read_exact(source, 4, "magic")
    if magic != RECORD_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {RECORD_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4, "version"))
    if version != RECORD_VERSION:
        raise VersionError(f"unsupported record version {version}")
    (header_len,) = struct.unpack("<I", _read_exact(source, 4, "header length"))
    header_bytes = _read_exact(source, header_len, "header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"header must be a JSON object, got {type(header).__name__}")
    try:
        sample_id = str(header["sample_id"])
        layer_k = int(header["layer_k"])
        T = int(header["T"])
        d = int(header["d"])
        label = int(header["label"])
        buggy_lines = [int(i) for i in header["buggy_lines"]]
        provenance = str(header.get("provenance", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"header field missing or mistyped: {exc}") from exc
    if T < 1 or d < 1:
        raise HeaderError(f"header T={T}, d={d} must both be >= 1")

    token_line = np.frombuffer(
        _read_exact(source, 4 * T, "token_line"), dtype="<i4").astype(np.int32)
    data = np.frombuffer(
        _read_exact(source, 4 * T * d, "data matrix"), dtype="<f4").astype(np.float32)
    data = data.reshape(T, d)
    if not np.isfinite(data).all():
        raise DataError(f"record {sample_id}: non-finite values in data")

    record = RepRecord(sample_id=sample_id, layer_k=layer_k, data=data,
                       token_line=token_line, label=label,
                       buggy_lines=frozenset(buggy_lines), provenance=provenance)
    record.validate()
    return record


def write_record_file(record: RepRecord, path: Union[str, Path]) -> int:
    buf = io.BytesIO()
    n = write_record(record, buf)
    Path(path).write_bytes(buf.getvalue())
    return n


def read_record_file(path: Union[str, Path]) -> RepRecord:
    with open(path, "rb") as f:
        return read_record(f)


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> None:
    manifest.validate()
    lines = [json.dumps({"format_version": manifest.format_version,
                         "split": manifest.split,
                         "provenance": manifest.provenance},
                        sort_keys=True, separators=(",", ":"))]
    for e in manifest.entries:
        lines.append(json.dumps({"sample_id": e.sample_id, "path": e.path,
                                 "T": e.T, "label": e.label},
                                sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ManifestError(f"manifest {path} is empty (missing header line)")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} header is not valid JSON: {exc}") from exc
    if "format_version" not in head:
        raise ManifestError(f"manifest {path} first line lacks format_version")
    if int(head["format_version"]) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {head['format_version']}")
    manifest = Manifest(split=str(head.get("split", "")),
                        provenance=str(head.get("provenance", "")),
                        format_version=int(head["format_version"]),
                        base_dir=path.parent)
    for i, ln in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(ln)
            entry = ManifestEntry(sample_id=str(obj["sample_id"]), path=str(obj["path"]),
                                  T=int(obj["T"]), label=int(obj["label"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"manifest {path} line {i} is malformed: {exc}") from exc
        manifest.entries.append(entry)
    manifest.validate()
    return manifest


def write_code_records(records: Iterable[CodeRecord], path: Union[str, Path]) -> None:
    lines = []
    for r in records:
        r.validate()
        lines.append(json.dumps({"sample_id": r.sample_id, "code": r.code,
                                 "label": int(r.label),
                                 "buggy_lines": sorted(r.buggy_lines)},
                                sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_code_records(path: Union[str, Path]) -> list[CodeRecord]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"code corpus not found: {path}")
    records = []
    for i, ln in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not ln.strip():
            continue
        try:
            obj = json.loads(ln)
            rec = CodeRecord(sample_id=str(obj["sample_id"]), code=str(obj["code"]),
                             label=int(obj["label"]),
                             buggy_lines=frozenset(int(b) for b in obj.get("buggy_lines", [])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"code corpus {path} line {i} is malformed: {exc}") from exc
        rec.validate()
        records.append(rec)
    return records
