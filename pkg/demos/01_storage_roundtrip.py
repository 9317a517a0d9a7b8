#!/usr/bin/env python3
"""Walk through the record format: build a record, write it, read it back.

Run:  python demos/01_storage_roundtrip.py
"""

import io
import tempfile
from pathlib import Path

import numpy as np

from bugprobe.repstore import (Manifest, ManifestEntry, RepRecord, load_manifest,
                               read_record, write_manifest, write_record,
                               write_record_file)

rng = np.random.default_rng(0)

# A record = hidden states (one row per token) + a token -> line map.
# Token 0 here is a special token (-1): it belongs to no source line.
record = RepRecord(
    sample_id="demo-0001",
    layer_k=12,
    data=rng.normal(size=(7, 16)).astype(np.float32),
    token_line=np.array([-1, 0, 0, 1, 1, 1, 2], dtype=np.int32),
    label=1,
    buggy_lines=frozenset({1}),
    provenance="storage demo",
)

buf = io.BytesIO()
n = write_record(record, buf)
print(f"serialized {record.sample_id}: {n} bytes "
      f"(T={record.T}, d={record.d}, {record.num_lines} source lines)")

buf.seek(0)
back = read_record(buf)
print("round-trip equal:", back == record)
print("float payload bit-identical:", back.data.tobytes() == record.data.tobytes())

# Datasets are directories of record files plus a JSON-lines manifest.
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    write_record_file(record, tmp / "demo-0001.bin")
    manifest = Manifest(split="train", provenance="storage demo", base_dir=tmp,
                        entries=[ManifestEntry("demo-0001", "demo-0001.bin",
                                               record.T, record.label)])
    write_manifest(manifest, tmp / "train.jsonl")

    loaded = load_manifest(tmp / "train.jsonl")
    print(f"manifest: split={loaded.split!r}, {len(loaded.entries)} entries")
    for rec in loaded.records():
        print(f"  streamed {rec.sample_id}: label={rec.label}, "
              f"buggy_lines={sorted(rec.buggy_lines)}")
