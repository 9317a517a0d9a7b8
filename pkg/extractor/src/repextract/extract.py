"""Run a frozen causal LM over a code corpus and dump layer-k hidden states.

For every corpus sample: tokenize with offset tracking, run one forward
pass, take the residual-stream output of block k (hidden_states[k], where
index 0 is the embedding output), cast to float32, and write one record
carrying the sample's id, label, and ground-truth lines unchanged. Samples
longer than the sequence limit are skipped and listed in a sidecar file,
never silently dropped. Re-running a job overwrites the same bytes as long
as the model is deterministic.

No prompt template is wrapped around the code by default; when one is
configured, its tokens map to line -1 like any other non-source token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .linemap import token_lines
from .recordio import (FormatError, HiddenRecord, ManifestWriter, read_corpus,
                       read_manifest, read_record, write_record)


@dataclass
class ExtractJob:
    model_id: str
    layer_k: int
    corpus: str
    out_dir: str
    max_seq_len: int = 1024
    batch_size: int = 8
    device: str = "cpu"
    split: str = "train"
    prompt_prefix: str = ""
    prompt_suffix: str = ""


@dataclass
class ExtractResult:
    manifest_path: Path
    skipped_path: Path
    n_written: int
    n_skipped: int


@dataclass
class VerifyReport:
    n_records: int = 0
    n_ok: int = 0
    violations: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"records checked: {self.n_records}", f"ok: {self.n_ok}",
                 f"violations: {len(self.violations)}"]
        lines.extend(f"  {v}" for v in self.violations)
        return "\n".join(lines)


def _load_model(job: ExtractJob):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(job.model_id, use_fast=True)
    if tokenizer.pad_token is None:
        tokenizer.pad_token = tokenizer.eos_token or tokenizer.unk_token
    tokenizer.padding_side = "right"  # real tokens stay at the front of each row
    model = AutoModelForCausalLM.from_pretrained(job.model_id)
    model.to(job.device)
    model.eval()
    n_layers = int(model.config.num_hidden_layers)
    if not 0 <= job.layer_k <= n_layers:
        raise FormatError(
            f"layer_k={job.layer_k} outside [0, {n_layers}] for {job.model_id}")
    return tokenizer, model


def extract(job: ExtractJob) -> ExtractResult:
    tokenizer, model = _load_model(job)
    samples = read_corpus(job.corpus)
    out = Path(job.out_dir)
    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)

    provenance = (f"model={job.model_id} layer={job.layer_k} "
                  f"tokenizer={tokenizer.__class__.__name__}")
    manifest = ManifestWriter(split=job.split, provenance=provenance)
    skipped: list[dict] = []

    for start in range(0, len(samples), job.batch_size):
        batch = samples[start:start + job.batch_size]
        texts = [job.prompt_prefix + s["code"] + job.prompt_suffix for s in batch]
        enc = tokenizer(texts, return_offsets_mapping=True,
                        return_special_tokens_mask=True, padding=True,
                        return_tensors=None)
        lengths = [sum(m) for m in enc["attention_mask"]]
        runnable = [i for i, n in enumerate(lengths) if n <= job.max_seq_len]
        for i, n in enumerate(lengths):
            if n > job.max_seq_len:
                skipped.append({"sample_id": batch[i]["sample_id"],
                                "reason": f"{n} tokens exceeds max {job.max_seq_len}"})
        if not runnable:
            continue

        input_ids = torch.tensor([enc["input_ids"][i] for i in runnable],
                                 device=job.device)
        attention_mask = torch.tensor([enc["attention_mask"][i] for i in runnable],
                                      device=job.device)
        with torch.no_grad():
            outputs = model(input_ids=input_ids, attention_mask=attention_mask,
                            output_hidden_states=True, use_cache=False)
        hidden = outputs.hidden_states[job.layer_k].to(torch.float32).cpu().numpy()

        for row, i in enumerate(runnable):
            sample = batch[i]
            n_tokens = lengths[i]
            offsets = enc["offset_mapping"][i][:n_tokens]
            specials = enc["special_tokens_mask"][i][:n_tokens]
            if job.prompt_prefix:
                # prefix characters belong to no source line
                shift = len(job.prompt_prefix)
                code_len = len(sample["code"])
                adjusted = []
                for (b, e), sp in zip(offsets, specials):
                    if sp or e <= b or e <= shift or b >= shift + code_len:
                        adjusted.append(((0, 0), 1))
                    else:
                        adjusted.append(((max(b - shift, 0), e - shift), 0))
                offsets = [o for o, _ in adjusted]
                specials = [s for _, s in adjusted]
            mapping = token_lines(sample["code"], offsets, specials)
            record = HiddenRecord(
                sample_id=sample["sample_id"], layer_k=job.layer_k,
                data=hidden[row, :n_tokens],
                token_line=np.asarray(mapping, dtype=np.int32),
                label=sample["label"],
                buggy_lines=tuple(sample["buggy_lines"]),
                provenance=provenance)
            rel = f"records/{sample['sample_id']}.bin"
            write_record(record, out / rel)
            manifest.add(sample["sample_id"], rel, record.T, record.label)

    manifest_path = out / f"{job.split}.jsonl"
    manifest.write(manifest_path)
    skipped_path = out / "skipped.jsonl"
    skipped_path.write_text(
        "".join(json.dumps(s, sort_keys=True) + "\n" for s in skipped),
        encoding="utf-8")
    return ExtractResult(manifest_path=manifest_path, skipped_path=skipped_path,
                         n_written=len(manifest.entries), n_skipped=len(skipped))


def verify(out_dir: str, split: str = "train") -> VerifyReport:
    """Re-read every emitted record and check the format invariants."""
    out = Path(out_dir)
    report = VerifyReport()
    try:
        head, entries = read_manifest(out / f"{split}.jsonl")
    except (OSError, FormatError) as exc:
        report.violations.append(f"manifest unreadable: {exc}")
        return report
    for entry in entries:
        report.n_records += 1
        path = out / entry["path"]
        try:
            record = read_record(path)
        except (OSError, FormatError) as exc:
            report.violations.append(str(exc))
            continue
        if (record.sample_id != entry["sample_id"] or record.T != entry["T"]
                or record.label != entry["label"]):
            report.violations.append(
                f"{path}: header does not match manifest entry {entry}")
            continue
        report.n_ok += 1
    return report
