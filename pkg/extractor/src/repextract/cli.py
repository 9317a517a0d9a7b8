"""Command line for extraction and verification."""

from __future__ import annotations

import argparse
import sys

from .extract import ExtractJob, extract, verify
from .recordio import FormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repextract",
        description="Dump causal-LM hidden states into the bugprobe record format.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run a model over a corpus and write records")
    p.add_argument("--model", required=True, help="model id or local directory")
    p.add_argument("--layer", type=int, required=True,
                   help="block index: 0 = embeddings, k = output of block k")
    p.add_argument("--corpus", required=True, help="code corpus JSON-lines")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-len", type=int, default=1024)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--prompt-prefix", default="",
                   help="optional template text before the code (maps to line -1)")
    p.add_argument("--prompt-suffix", default="")

    p = sub.add_parser("verify", help="re-read an output directory and check it")
    p.add_argument("--dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="train")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            job = ExtractJob(model_id=args.model, layer_k=args.layer,
                             corpus=args.corpus, out_dir=args.out,
                             max_seq_len=args.max_len, batch_size=args.batch_size,
                             device=args.device, split=args.split,
                             prompt_prefix=args.prompt_prefix,
                             prompt_suffix=args.prompt_suffix)
            result = extract(job)
            print(f"wrote {result.n_written} records to {result.manifest_path}")
            print(f"skipped {result.n_skipped} (see {result.skipped_path})")
            return 0
        report = verify(args.dir, split=args.split)
        print(report.summary())
        return 0 if report.n_records and not report.violations else 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
