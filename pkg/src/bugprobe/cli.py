"""Command-line pipeline: synth, train, rank, eval, report, inspect.

Stages communicate through files (JSON-lines rankings, the binary record
and checkpoint formats), so externally produced predictions drop into eval
exactly like probe output. Output files are written atomically; every
failure exits 1 with a message instead of a stack trace. Set
BUGPROBE_NUM_THREADS to cap BLAS threading.

Only stdlib imports may appear at module level: the thread cap must be in
the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path


def _apply_thread_env() -> None:
    n = os.environ.get("BUGPROBE_NUM_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _write_atomic(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_atomic_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(out_path, text: str) -> None:
    if out_path:
        _write_atomic(Path(out_path), text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bugprobe",
        description="Train an attention probe for bug detection and rank source "
                    "lines by its attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-signal dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--min-lines", type=int, default=3)
    p.add_argument("--max-lines", type=int, default=12)
    p.add_argument("--signal", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hard", action="store_true",
                   help="conjunctive two-direction variant")

    p = sub.add_parser("train", help="train a probe on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="write the training report JSON here")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=["adamw", "sgd"], default="adamw")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--ff-dim", type=int, default=64)
    p.add_argument("--bare", action="store_true",
                   help="classifier on raw attention output (no residual/norm)")

    p = sub.add_parser("rank", help="rank lines for every record in a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="rankings JSON-lines (default: stdout)")
    p.add_argument("--top-k", type=int, help="truncate each order to k lines")

    p = sub.add_parser("eval", help="score rankings or external predictions")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--rankings", help="JSON-lines from `bugprobe rank`")
    src.add_argument("--external", help="JSON-lines of prompting-style predictions")
    p.add_argument("--truth", required=True,
                   help="code-record corpus or record manifest with ground truth")
    p.add_argument("--out", help="full report JSON path")

    p = sub.add_parser("report", help="render per-line score heatmaps")
    p.add_argument("--rankings", required=True)
    p.add_argument("--code", required=True, help="code-record corpus")
    p.add_argument("--format", choices=["ansi", "html"], default="ansi")
    p.add_argument("--sample", help="render only this sample id")
    p.add_argument("--out")

    p = sub.add_parser("inspect", help="describe a manifest, record, or checkpoint")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--manifest")
    what.add_argument("--record")
    what.add_argument("--checkpoint")

    return parser


def cmd_synth(args) -> int:
    from . import synth

    config = synth.SynthConfig(n_train=args.n_train, n_test=args.n_test, d=args.d,
                               min_lines=args.min_lines, max_lines=args.max_lines,
                               signal_strength=args.signal, noise_std=args.noise,
                               seed=args.seed)
    variant = "conjunctive" if args.hard else "planted"
    dataset = synth.generate(config, args.out, variant=variant)
    print(f"wrote {dataset.train_manifest} ({config.n_train} records)")
    print(f"wrote {dataset.test_manifest} ({config.n_test} records)")
    print(f"wrote {dataset.truth}")
    return 0


def cmd_train(args) -> int:
    import io

    from . import probe, repstore, trainer

    manifest = repstore.load_manifest(args.manifest)
    samples = trainer.load_training_set(manifest)
    if not samples:
        print(f"error: manifest {args.manifest} has no records", file=sys.stderr)
        return 1
    d_in = samples[0].data.shape[1]
    probe_config = probe.ProbeConfig(d_in=d_in, n_heads=args.heads,
                                     n_kv_heads=args.kv_heads, d_head=args.head_dim,
                                     d_ff=args.ff_dim,
                                     use_block_residual_ln=not args.bare,
                                     seed=args.seed)
    train_config = trainer.TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                                       batch_size=args.batch_size,
                                       weight_decay=args.weight_decay,
                                       val_fraction=args.val_fraction, seed=args.seed,
                                       optimizer=args.optimizer)
    model, report = trainer.train(probe_config, train_config, samples)

    buf = io.BytesIO()
    probe.save_model(model, buf)
    _write_atomic_bytes(Path(args.out), buf.getvalue())
    print(f"checkpoint written to {args.out} "
          f"(epoch {report.selected_epoch}, "
          f"val acc {report.val_accuracy[report.selected_epoch - 1]:.4f})")
    if args.report:
        _write_atomic(Path(args.report),
                      json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return 0


def cmd_rank(args) -> int:
    from . import localize, probe, repstore

    model = probe.load_model(args.checkpoint)
    manifest = repstore.load_manifest(args.manifest)
    if args.top_k is not None and args.top_k < 1:
        print("error: --top-k must be >= 1", file=sys.stderr)
        return 1
    lines = []
    for record in manifest.records():
        ranking = localize.localize_record(model, record)
        ranking.detect_prob = probe.detect(model, record.data)
        lines.append(ranking.to_json(top_k=args.top_k))
    _emit(args.out, "\n".join(lines) + ("\n" if lines else ""))
    return 0


def _load_truth(path: str):
    """Accept either a code corpus or a record manifest as ground truth."""
    from . import evalkit, repstore

    first = ""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                first = line
                break
    if not first:
        raise repstore.ManifestError(f"truth file {path} is empty")
    obj = json.loads(first)
    if "code" in obj:
        codes = repstore.read_code_records(path)
        truth = {c.sample_id: evalkit.TruthEntry.from_code(c) for c in codes}
        return truth, {c.sample_id: c for c in codes}
    manifest = repstore.load_manifest(path)
    truth = {}
    for record in manifest.records():
        truth[record.sample_id] = evalkit.TruthEntry.from_record(record)
    return truth, None


def _load_rankings(path: str):
    from . import localize

    rankings = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            ranking = localize.LineRanking.from_json(line)
            rankings[ranking.sample_id] = ranking
    return rankings


def cmd_eval(args) -> int:
    from . import evalkit

    truth, codes = _load_truth(args.truth)
    detect_probs = {}
    dropped = 0

    if args.rankings:
        rankings = _load_rankings(args.rankings)
        predictions = {sid: r for sid, r in rankings.items()}
        detect_probs = {sid: r.detect_prob for sid, r in rankings.items()
                        if r.detect_prob is not None}
    else:
        if codes is None:
            print("error: evaluating external predictions needs a code-record corpus "
                  "as --truth (code text is required for the fallback match)",
                  file=sys.stderr)
            return 1
        predictions = {}
        with open(args.external, "r", encoding="utf-8") as f:
            for i, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                sid = str(obj.get("sample_id", ""))
                if sid not in codes:
                    print(f"error: external prediction line {i} names unknown sample "
                          f"{sid!r}", file=sys.stderr)
                    return 1
                payload = obj.get("response") if "response" in obj else json.dumps(obj)
                try:
                    resolved, n_dropped = evalkit.ingest_external(payload, codes[sid])
                except evalkit.ExternalParseError:
                    resolved, n_dropped = [], 1  # unusable output scores as a miss
                predictions[sid] = resolved
                dropped += n_dropped

    missing = sorted(sid for sid, t in truth.items()
                     if t.label == 1 and sid not in predictions)
    if missing:
        print(f"error: no prediction for buggy sample(s) {missing[:5]}", file=sys.stderr)
        return 1

    report = evalkit.evaluate(predictions, truth,
                              detect_probs=detect_probs or None,
                              dropped_predictions=dropped)
    print(report.format_table())
    if args.out:
        _write_atomic(Path(args.out), report.to_json() + "\n")
    return 0


def cmd_report(args) -> int:
    from . import report as render
    from . import repstore

    rankings = _load_rankings(args.rankings)
    codes = {c.sample_id: c for c in repstore.read_code_records(args.code)}
    ids = [args.sample] if args.sample else sorted(rankings)
    pairs = []
    for sid in ids:
        if sid not in rankings:
            print(f"error: no ranking for sample {sid!r}", file=sys.stderr)
            return 1
        if sid not in codes:
            print(f"error: no code record for sample {sid!r}", file=sys.stderr)
            return 1
        pairs.append((rankings[sid], codes[sid]))
    if args.format == "html":
        _emit(args.out, render.render_html(pairs))
    else:
        _emit(args.out, "".join(render.render_ansi(r, c) for r, c in pairs))
    return 0


def cmd_inspect(args) -> int:
    from . import probe, repstore

    if args.manifest:
        manifest = repstore.load_manifest(args.manifest)
        labels = [e.label for e in manifest.entries]
        lengths = [e.T for e in manifest.entries]
        print(f"manifest: split={manifest.split} entries={len(manifest.entries)} "
              f"buggy={sum(labels)} clean={len(labels) - sum(labels)}")
        if lengths:
            print(f"tokens: min={min(lengths)} max={max(lengths)} "
                  f"mean={sum(lengths) / len(lengths):.1f}")
        print(f"provenance: {manifest.provenance}")
    elif args.record:
        record = repstore.read_record_file(args.record)
        print(f"record: id={record.sample_id} layer={record.layer_k} T={record.T} "
              f"d={record.d} lines={record.num_lines} label={record.label} "
              f"buggy_lines={sorted(record.buggy_lines)}")
        print(f"provenance: {record.provenance}")
    else:
        model = probe.load_model(args.checkpoint)
        print(f"checkpoint: {json.dumps(model.config.to_dict(), sort_keys=True)}")
        print(f"parameters: {model.num_parameters()}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "rank": cmd_rank,
    "eval": cmd_eval,
    "report": cmd_report,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    from .errors import BugprobeError

    try:
        return _HANDLERS[args.command](args)
    except BugprobeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
