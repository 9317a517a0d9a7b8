import numpy as np
import pytest
from scipy import stats

from bugprobe import synth
from bugprobe.repstore import load_manifest, read_code_records
from bugprobe.synth import (SynthConfig, SynthError, generate, hard_variant,
                            iter_samples, make_sample, oracle_line_order,
                            signal_directions)
from bugprobe.trainer import TrainConfig, TrainSample, train
from bugprobe.probe import ProbeConfig, detect


def small_config(**overrides) -> SynthConfig:
    base = dict(n_train=20, n_test=10, d=8, seed=3)
    base.update(overrides)
    return SynthConfig(**base)


def test_same_seed_byte_identical(tmp_path):
    config = small_config()
    a = generate(config, tmp_path / "a")
    b = generate(config, tmp_path / "b")
    for rel in ["train.jsonl", "test.jsonl", "truth.jsonl"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    for f in sorted((tmp_path / "a" / "records").iterdir()):
        twin = tmp_path / "b" / "records" / f.name
        assert f.read_bytes() == twin.read_bytes()


def test_generated_records_satisfy_invariants(tmp_path):
    dataset = generate(small_config(), tmp_path)
    for split_path in [dataset.train_manifest, dataset.test_manifest]:
        manifest = load_manifest(split_path)
        for record in manifest.records():
            record.validate()  # full reread through the storage layer
            assert record.d == 8


def test_label_balance_exact(tmp_path):
    config = small_config(n_train=21, n_test=11)
    dataset = generate(config, tmp_path)
    for path, n in [(dataset.train_manifest, 21), (dataset.test_manifest, 11)]:
        labels = [e.label for e in load_manifest(path).entries]
        assert len(labels) == n
        assert abs(sum(labels) - (n - sum(labels))) <= 1


def test_truth_matches_test_records(tmp_path):
    dataset = generate(small_config(), tmp_path)
    truth = {c.sample_id: c for c in read_code_records(dataset.truth)}
    manifest = load_manifest(dataset.test_manifest)
    assert set(truth) == {e.sample_id for e in manifest.entries}
    for record in manifest.records():
        code = truth[record.sample_id]
        assert code.label == record.label
        assert code.buggy_lines == record.buggy_lines
        assert code.num_lines == record.num_lines


def test_clean_samples_have_no_buggy_lines():
    config = small_config()
    for record, code in iter_samples(config, "test"):
        if record.label == 0:
            assert not record.buggy_lines
        else:
            assert record.buggy_lines
            assert all(0 <= b < record.num_lines for b in record.buggy_lines)


def test_planted_lines_uniform_chi_square():
    # fix the line count so the per-line counts are directly comparable
    config = SynthConfig(n_train=10_000, n_test=2, d=4, min_lines=5, max_lines=5,
                         min_buggy_lines=1, max_buggy_lines=1, seed=13)
    counts = np.zeros(5)
    for index in range(config.n_train):
        record, _ = make_sample(config, "train", index)
        if record.label == 1:
            counts[next(iter(record.buggy_lines))] += 1
    result = stats.chisquare(counts)
    assert result.pvalue > 0.01


def test_zero_signal_probe_stays_at_chance():
    config = SynthConfig(n_train=300, n_test=400, d=8, signal_strength=0.0, seed=5)
    train_samples = [TrainSample(r.sample_id, r.data, r.token_line, r.label)
                     for r, _ in iter_samples(config, "train")]
    probe_config = ProbeConfig(d_in=8, n_heads=2, n_kv_heads=1, d_head=4, d_ff=8, seed=0)
    model, _ = train(probe_config, TrainConfig(epochs=5, seed=0), train_samples)
    correct = 0
    total = 0
    for record, _ in iter_samples(config, "test"):
        correct += int((detect(model, record.data) >= 0.5) == bool(record.label))
        total += 1
    assert abs(correct / total - 0.5) <= 0.05


def test_oracle_top1_on_planted_signal():
    config = SynthConfig(n_train=2, n_test=400, d=32, seed=0)
    mu = signal_directions(config, 1)[0]
    hits = 0
    buggy = 0
    for record, _ in iter_samples(config, "test"):
        if record.label != 1:
            continue
        buggy += 1
        order = oracle_line_order(record.data, record.token_line, mu)
        hits += int(order[0] in record.buggy_lines)
    assert buggy >= 100
    assert hits / buggy >= 0.95


def test_hard_variant_structure(tmp_path):
    config = small_config(n_train=40, n_test=20)
    mus = signal_directions(config, 2)
    assert abs(mus[0] @ mus[1]) <= 1e-9  # orthogonal directions
    for record, _ in iter_samples(config, "test", variant="conjunctive"):
        last_line = record.num_lines - 1
        if record.label == 1:
            assert len(record.buggy_lines) == 2
            assert last_line not in record.buggy_lines
        else:
            assert not record.buggy_lines
    dataset = hard_variant(config, tmp_path)
    assert dataset.train_manifest.exists()


def test_hard_variant_last_token_carries_no_signal():
    # mean projection of the final token onto either direction is ~0 for both labels
    config = SynthConfig(n_train=4000, n_test=2, d=16, seed=21)
    mus = signal_directions(config, 2)
    sums = {0: np.zeros(2), 1: np.zeros(2)}
    counts = {0: 0, 1: 0}
    for record, _ in iter_samples(config, "train", variant="conjunctive"):
        sums[record.label] += mus @ record.data[-1].astype(np.float64)
        counts[record.label] += 1
    for label in (0, 1):
        mean_proj = sums[label] / counts[label]
        assert np.max(np.abs(mean_proj)) <= 0.1  # noise-level, no planted component


def test_config_validation():
    with pytest.raises(SynthError):
        SynthConfig(n_train=1, n_test=10)
    with pytest.raises(SynthError):
        SynthConfig(min_lines=5, max_lines=3)
    with pytest.raises(SynthError):
        SynthConfig(signal_strength=-1.0)
    with pytest.raises(SynthError):
        make_sample(SynthConfig(min_lines=2, max_lines=4), "train", 1,
                    variant="conjunctive")
