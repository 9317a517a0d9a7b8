import io

import numpy as np
import pytest

from bugprobe import autodiff as ad
from bugprobe import probe
from bugprobe.probe import (CheckpointError, ProbeConfig, ProbeError, detect,
                            flops_estimate, forward, init, load_model, save_model)
from oracles import finite_difference, grad_mismatches, probe_forward_oracle


def small_config(**overrides) -> ProbeConfig:
    base = dict(d_in=8, n_heads=4, n_kv_heads=2, d_head=4, d_ff=8, seed=0)
    base.update(overrides)
    return ProbeConfig(**base)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_same_seed_bit_identical():
    a = init(small_config(seed=42))
    b = init(small_config(seed=42))
    for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_init_different_seeds_differ():
    a = init(small_config(seed=1))
    b = init(small_config(seed=2))
    assert a.w_q.data.tobytes() != b.w_q.data.tobytes()


def test_init_grouped_projection_shapes():
    cfg = ProbeConfig(d_in=8, n_heads=4, n_kv_heads=2, d_head=16)
    model = init(cfg)
    assert model.w_q.shape == (8, 4 * 16)
    assert model.w_k.shape == (8, 2 * 16)
    assert model.w_v.shape == (8, 2 * 16)
    assert model.w_o.shape == (4 * 16, 8)


def test_config_validation():
    with pytest.raises(ProbeError):
        ProbeConfig(d_in=8, n_heads=4, n_kv_heads=3)
    with pytest.raises(ProbeError):
        ProbeConfig(d_in=0)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_single_token_attends_fully():
    model = init(small_config())
    out = forward(model, np.random.default_rng(0).normal(size=(1, 8)))
    assert np.array_equal(out.attn_last_row, np.ones((4, 1)))
    assert np.array_equal(out.a_bar, np.array([1.0], dtype=np.float32))


def test_zero_queries_give_uniform_attention():
    model = init(small_config())
    model.w_q.data[...] = 0.0
    T = 5
    out = forward(model, np.random.default_rng(1).normal(size=(T, 8)))
    assert np.allclose(out.a_bar, np.full(T, 1.0 / T), atol=1e-6)


def test_forward_matches_independent_oracle():
    cfg = small_config(seed=9)
    model = init(cfg, dtype=np.float64)
    rng = np.random.default_rng(5)
    z = rng.normal(size=(6, 8))
    out = forward(model, z)
    a_bar, attn_rows, logit = probe_forward_oracle(model, z)
    assert np.max(np.abs(out.a_bar - a_bar)) <= 1e-12
    assert np.max(np.abs(out.attn_last_row - attn_rows)) <= 1e-12
    assert abs(out.logit_value - logit) <= 1e-12


def test_forward_matches_oracle_bare_variant():
    cfg = small_config(seed=9, use_block_residual_ln=False)
    model = init(cfg, dtype=np.float64)
    z = np.random.default_rng(6).normal(size=(7, 8))
    out = forward(model, z)
    a_bar, _, logit = probe_forward_oracle(model, z)
    assert np.max(np.abs(out.a_bar - a_bar)) <= 1e-12
    assert abs(out.logit_value - logit) <= 1e-12


def test_attention_mass_conserved():
    model = init(small_config(seed=3))
    rng = np.random.default_rng(7)
    for _ in range(50):
        T = int(rng.integers(1, 30))
        out = forward(model, rng.normal(size=(T, 8)))
        assert abs(out.a_bar.sum() - 1.0) <= 1e-6
        assert np.all(out.a_bar >= 0)
        assert np.max(np.abs(out.attn_last_row.sum(axis=1) - 1.0)) <= 1e-6


def test_causality_bitwise_in_f64():
    model = init(small_config(seed=11), dtype=np.float64)
    rng = np.random.default_rng(13)
    T = 9
    z = rng.normal(size=(T, 8))
    base = forward(model, z)
    for t in [3, 6]:
        perturbed = z.copy()
        perturbed[t + 1:] += rng.normal(size=(T - t - 1, 8))
        out = forward(model, perturbed)
        assert out.block_out[:t + 1].tobytes() == base.block_out[:t + 1].tobytes()


def test_permutation_changes_a_bar():
    model = init(small_config(seed=17))
    rng = np.random.default_rng(19)
    z = rng.normal(size=(8, 8))
    base = forward(model, z).a_bar
    changed = False
    for _ in range(5):
        perm = rng.permutation(8)
        if (perm == np.arange(8)).all():
            continue
        other = forward(model, z[perm]).a_bar
        if not np.allclose(other, base[perm], atol=1e-9):
            changed = True
            break
    assert changed


def test_forward_rejects_bad_input():
    model = init(small_config())
    with pytest.raises(ProbeError):
        forward(model, np.zeros((3, 5)))
    with pytest.raises(ProbeError):
        forward(model, np.full((3, 8), np.nan))


def test_detect_probability():
    model = init(small_config(seed=23))
    z = np.random.default_rng(29).normal(size=(4, 8))
    prob = detect(model, z)
    assert 0.0 <= prob <= 1.0
    assert ad.sigmoid_value(0.0) == 0.5
    assert ad.sigmoid_value(-50.0) < 1e-20


# ---------------------------------------------------------------------------
# gradients through the whole probe
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("use_ln", [True, False])
def test_probe_gradients_match_finite_differences(use_ln):
    cfg = ProbeConfig(d_in=6, n_heads=2, n_kv_heads=1, d_head=3, d_ff=5,
                      use_block_residual_ln=use_ln, seed=31)
    model = init(cfg, dtype=np.float64)
    z = np.random.default_rng(37).normal(size=(4, 6))

    def loss_value():
        return float(ad.bce_with_logits(forward(model, z).logit, 1).data)

    loss = ad.bce_with_logits(forward(model, z).logit, 1)
    ad.backward(loss)
    numeric = finite_difference(loss_value, model.parameters())
    for (name, param), num in zip(model.named_parameters(), numeric):
        assert grad_mismatches(param.grad, num) == 0, f"gradient mismatch in {name}"


# ---------------------------------------------------------------------------
# flops
# ---------------------------------------------------------------------------

def test_flops_smallest_config():
    cfg = ProbeConfig(d_in=1, n_heads=1, n_kv_heads=1, d_head=1, d_ff=1)
    # by hand from the documented formula: 6 + 4 + 2 + (2 + 2)
    assert flops_estimate(cfg, 1) == 16


def test_flops_superlinear_in_t():
    tiny = ProbeConfig(d_in=1, n_heads=1, n_kv_heads=1, d_head=1, d_ff=1)
    assert flops_estimate(tiny, 2) > 2 * flops_estimate(tiny, 1)
    cfg = small_config()
    for T in [2, 4, 16, 64]:
        assert flops_estimate(cfg, 2 * T) > 2 * flops_estimate(cfg, T)
    assert flops_estimate(cfg, 2) > flops_estimate(cfg, 1)  # monotone everywhere


def test_flops_full_scale_order_of_magnitude():
    # heads/dims of an 11B-class decoder, mean-length input in the hundreds
    cfg = ProbeConfig(d_in=4096, n_heads=32, n_kv_heads=8, d_head=128, d_ff=4096)
    estimate = flops_estimate(cfg, 430)
    reference = 2.2e10
    assert reference / 10 <= estimate <= reference * 10


def test_flops_rejects_bad_t():
    with pytest.raises(ProbeError):
        flops_estimate(small_config(), 0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_exact(tmp_path):
    model = init(small_config(seed=41))
    path = tmp_path / "probe.ckpt"
    save_model(model, path)
    back = load_model(path)
    assert back.config == model.config
    for (_, ta), (_, tb) in zip(model.named_parameters(), back.named_parameters()):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_checkpoint_roundtrip_bare_variant(tmp_path):
    model = init(small_config(seed=43, use_block_residual_ln=False))
    path = tmp_path / "probe.ckpt"
    save_model(model, path)
    back = load_model(path)
    assert back.config.use_block_residual_ln is False
    assert len(back.named_parameters()) == 8


def test_checkpoint_bad_magic():
    with pytest.raises(CheckpointError):
        load_model(io.BytesIO(b"nope" + b"\x00" * 64))


def test_checkpoint_truncated():
    buf = io.BytesIO()
    save_model(init(small_config()), buf)
    raw = buf.getvalue()
    with pytest.raises(CheckpointError):
        load_model(io.BytesIO(raw[:-10]))
