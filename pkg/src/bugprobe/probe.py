"""Attention-block probe over frozen hidden states.

The probe is a single grouped-query attention block followed by a small
classifier head that emits one logit for "is this sample buggy". Query head
m reads the keys and values of kv group m // (n_heads // n_kv_heads);
attention is causal. Besides the logit, the forward pass exposes the last
row of every head's attention matrix and their head average: that averaged
vector is the per-token localization signal everything downstream ranks by.

Two wirings exist. The default is a pre-norm residual block: the attention
runs on a normalized copy of the input, is added back to the raw input, and
the classifier reads a normalization of the final token. The bare variant
(use_block_residual_ln=False) feeds the raw attention output's final token
straight into the classifier; it is kept for ablation.

No positional encodings are added here; the upstream model's hidden states
already carry position. No dropout anywhere.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from . import autodiff as ad
from .errors import BugprobeError

CHECKPOINT_MAGIC = b"BAPM"
CHECKPOINT_VERSION = 1


class ProbeError(BugprobeError):
    pass


class CheckpointError(BugprobeError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    """Architecture hyperparameters.

    Defaults are desk-scale: small enough for finite-difference gradient
    checking while keeping the grouped-query head structure.
    """

    d_in: int
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    d_ff: int = 64
    use_block_residual_ln: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "n_heads", "n_kv_heads", "d_head", "d_ff"):
            if getattr(self, name) < 1:
                raise ProbeError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ProbeError(
                f"n_kv_heads ({self.n_kv_heads}) must divide n_heads ({self.n_heads})")

    @property
    def attn_width(self) -> int:
        return self.n_heads * self.d_head

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.d_head

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        return cls(**d)


class ProbeModel:
    """Parameter container; immutable shapes, mutable values (training)."""

    def __init__(self, config: ProbeConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.w_q: ad.Tensor
        self.w_k: ad.Tensor
        self.w_v: ad.Tensor
        self.w_o: ad.Tensor
        self.ln_attn_gain: Optional[ad.Tensor] = None
        self.ln_attn_bias: Optional[ad.Tensor] = None
        self.ln_head_gain: Optional[ad.Tensor] = None
        self.ln_head_bias: Optional[ad.Tensor] = None
        self.mlp_w1: ad.Tensor
        self.mlp_b1: ad.Tensor
        self.mlp_w2: ad.Tensor
        self.mlp_b2: ad.Tensor

    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        """Parameters in the fixed checkpoint order."""
        names = ["w_q", "w_k", "w_v", "w_o"]
        if self.config.use_block_residual_ln:
            names += ["ln_attn_gain", "ln_attn_bias", "ln_head_gain", "ln_head_bias"]
        names += ["mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"]
        return [(n, getattr(self, n)) for n in names]

    def parameters(self) -> list[ad.Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def copy_state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            if n not in state:
                raise ProbeError(f"missing parameter {n!r} in state")
            if state[n].shape != t.data.shape:
                raise ProbeError(f"parameter {n!r} shape {state[n].shape} != {t.data.shape}")
            t.data[...] = state[n].astype(t.data.dtype)


@dataclass
class ProbeOutput:
    """One forward pass: the detection logit plus the attention read-out.

    attn_last_row is (n_heads, T): final-token attention of each head.
    a_bar is its column mean, a non-negative vector summing to 1.
    block_out is the processed (T, d_in) sequence, kept for diagnostics.
    """

    logit: ad.Tensor
    attn_last_row: np.ndarray
    a_bar: np.ndarray
    block_out: np.ndarray

    @property
    def logit_value(self) -> float:
        return float(self.logit.data.reshape(()))


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
             dtype) -> ad.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ad.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                     requires_grad=True)


def init(config: ProbeConfig, dtype=np.float32) -> ProbeModel:
    """Fresh model; scaled-uniform weights from the config seed, bound 1/sqrt(fan_in)."""
    model = ProbeModel(config, dtype=dtype)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dt = model.dtype
    # Draw order is fixed; changing it would silently change every seeded run.
    model.w_q = _uniform(rng, (config.d_in, config.attn_width), config.d_in, dt)
    model.w_k = _uniform(rng, (config.d_in, config.kv_width), config.d_in, dt)
    model.w_v = _uniform(rng, (config.d_in, config.kv_width), config.d_in, dt)
    model.w_o = _uniform(rng, (config.attn_width, config.d_in), config.attn_width, dt)
    model.mlp_w1 = _uniform(rng, (config.d_in, config.d_ff), config.d_in, dt)
    model.mlp_b1 = _uniform(rng, (config.d_ff,), config.d_in, dt)
    model.mlp_w2 = _uniform(rng, (config.d_ff, 1), config.d_ff, dt)
    model.mlp_b2 = _uniform(rng, (1,), config.d_ff, dt)
    if config.use_block_residual_ln:
        model.ln_attn_gain = ad.Tensor(np.ones(config.d_in, dtype=dt), requires_grad=True)
        model.ln_attn_bias = ad.Tensor(np.zeros(config.d_in, dtype=dt), requires_grad=True)
        model.ln_head_gain = ad.Tensor(np.ones(config.d_in, dtype=dt), requires_grad=True)
        model.ln_head_bias = ad.Tensor(np.zeros(config.d_in, dtype=dt), requires_grad=True)
    return model


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def forward(model: ProbeModel, z: np.ndarray) -> ProbeOutput:
    """Run the probe on a (T, d_in) hidden-state matrix."""
    cfg = model.config
    z = np.asarray(z, dtype=model.dtype)
    if z.ndim != 2 or z.shape[1] != cfg.d_in:
        raise ProbeError(f"input must be (T, {cfg.d_in}), got {z.shape}")
    T = z.shape[0]
    if T < 1:
        raise ProbeError("input has no tokens")
    if not np.isfinite(z).all():
        raise ProbeError("non-finite values in probe input")

    x = ad.Tensor(z)
    if cfg.use_block_residual_ln:
        h = ad.layer_norm(x, model.ln_attn_gain, model.ln_attn_bias)
    else:
        h = x

    q = h @ model.w_q
    k = h @ model.w_k
    v = h @ model.w_v
    mask = causal_mask(T)
    inv_sqrt_dh = 1.0 / math.sqrt(cfg.d_head)
    group_size = cfg.n_heads // cfg.n_kv_heads

    head_outputs = []
    attn_rows = np.empty((cfg.n_heads, T), dtype=model.dtype)
    for m in range(cfg.n_heads):
        g = m // group_size
        q_m = ad.cols(q, m * cfg.d_head, (m + 1) * cfg.d_head)
        k_g = ad.cols(k, g * cfg.d_head, (g + 1) * cfg.d_head)
        v_g = ad.cols(v, g * cfg.d_head, (g + 1) * cfg.d_head)
        scores = ad.scale(q_m @ ad.transpose(k_g), inv_sqrt_dh)
        attn = ad.softmax_rows(scores, mask)
        attn_rows[m] = attn.data[-1]
        head_outputs.append(attn @ v_g)

    attn_out = ad.concat_cols(head_outputs) @ model.w_o

    if cfg.use_block_residual_ln:
        processed = x + attn_out
        head_in = ad.layer_norm(ad.row(processed, T - 1),
                                model.ln_head_gain, model.ln_head_bias)
    else:
        processed = attn_out
        head_in = ad.row(processed, T - 1)

    hidden = ad.gelu(ad.add_rowvec(head_in @ model.mlp_w1, model.mlp_b1))
    logit = ad.add_rowvec(hidden @ model.mlp_w2, model.mlp_b2)

    a_bar = attn_rows.mean(axis=0)
    return ProbeOutput(logit=logit, attn_last_row=attn_rows, a_bar=a_bar,
                       block_out=processed.data)


def detect(model: ProbeModel, z: np.ndarray) -> float:
    """Bug-presence probability in [0, 1]."""
    return ad.sigmoid_value(forward(model, z).logit_value)


def flops_estimate(config: ProbeConfig, T: int) -> int:
    """Expected inference cost in FLOPs for a T-token input.

    Accounting: 2 FLOPs per multiply-add. Terms, in order: q/k/v
    projections, attention scores plus value mixing (the quadratic part),
    output projection, classifier MLP on the final token.
    """
    if T < 1:
        raise ProbeError(f"T must be >= 1, got {T}")
    m, g, dh = config.n_heads, config.n_kv_heads, config.d_head
    proj = 2 * T * config.d_in * (m + 2 * g) * dh
    attn = 2 * m * T * T * dh * 2
    out = 2 * T * (m * dh) * config.d_in
    mlp = 2 * (m * dh) * config.d_ff + 2 * config.d_ff
    return proj + attn + out + mlp


def save_model(model: ProbeModel, dest: Union[str, Path, BinaryIO]) -> int:
    """Write a checkpoint; parameters stored float32 little-endian.

    Layout mirrors the record format: magic, version u32, header-length
    u32, JSON header (config plus parameter names and shapes), then the
    parameter arrays concatenated in named_parameters() order.
    """
    names_shapes = [[n, list(t.data.shape)] for n, t in model.named_parameters()]
    header = {"config": model.config.to_dict(), "params": names_shapes}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(header_bytes))
    buf += header_bytes
    for _, t in model.named_parameters():
        buf += t.data.astype("<f4").tobytes()
    payload = bytes(buf)
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(payload)
    else:
        dest.write(payload)
    return len(payload)


def load_model(source: Union[str, Path, BinaryIO]) -> ProbeModel:
    if isinstance(source, (str, Path)):
        raw: BinaryIO = io.BytesIO(Path(source).read_bytes())
    else:
        raw = source
    magic = raw.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    version_bytes = raw.read(4)
    if len(version_bytes) < 4:
        raise CheckpointError("truncated checkpoint (version)")
    (version,) = struct.unpack("<I", version_bytes)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    len_bytes = raw.read(4)
    if len(len_bytes) < 4:
        raise CheckpointError("truncated checkpoint (header length)")
    (header_len,) = struct.unpack("<I", len_bytes)
    header_bytes = raw.read(header_len)
    if len(header_bytes) < header_len:
        raise CheckpointError("truncated checkpoint (header)")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
        config = ProbeConfig.from_dict(header["config"])
        names_shapes = [(str(n), tuple(int(x) for x in s)) for n, s in header["params"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc

    model = init(config, dtype=np.float32)
    expected = [(n, t.data.shape) for n, t in model.named_parameters()]
    if expected != list(names_shapes):
        raise CheckpointError(
            f"checkpoint parameter table {names_shapes} does not match config-derived "
            f"table {expected}")
    state = {}
    for name, shape in names_shapes:
        n_items = int(np.prod(shape)) if shape else 1
        chunk = raw.read(4 * n_items)
        if len(chunk) < 4 * n_items:
            raise CheckpointError(f"truncated checkpoint (parameter {name!r})")
        state[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    model.load_state(state)
    return model
