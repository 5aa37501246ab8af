"""The eight model variants over 768-d audio/video features.

Variants: unimodal V (video) and A (audio); baseline fusions EC (early
concat), LC (late concat through 128-unit dense layers), EA (elementwise
average), EP (elementwise product); CT (one bidirectional cross-attention
stage); SNIFR (two cascaded stages). Every fused variant first projects
each modality to d_model and runs it through a self-attention encoder,
then fuses, then shares one classifier head (120-unit dense + output).

Residual order is post-norm: LayerNorm(Z + Sublayer(Z)). Within a cascade
stage both directions read the same stage input. Cross-attention has no
output projection at n_heads=1; self-attention always has one.

Token sequences of length 1 (the default, features pre-pooled upstream)
take a batched fast path: softmax over a single key is identically 1, so
attention reduces exactly to the value projection (zero gradient to Q/K),
and the whole batch rides [B x d] matrices. Longer sequences run the
general per-clip path. The two paths agree bit for bit at T=1 up to
shared-kernel rounding; a test pins that.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ClipRecord

CHECKPOINT_MAGIC = b"SNFC"
CHECKPOINT_VERSION = 1


class FusionKind(str, Enum):
    V = "V"
    A = "A"
    EC = "EC"
    LC = "LC"
    EA = "EA"
    EP = "EP"
    CT = "CT"
    SNIFR = "SNIFR"

    @property
    def uses_audio(self) -> bool:
        return self is not FusionKind.V

    @property
    def uses_video(self) -> bool:
        return self is not FusionKind.A

    @property
    def n_cascade_stages(self) -> int:
        return {"CT": 1, "SNIFR": 2}.get(self.value, 0)


@dataclass
class ModelConfig:
    fusion_kind: FusionKind
    input_dim: int = 768
    d_model: int = 256
    n_heads: int = 1
    d_ff: int | None = None          # defaults to 2 * d_model
    n_encoder_layers: int = 1
    dropout_p: float = 0.1
    hidden_classifier: int = 120
    lc_dense: int = 128
    n_classes: int = 4
    seed: int = 0
    qkv_bias: bool = True
    ln_eps: float = 1e-5
    cascade_identity: bool = False   # ablation: skip cascade stages

    def __post_init__(self):
        if isinstance(self.fusion_kind, str):
            self.fusion_kind = FusionKind(self.fusion_kind)

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def head_input_dim(self) -> int:
        kind = self.fusion_kind
        if kind in (FusionKind.V, FusionKind.A, FusionKind.EA, FusionKind.EP):
            return self.d_model
        if kind is FusionKind.LC:
            return 2 * self.lc_dense
        return 2 * self.d_model

    def validate(self) -> None:
        extents = {
            "input_dim": self.input_dim, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.ffn_dim,
            "n_encoder_layers": self.n_encoder_layers,
            "hidden_classifier": self.hidden_classifier,
            "lc_dense": self.lc_dense, "n_classes": self.n_classes,
        }
        for name, value in extents.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_kind"] = self.fusion_kind.value
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("parameter name sets differ")
        for name, arr in state.items():
            if arr.shape != self.params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data = arr.copy()


@dataclass
class ForwardOutput:
    logits: Tensor            # [B x n_classes]
    penultimate: Tensor       # [B x hidden_classifier]
    fused: Tensor | None      # classifier input when a fusion applies


@dataclass
class Batch:
    """Stacked float64 features, one row block per clip."""

    audio: np.ndarray  # [B, T_a, 768]
    video: np.ndarray  # [B, T_v, 768]

    @classmethod
    def from_records(cls, records: Sequence[ClipRecord]) -> "Batch":
        if len(records) == 0:
            raise ValueError("empty batch")
        audio = np.stack([r.audio for r in records]).astype(np.float64)
        video = np.stack([r.video for r in records]).astype(np.float64)
        return cls(audio=audio, video=video)

    def __len__(self) -> int:
        return self.audio.shape[0]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_model(config: ModelConfig) -> Model:
    """Allocate and Glorot-initialize all parameters, in a fixed order."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params: dict[str, Tensor] = {}

    def weight(name: str, fan_in: int, fan_out: int) -> None:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                              requires_grad=True)

    def bias(name: str, n: int) -> None:
        params[name] = Tensor(np.zeros(n), requires_grad=True)

    def layernorm(prefix: str, d: int) -> None:
        params[f"{prefix}.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{prefix}.b"] = Tensor(np.zeros(d), requires_grad=True)

    def qkv(prefix: str, d: int, with_out_proj: bool) -> None:
        # No key bias: a constant added to every key shifts each softmax
        # row uniformly, so it provably cannot affect the output. Keeping
        # it would leave a dead parameter in the registry.
        for part in ("q", "k", "v"):
            weight(f"{prefix}.w{part}", d, d)
            if config.qkv_bias and part != "k":
                bias(f"{prefix}.b{part}", d)
        if with_out_proj:
            weight(f"{prefix}.wo", d, d)
            bias(f"{prefix}.bo", d)

    def ffn_block(prefix: str, d: int, d_ff: int) -> None:
        weight(f"{prefix}.w1", d, d_ff)
        bias(f"{prefix}.b1", d_ff)
        weight(f"{prefix}.w2", d_ff, d)
        bias(f"{prefix}.b2", d)

    def encoder(prefix: str) -> None:
        for layer in range(config.n_encoder_layers):
            p = f"{prefix}.l{layer}"
            qkv(f"{p}.attn", config.d_model, with_out_proj=True)
            layernorm(f"{p}.ln1", config.d_model)
            ffn_block(f"{p}.ffn", config.d_model, config.ffn_dim)
            layernorm(f"{p}.ln2", config.d_model)

    def cascade_side(prefix: str) -> None:
        qkv(f"{prefix}.attn", config.d_model, with_out_proj=config.n_heads > 1)
        layernorm(f"{prefix}.ln1", config.d_model)
        ffn_block(f"{prefix}.ffn", config.d_model, config.ffn_dim)
        layernorm(f"{prefix}.ln2", config.d_model)

    kind = config.fusion_kind
    if kind.uses_audio:
        weight("proj.a.w", config.input_dim, config.d_model)
        bias("proj.a.b", config.d_model)
    if kind.uses_video:
        weight("proj.v.w", config.input_dim, config.d_model)
        bias("proj.v.b", config.d_model)
    if kind.uses_audio:
        encoder("enc.a")
    if kind.uses_video:
        encoder("enc.v")
    if kind is FusionKind.LC:
        weight("lc.a.w", config.d_model, config.lc_dense)
        bias("lc.a.b", config.lc_dense)
        weight("lc.v.w", config.d_model, config.lc_dense)
        bias("lc.v.b", config.lc_dense)
    for stage in range(1, kind.n_cascade_stages + 1):
        cascade_side(f"cas.s{stage}.a")
        cascade_side(f"cas.s{stage}.b")
    weight("head.w1", config.head_input_dim, config.hidden_classifier)
    bias("head.b1", config.hidden_classifier)
    weight("head.w2", config.hidden_classifier, config.n_classes)
    bias("head.b2", config.n_classes)

    return Model(config=config, params=params)


def param_count(model: Model) -> int:
    return sum(p.size for p in model.params.values())


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = ad.matmul(x, w)
    return ad.add(y, b) if b is not None else y


def _drop(x: Tensor, cfg: ModelConfig, mode: str, rng) -> Tensor:
    return ad.dropout(x, cfg.dropout_p, train=(mode == "train"), rng=rng)


def _mha(q_src: Tensor, kv_src: Tensor, params: dict, prefix: str,
         cfg: ModelConfig, out_proj: bool) -> Tensor:
    """Multi-head scaled dot-product attention over full token sequences."""
    q = _linear(q_src, params[f"{prefix}.wq"], params.get(f"{prefix}.bq"))
    k = _linear(kv_src, params[f"{prefix}.wk"], params.get(f"{prefix}.bk"))
    v = _linear(kv_src, params[f"{prefix}.wv"], params.get(f"{prefix}.bv"))
    if cfg.n_heads == 1:
        out = ad.attention(q, k, v)
    else:
        dk = cfg.head_dim
        heads = [ad.attention(ad.slice_cols(q, j * dk, (j + 1) * dk),
                              ad.slice_cols(k, j * dk, (j + 1) * dk),
                              ad.slice_cols(v, j * dk, (j + 1) * dk))
                 for j in range(cfg.n_heads)]
        out = ad.concat_cols(heads)
    if out_proj:
        out = _linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return out


def _single_key_attention(kv_src: Tensor, params: dict, prefix: str,
                          cfg: ModelConfig, out_proj: bool) -> Tensor:
    """Exact T=1 reduction: one key means softmax weight 1, so the
    attention output is the value projection (Q/K receive zero gradient,
    matching the full formula's derivative of a constant softmax)."""
    out = _linear(kv_src, params[f"{prefix}.wv"], params.get(f"{prefix}.bv"))
    if out_proj:
        out = _linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return out


def _sublayer(z: Tensor, sub_out: Tensor, params: dict, ln_prefix: str,
              cfg: ModelConfig, mode: str, rng) -> Tensor:
    return ad.layer_norm(ad.add(z, _drop(sub_out, cfg, mode, rng)),
                         params[f"{ln_prefix}.g"], params[f"{ln_prefix}.b"],
                         cfg.ln_eps)


def _ffn(z: Tensor, params: dict, prefix: str) -> Tensor:
    return ad.ffn(z, params[f"{prefix}.w1"], params[f"{prefix}.b1"],
                  params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _encode(model: Model, z: Tensor, modality: str, mode: str, rng,
            single_key: bool) -> Tensor:
    cfg = model.config
    for layer in range(cfg.n_encoder_layers):
        p = f"enc.{modality}.l{layer}"
        if single_key:
            attn = _single_key_attention(z, model.params, f"{p}.attn", cfg, out_proj=True)
        else:
            attn = _mha(z, z, model.params, f"{p}.attn", cfg, out_proj=True)
        z = _sublayer(z, attn, model.params, f"{p}.ln1", cfg, mode, rng)
        z = _sublayer(z, _ffn(z, model.params, f"{p}.ffn"), model.params,
                      f"{p}.ln2", cfg, mode, rng)
    return z


def encode_intra(model: Model, z: Tensor, modality: str, mode: str = "eval",
                 rng=None) -> Tensor:
    """Self-attention encoder over one modality's [T x d_model] tokens."""
    if modality not in ("a", "v"):
        raise ValueError(f"modality must be 'a' or 'v', got {modality!r}")
    return _encode(model, z, modality, mode, rng, single_key=False)


def _cascade(model: Model, z_a: Tensor, z_b: Tensor, stage: int, mode: str,
             rng, single_key: bool) -> tuple[Tensor, Tensor]:
    cfg = model.config
    pa, pb = f"cas.s{stage}.a", f"cas.s{stage}.b"
    cross_proj = cfg.n_heads > 1
    # Both directions read the same stage inputs (parallel update).
    if single_key:
        attn_a = _single_key_attention(z_b, model.params, f"{pa}.attn", cfg, cross_proj)
        attn_b = _single_key_attention(z_a, model.params, f"{pb}.attn", cfg, cross_proj)
    else:
        attn_a = _mha(z_a, z_b, model.params, f"{pa}.attn", cfg, cross_proj)
        attn_b = _mha(z_b, z_a, model.params, f"{pb}.attn", cfg, cross_proj)
    z_a = _sublayer(z_a, attn_a, model.params, f"{pa}.ln1", cfg, mode, rng)
    z_b = _sublayer(z_b, attn_b, model.params, f"{pb}.ln1", cfg, mode, rng)
    z_a = _sublayer(z_a, _ffn(z_a, model.params, f"{pa}.ffn"), model.params,
                    f"{pa}.ln2", cfg, mode, rng)
    z_b = _sublayer(z_b, _ffn(z_b, model.params, f"{pb}.ffn"), model.params,
                    f"{pb}.ln2", cfg, mode, rng)
    return z_a, z_b


def cascade_step(model: Model, z_a: Tensor, z_b: Tensor, stage: int,
                 mode: str = "eval", rng=None) -> tuple[Tensor, Tensor]:
    """One bidirectional cross-attention stage (queries from each side,
    keys/values from the other), with residual+norm and FFN sublayers."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    return _cascade(model, z_a, z_b, stage, mode, rng, single_key=False)


def classify_head(model: Model, fused: Tensor) -> tuple[Tensor, Tensor]:
    """(logits, penultimate). Probabilities stay in the loss/metrics."""
    penult = ad.relu(_linear(fused, model.params["head.w1"], model.params["head.b1"]))
    logits = _linear(penult, model.params["head.w2"], model.params["head.b2"])
    return logits, penult


def _fuse(model: Model, pooled_a: Tensor | None, pooled_v: Tensor | None) -> Tensor | None:
    kind = model.config.fusion_kind
    if kind is FusionKind.V:
        return None
    if kind is FusionKind.A:
        return None
    if kind is FusionKind.LC:
        da = ad.relu(_linear(pooled_a, model.params["lc.a.w"], model.params["lc.a.b"]))
        dv = ad.relu(_linear(pooled_v, model.params["lc.v.w"], model.params["lc.v.b"]))
        return ad.concat_cols([da, dv])
    if kind is FusionKind.EA:
        return ad.mul(ad.add(pooled_a, pooled_v), 0.5)
    if kind is FusionKind.EP:
        return ad.mul(pooled_a, pooled_v)
    # EC, CT, SNIFR all concatenate.
    return ad.concat_cols([pooled_a, pooled_v])


def forward(model: Model, batch, mode: str = "eval", rng=None) -> ForwardOutput:
    """Run one batch through the configured variant.

    `batch` is a Batch or a list of ClipRecord. Train mode applies
    dropout and needs an rng; eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and model.config.dropout_p > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")
    if not isinstance(batch, Batch):
        batch = Batch.from_records(batch)
    cfg = model.config
    kind = cfg.fusion_kind
    for name, feats, used in (("audio", batch.audio, kind.uses_audio),
                              ("video", batch.video, kind.uses_video)):
        if used and feats.shape[2] != cfg.input_dim:
            raise ValueError(f"{name} feature dim {feats.shape[2]} != {cfg.input_dim}")

    t_a, t_v = batch.audio.shape[1], batch.video.shape[1]
    pooled_single = ((not kind.uses_audio or t_a == 1)
                     and (not kind.uses_video or t_v == 1))
    if pooled_single:
        pooled_a, pooled_v = _forward_pooled(model, batch, mode, rng)
    else:
        pooled_a, pooled_v = _forward_sequences(model, batch, mode, rng)

    fused = _fuse(model, pooled_a, pooled_v)
    head_in = fused if fused is not None else (pooled_v if kind is FusionKind.V else pooled_a)
    logits, penult = classify_head(model, head_in)
    return ForwardOutput(logits=logits, penultimate=penult, fused=fused)


def _forward_pooled(model: Model, batch: Batch, mode: str, rng):
    """Fast path: every used modality has exactly one token per clip."""
    cfg = model.config
    kind = cfg.fusion_kind
    z_a = z_v = None
    if kind.uses_audio:
        x = Tensor(batch.audio[:, 0, :])
        z_a = _encode(model, _linear(x, model.params["proj.a.w"], model.params["proj.a.b"]),
                      "a", mode, rng, single_key=True)
    if kind.uses_video:
        x = Tensor(batch.video[:, 0, :])
        z_v = _encode(model, _linear(x, model.params["proj.v.w"], model.params["proj.v.b"]),
                      "v", mode, rng, single_key=True)
    if not cfg.cascade_identity:
        for stage in range(1, kind.n_cascade_stages + 1):
            z_a, z_v = _cascade(model, z_a, z_v, stage, mode, rng, single_key=True)
    return z_a, z_v


def _forward_sequences(model: Model, batch: Batch, mode: str, rng):
    """General path: per-clip attention over full token sequences."""
    cfg = model.config
    kind = cfg.fusion_kind
    pooled_a_rows, pooled_v_rows = [], []
    for i in range(len(batch)):
        z_a = z_v = None
        if kind.uses_audio:
            x = Tensor(batch.audio[i])
            z_a = _encode(model, _linear(x, model.params["proj.a.w"],
                                         model.params["proj.a.b"]),
                          "a", mode, rng, single_key=False)
        if kind.uses_video:
            x = Tensor(batch.video[i])
            z_v = _encode(model, _linear(x, model.params["proj.v.w"],
                                         model.params["proj.v.b"]),
                          "v", mode, rng, single_key=False)
        if not cfg.cascade_identity:
            for stage in range(1, kind.n_cascade_stages + 1):
                z_a, z_v = _cascade(model, z_a, z_v, stage, mode, rng, single_key=False)
        if z_a is not None:
            pooled_a_rows.append(ad.mean_rows(z_a))
        if z_v is not None:
            pooled_v_rows.append(ad.mean_rows(z_v))
    pooled_a = ad.concat_rows(pooled_a_rows) if pooled_a_rows else None
    pooled_v = ad.concat_rows(pooled_v_rows) if pooled_v_rows else None
    return pooled_a, pooled_v


def gradient_check_model(kind: FusionKind, d_model: int = 8, seed: int = 0,
                         h: float = 1e-5, coords_per_tensor: int = 100,
                         batch_size: int = 2, t_audio: int = 2,
                         t_video: int = 3) -> list[tuple[str, float]]:
    """Finite-difference check of a whole variant's backward pass.

    Builds a tiny model, a small multi-token batch (multiple tokens keep
    the attention softmax unsaturated so Q/K weights carry real
    gradients), and compares every registry parameter's reverse-mode
    gradient of the cross-entropy loss against central differences.
    Returns (name, max relative error) sorted by error descending.
    """
    config = ModelConfig(fusion_kind=kind, d_model=d_model, dropout_p=0.0, seed=seed)
    model = build_model(config)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    batch = Batch(audio=rng.standard_normal((batch_size, t_audio, config.input_dim)),
                  video=rng.standard_normal((batch_size, t_video, config.input_dim)))
    labels = [int(v) for v in rng.integers(0, config.n_classes, size=batch_size)]

    def loss_fn():
        out = forward(model, batch, mode="eval")
        return ad.cross_entropy(out.logits, labels)

    return ad.grad_check_report(loss_fn, model.params, h=h,
                                coords_per_tensor=coords_per_tensor, seed=seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path: str) -> None:
    """Binary checkpoint: config header plus named f64 payloads."""
    config_json = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IBI", CHECKPOINT_VERSION,
                            list(FusionKind).index(model.config.fusion_kind),
                            len(config_json)))
        f.write(config_json)
        f.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    version, fusion_code, config_len = struct.unpack_from("<IBI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + 9
    config = ModelConfig.from_dict(json.loads(blob[off:off + config_len]))
    if list(FusionKind).index(config.fusion_kind) != fusion_code:
        raise ValueError("fusion kind header disagrees with config payload")
    off += config_len
    (n_entries,) = struct.unpack_from("<I", blob, off)
    off += 4
    model = build_model(config)
    seen = set()
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if name not in model.params:
            raise ValueError(f"unknown parameter {name!r} in checkpoint")
        if model.params[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        model.params[name].data = arr.astype(np.float64).copy()
        seen.add(name)
    if seen != set(model.params):
        raise ValueError("checkpoint missing parameters: "
                         + ", ".join(sorted(set(model.params) - seen)))
    return model
