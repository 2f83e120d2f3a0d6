"""Frozen transformer-encoder backbone with a classifier head.

A small randomly-initialized encoder stands in for a pretrained language
model: what matters for the mechanism under study is that the backbone's
parameters stay frozen while injected adaptation modules train. Blocks are
post-LN: ``x = LN(x + sublayer(x))``. Pooling takes the first position
(a [cls] token prepended by the data pipeline).

Hook points let adaptation modules intercept the computation without the
backbone knowing what an adapter is: ``attn_out``/``ffn_out`` transform a
sub-layer's output before the residual add, ``q_proj``/``v_proj`` replace
the corresponding attention projection entirely.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor, embedding, gelu, layer_norm, matmul, select_position, softmax, transpose


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture hyperparameters for the encoder stack."""

    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 16
    num_classes: int = 2

    def validate(self) -> "BackboneConfig":
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim",
                     "vocab_size", "max_seq_len", "num_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"backbone.{name} must be a positive int, got {v!r}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"backbone.model_dim {self.model_dim} not divisible by "
                f"backbone.num_heads {self.num_heads}"
            )
        return self


# A hook takes (x, w, b) and returns the projection it replaces.
ProjectionHook = Callable[[Tensor, Tensor, Tensor], Tensor]
# An output hook transforms a sub-layer output (B, S, d) -> (B, S, d).
OutputHook = Callable[[Tensor], Tensor]


@dataclass
class LayerHooks:
    """Per-layer interception points for adaptation modules."""

    attn_out: Optional[OutputHook] = None
    ffn_out: Optional[OutputHook] = None
    q_proj: Optional[ProjectionHook] = None
    v_proj: Optional[ProjectionHook] = None


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class BackboneModel:
    config: BackboneConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list
    head_w: Tensor
    head_b: Tensor
    seed: int = 0

    def backbone_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        """Everything except the classifier head, in a stable name order."""
        yield "emb.tok", self.tok_emb
        yield "emb.pos", self.pos_emb
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layer{i}")

    def head_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.backbone_parameters()
        yield from self.head_parameters()


def build_backbone(config: BackboneConfig, seed: int = 0) -> BackboneModel:
    """Deterministically initialize an encoder: same seed, bit-identical weights.

    Projection weights are Gaussian with 1/sqrt(fan_in) scale so signals keep
    unit variance through the stack — a frozen random encoder still has to mix
    information across positions for adapters to have anything to work with.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d, f = config.model_dim, config.ffn_dim

    def w(fan_in, fan_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)),
                      requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    tok_emb = Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d)), requires_grad=True)
    pos_emb = Tensor(rng.normal(0.0, 1.0, size=(config.max_seq_len, d)), requires_grad=True)

    layers = []
    for _ in range(config.num_layers):
        layers.append(LayerParams(
            wq=w(d, d), bq=zeros(d), wk=w(d, d), bk=zeros(d),
            wv=w(d, d), bv=zeros(d), wo=w(d, d), bo=zeros(d),
            ln1_g=ones(d), ln1_b=zeros(d),
            w1=w(d, f), b1=zeros(f), w2=w(f, d), b2=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
        ))

    head_w = w(d, config.num_classes)
    head_b = zeros(config.num_classes)
    return BackboneModel(config=config, tok_emb=tok_emb, pos_emb=pos_emb,
                         layers=layers, head_w=head_w, head_b=head_b, seed=seed)


def _project(x: Tensor, w: Tensor, b: Tensor, hook: Optional[ProjectionHook]) -> Tensor:
    if hook is not None:
        return hook(x, w, b)
    return matmul(x, w) + b


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, s, d = x.shape
    return transpose(x.reshape(b, s, num_heads, d // num_heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return transpose(x, (0, 2, 1, 3)).reshape(b, s, h * dh)


def encoder_forward(model: BackboneModel, token_ids: np.ndarray,
                    adapters: Optional[Sequence[Optional[LayerHooks]]] = None) -> Tensor:
    """Run the encoder and return (B, C) logits from the first position.

    ``adapters`` is an optional list of per-layer hook bundles (None entries
    allowed). With no hooks, the forward is a pure function of the weights,
    so repeated calls are bit-identical.
    """
    cfg = model.config
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise DataError(f"token ids must be a batch x seq matrix, got shape {ids.shape}")
    b, s = ids.shape
    if s > cfg.max_seq_len:
        raise DataError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
        raise DataError(
            f"token id out of range [0, {cfg.vocab_size}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    if adapters is not None and len(adapters) != cfg.num_layers:
        raise ConfigError(
            f"adapter hooks list has {len(adapters)} entries for {cfg.num_layers} layers"
        )

    x = embedding(model.tok_emb, ids) + embedding(model.pos_emb, np.arange(s))
    scale = 1.0 / math.sqrt(cfg.model_dim // cfg.num_heads)

    for i, layer in enumerate(model.layers):
        hooks = adapters[i] if adapters is not None else None

        q = _project(x, layer.wq, layer.bq, hooks.q_proj if hooks else None)
        k = matmul(x, layer.wk) + layer.bk
        v = _project(x, layer.wv, layer.bv, hooks.v_proj if hooks else None)

        qh = _split_heads(q, cfg.num_heads)
        kh = _split_heads(k, cfg.num_heads)
        vh = _split_heads(v, cfg.num_heads)
        scores = matmul(qh, transpose(kh)) * scale
        ctx = _merge_heads(matmul(softmax(scores, axis=-1), vh))
        attn_out = matmul(ctx, layer.wo) + layer.bo
        if hooks and hooks.attn_out is not None:
            attn_out = hooks.attn_out(attn_out)
        x = layer_norm(x + attn_out, layer.ln1_g, layer.ln1_b)

        h = matmul(gelu(matmul(x, layer.w1) + layer.b1), layer.w2) + layer.b2
        if hooks and hooks.ffn_out is not None:
            h = hooks.ffn_out(h)
        x = layer_norm(x + h, layer.ln2_g, layer.ln2_b)

    pooled = select_position(x, 0)
    return matmul(pooled, model.head_w) + model.head_b


def freeze_backbone(model: BackboneModel, head_trainable: bool = True) -> None:
    """Mark every backbone parameter non-trainable.

    Classifier-head trainability is an explicit choice, not a side effect.
    """
    for _, p in model.backbone_parameters():
        p.requires_grad = False
        p.grad = None
    for _, p in model.head_parameters():
        p.requires_grad = bool(head_trainable)
        if not head_trainable:
            p.grad = None


def backbone_checksum(model: BackboneModel) -> str:
    """SHA-256 over all backbone parameter bytes in name order."""
    h = hashlib.sha256()
    for name, p in model.backbone_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def backbone_param_count(config: BackboneConfig, include_head: bool = False) -> int:
    """Arithmetic parameter count; never materializes weights."""
    d, f = config.model_dim, config.ffn_dim
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    total = config.vocab_size * d + config.max_seq_len * d + config.num_layers * per_layer
    if include_head:
        total += d * config.num_classes + config.num_classes
    return total


def count_adaptation_params(d: int, num_layers: int, r: int, variant: str = "adapter",
                            insertion_points: int = 1, sharing: str = "none",
                            M: int = 1, phase: str = "inference") -> int:
    """Tunable-parameter count for a mixture-adapted model.

    Adapter variant per insertion point: down-projection d*r + r, up-projection
    r*d + d. LoRA variant per adapted matrix: 2*d*r, no biases. The inference
    (post-merge) count uses one module per point; the training count multiplies
    unshared matrices by M (with up-projection sharing only the down side
    scales).
    """
    if min(d, num_layers, r, insertion_points, M) <= 0:
        raise ConfigError("count_adaptation_params arguments must be positive")
    if variant not in ("adapter", "lora"):
        raise ConfigError(f"unknown variant {variant!r}")
    if sharing not in ("none", "project_up"):
        raise ConfigError(f"unknown sharing mode {sharing!r}")
    if phase not in ("inference", "training"):
        raise ConfigError(f"unknown phase {phase!r}")

    if variant == "adapter":
        down = d * r + r
        up = r * d + d
    else:
        down = d * r  # A factor
        up = d * r    # B factor

    if phase == "inference":
        per_point = down + up
    elif sharing == "project_up":
        per_point = M * down + up
    else:
        per_point = M * (down + up)
    return num_layers * insertion_points * per_point
