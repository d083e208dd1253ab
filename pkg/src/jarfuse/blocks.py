"""Attention, MLP and transformer-layer building blocks.

All blocks are pure functions over explicit parameter bundles.  Projection
matrices are bias-free; the MLP keeps its biases.  The transformer layer is
pre-norm, so zero-initialized weights make it an exact identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    ParamStore,
    Tensor,
    add,
    add_row_vector,
    concat_cols,
    gelu,
    layer_norm,
    matmul,
    mul_const,
    slice_cols,
    softmax_rows,
    transpose,
)

def fan_in_std(fan_in: int) -> float:
    """Weight scale that keeps activations O(1) at any width."""
    return fan_in ** -0.5


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    """Q/K/V/output projections, each width x width, split across heads."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @property
    def width(self) -> int:
        return self.wq.shape[0]


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ratio: int


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    mlp: MlpParams
    ln1: LayerNormParams
    ln2: LayerNormParams


def init_layer_norm(store: ParamStore, prefix: str, width: int) -> LayerNormParams:
    return LayerNormParams(
        gain=store.add(f"{prefix}.gain", np.ones(width)),
        bias=store.add(f"{prefix}.bias", np.zeros(width)),
    )


def init_attention(
    store: ParamStore, prefix: str, width: int, heads: int, rng: np.random.Generator
) -> AttentionParams:
    if heads < 1 or width % heads != 0:
        raise DimensionError(f"head count {heads} must divide width {width}")
    shape = (width, width)
    std = fan_in_std(width)
    return AttentionParams(
        wq=store.add(f"{prefix}.wq", rng.normal(0.0, std, shape)),
        wk=store.add(f"{prefix}.wk", rng.normal(0.0, std, shape)),
        wv=store.add(f"{prefix}.wv", rng.normal(0.0, std, shape)),
        wo=store.add(f"{prefix}.wo", rng.normal(0.0, std, shape)),
        heads=heads,
    )


def init_mlp(
    store: ParamStore, prefix: str, width: int, ratio: int, rng: np.random.Generator
) -> MlpParams:
    hidden = ratio * width
    return MlpParams(
        w1=store.add(f"{prefix}.w1", rng.normal(0.0, fan_in_std(width), (width, hidden))),
        b1=store.add(f"{prefix}.b1", np.zeros(hidden)),
        w2=store.add(f"{prefix}.w2", rng.normal(0.0, fan_in_std(hidden), (hidden, width))),
        b2=store.add(f"{prefix}.b2", np.zeros(width)),
        ratio=ratio,
    )


def init_transformer_layer(
    store: ParamStore,
    prefix: str,
    width: int,
    heads: int,
    ratio: int,
    rng: np.random.Generator,
) -> TransformerLayerParams:
    return TransformerLayerParams(
        attn=init_attention(store, f"{prefix}.attn", width, heads, rng),
        mlp=init_mlp(store, f"{prefix}.mlp", width, ratio, rng),
        ln1=init_layer_norm(store, f"{prefix}.ln1", width),
        ln2=init_layer_norm(store, f"{prefix}.ln2", width),
    )


def multi_head_attention(
    queries: Tensor, keys_values: Tensor, params: AttentionParams
) -> Tensor:
    """Scaled dot-product attention; output shape follows the query count."""
    width = params.width
    if queries.shape[1] != width or keys_values.shape[1] != width:
        raise DimensionError(
            f"attention width mismatch: queries {queries.shape}, "
            f"keys/values {keys_values.shape}, params width {width}"
        )
    q = matmul(queries, params.wq)
    k = matmul(keys_values, params.wk)
    v = matmul(keys_values, params.wv)
    head_dim = width // params.heads
    inv_scale = 1.0 / math.sqrt(head_dim)
    outputs = []
    for h in range(params.heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        logits = mul_const(matmul(qh, transpose(kh)), inv_scale)
        weights = softmax_rows(logits)
        outputs.append(matmul(weights, vh))
    return matmul(concat_cols(outputs), params.wo)


def mlp_forward(x: Tensor, params: MlpParams) -> Tensor:
    if x.shape[1] != params.w1.shape[0]:
        raise DimensionError(
            f"mlp width mismatch: input {x.shape}, w1 {params.w1.shape}"
        )
    h = gelu(add_row_vector(matmul(x, params.w1), params.b1))
    return add_row_vector(matmul(h, params.w2), params.b2)


def transformer_layer(x: Tensor, params: TransformerLayerParams) -> Tensor:
    """Pre-norm residual layer: x + SelfAttn(Ln(x)), then + MLP(Ln(.))."""
    h = layer_norm(x, params.ln1.gain, params.ln1.bias)
    x = add(x, multi_head_attention(h, h, params.attn))
    h = layer_norm(x, params.ln2.gain, params.ln2.bias)
    return add(x, mlp_forward(h, params.mlp))


def zero_layer_params(layer: TransformerLayerParams) -> None:
    """Zero every tensor of a layer in place (identity-map configuration)."""
    for t in (
        layer.attn.wq,
        layer.attn.wk,
        layer.attn.wv,
        layer.attn.wo,
        layer.mlp.w1,
        layer.mlp.b1,
        layer.mlp.w2,
        layer.mlp.b2,
        layer.ln1.gain,
        layer.ln1.bias,
        layer.ln2.gain,
        layer.ln2.bias,
    ):
        t.data[...] = 0.0
