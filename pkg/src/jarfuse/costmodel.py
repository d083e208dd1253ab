"""Closed-form FLOP, parameter and activation-memory model for every fusion kind.

The FLOP formulas mirror the instrumented forwards in :mod:`jarfuse.fusion`
term by term and agree with the recorded counter exactly (tolerance zero).
The counting convention is defined in :mod:`jarfuse.tensor`.

Full closed form of one attention call with q query tokens, m key/value
tokens, width d and h heads:

    flops_attention(q, m, d, h) =
          2*q*d*d          (query projection)
        + 2*m*d*d * 2      (key and value projections)
        + 2*q*m*d          (logits, summed over heads)
        + 5*q*m*h          (softmax, 5 FLOPs per element per head)
        + 2*q*m*d          (weighted values, summed over heads)
        + 2*q*d*d          (output projection)
    = 4*q*d*d + 4*m*d*d + 4*q*m*d + 5*q*m*h

The MLP with expansion ratio r costs 4*r*q*d*d + 8*q*r*d (two projections
plus GELU at 8 FLOPs per hidden element); layer norm costs 8 FLOPs per
element.  Residual adds, bias adds and gate scalings are uncounted, so the
iterative-combination mode does not change the reported FLOPs.

Activation counts are an analytic estimate of the values held live during a
forward pass with the graph retained (no recomputation): the sum of the
major intermediate sizes listed next to each formula.  They are meant for
direction comparisons (for example concatenation's quadratic logits), not
for exact agreement with an allocator.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

from .fusion import FUSION_KINDS, ConfigError, FusionConfig

SWEEP_AXES = ("image_size", "width", "depth", "iterations", "tokens")


@dataclass(frozen=True)
class ArchSpec:
    """A fully specified architecture point for cost evaluation."""

    width: int = 768
    heads: int = 12
    total_layers: int = 32
    text_len: int = 16
    grid_h: int = 14
    grid_w: int = 14
    channels: int = 768
    latent_tokens: int = 64
    iterations: int = 4
    fusion_kind: str = "jar"
    mlp_ratio: int = 4

    @property
    def image_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        for name in (
            "width", "heads", "total_layers", "text_len", "grid_h", "grid_w",
            "channels", "latent_tokens", "iterations", "mlp_ratio",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.width % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(
                f"unknown fusion kind {self.fusion_kind!r}; valid: {FUSION_KINDS}"
            )
        if self.fusion_kind in ("jar", "perceiver", "spatial"):
            if self.total_layers % self.iterations != 0:
                raise ConfigError(
                    f"total_layers ({self.total_layers}) must be divisible by "
                    f"iterations ({self.iterations})"
                )

    def to_fusion_config(self, **overrides) -> FusionConfig:
        cfg = FusionConfig(
            width=self.width,
            heads=self.heads,
            latent_tokens=self.latent_tokens,
            iterations=self.iterations,
            total_layers=self.total_layers,
            mlp_ratio=self.mlp_ratio,
        )
        return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class CostReport:
    flops: int
    params: int
    peak_activation_values: int


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def flops_matmul(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def flops_attention(q: int, m: int, width: int, heads: int) -> int:
    """Exact cost of one multi-head attention call (see module docstring)."""
    return 4 * q * width * width + 4 * m * width * width + 4 * q * m * width + 5 * q * m * heads


def flops_mlp(q: int, width: int, ratio: int) -> int:
    return 4 * ratio * q * width * width + 8 * q * ratio * width


def flops_layer_norm(q: int, width: int) -> int:
    return 8 * q * width


def flops_transformer_layer(q: int, width: int, heads: int, ratio: int) -> int:
    return (
        2 * flops_layer_norm(q, width)
        + flops_attention(q, q, width, heads)
        + flops_mlp(q, width, ratio)
    )


def flops_gated_fuse(n: int, width: int, heads: int, ratio: int) -> int:
    return (
        2 * flops_layer_norm(n, width)
        + flops_attention(n, n, width, heads)
        + flops_mlp(n, width, ratio)
    )


def flops_project_image(m: int, channels: int, width: int) -> int:
    return flops_matmul(m, channels, width)


def flops_latent_resample(n: int, m: int, width: int, heads: int) -> int:
    return flops_attention(n, m, width, heads)


def flops_spatial_resample(m: int, n: int, width: int) -> int:
    # ln + hidden projection + gelu + map projection + softmax + weighted sum
    return (
        8 * m * width
        + 2 * m * width * width
        + 8 * m * width
        + 2 * m * width * n
        + 5 * n * m
        + 2 * n * m * width
    )


def flops_jar(spec: ArchSpec) -> int:
    d, h, r = spec.width, spec.heads, spec.mlp_ratio
    n, k, m, el = spec.latent_tokens, spec.iterations, spec.image_tokens, spec.text_len
    return (
        flops_project_image(m, spec.channels, d)
        + flops_latent_resample(n, m, d, h)
        + flops_latent_resample(n, el, d, h)
        + k * flops_gated_fuse(n, d, h, r)
        + spec.total_layers * flops_transformer_layer(n, d, h, r)
    )


def flops_concat(spec: ArchSpec) -> int:
    s = spec.text_len + spec.image_tokens
    return flops_project_image(spec.image_tokens, spec.channels, spec.width) + (
        spec.total_layers
        * flops_transformer_layer(s, spec.width, spec.heads, spec.mlp_ratio)
    )


def flops_crossattn(spec: ArchSpec) -> int:
    d, h, r = spec.width, spec.heads, spec.mlp_ratio
    el, m = spec.text_len, spec.image_tokens
    per_layer = (
        2 * flops_layer_norm(el, d)
        + flops_attention(el, m, d, h)
        + flops_mlp(el, d, r)
    )
    return (
        flops_project_image(m, spec.channels, d)
        + flops_layer_norm(m, d)
        + spec.total_layers * per_layer
    )


def flops_perceiver(spec: ArchSpec) -> int:
    d, h, r = spec.width, spec.heads, spec.mlp_ratio
    n, k, m, el = spec.latent_tokens, spec.iterations, spec.image_tokens, spec.text_len
    per_round = (
        flops_latent_resample(n, m, d, h)
        + flops_latent_resample(n, el, d, h)
        + flops_gated_fuse(n, d, h, r)
    )
    return (
        flops_project_image(m, spec.channels, d)
        + k * per_round
        + spec.total_layers * flops_transformer_layer(n, d, h, r)
    )


def flops_spatial(spec: ArchSpec) -> int:
    d, h, r = spec.width, spec.heads, spec.mlp_ratio
    n, k, m, el = spec.latent_tokens, spec.iterations, spec.image_tokens, spec.text_len
    per_round = flops_spatial_resample(m, n, d) + flops_gated_fuse(n, d, h, r)
    return (
        flops_project_image(m, spec.channels, d)
        + flops_latent_resample(n, el, d, h)
        + k * per_round
        + spec.total_layers * flops_transformer_layer(n, d, h, r)
    )


_FLOPS = {
    "jar": flops_jar,
    "concat": flops_concat,
    "crossattn": flops_crossattn,
    "perceiver": flops_perceiver,
    "spatial": flops_spatial,
}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def params_attention(width: int) -> int:
    return 4 * width * width


def params_mlp(width: int, ratio: int) -> int:
    return 2 * ratio * width * width + ratio * width + width


def params_layer_norm(width: int) -> int:
    return 2 * width


def params_transformer_layer(width: int, ratio: int) -> int:
    return params_attention(width) + params_mlp(width, ratio) + 2 * params_layer_norm(width)


def params_fuse_block(width: int, ratio: int, iterations: int) -> int:
    # alpha, beta, per-round lambdas, cross attention, MLP, two norms
    return (
        2
        + (iterations - 1)
        + params_attention(width)
        + params_mlp(width, ratio)
        + 2 * params_layer_norm(width)
    )


def params_projection(channels: int, width: int, image_tokens: int, positions: bool = True) -> int:
    return channels * width + (image_tokens * width if positions else 0)


def params_total(spec: ArchSpec) -> int:
    d, r = spec.width, spec.mlp_ratio
    n = spec.latent_tokens
    base = params_projection(spec.channels, d, spec.image_tokens)
    stack = spec.total_layers * params_transformer_layer(d, r)
    if spec.fusion_kind in ("jar", "perceiver"):
        return (
            base
            + 2 * n * d
            + 2 * params_attention(d)
            + params_fuse_block(d, r, spec.iterations)
            + stack
        )
    if spec.fusion_kind == "spatial":
        mapper = params_layer_norm(d) + d * d + d + d * n + n
        return (
            base
            + n * d
            + params_attention(d)
            + mapper
            + params_fuse_block(d, r, spec.iterations)
            + stack
        )
    if spec.fusion_kind == "concat":
        return base + stack
    if spec.fusion_kind == "crossattn":
        return base + params_layer_norm(d) + stack
    raise ConfigError(f"unknown fusion kind {spec.fusion_kind!r}")


# ---------------------------------------------------------------------------
# Activation estimate
# ---------------------------------------------------------------------------


def act_attention(q: int, m: int, width: int, heads: int) -> int:
    # projections + per-head logits/scaled/softmax + output
    return (2 * q + 2 * m) * width + 3 * q * m * heads


def act_mlp(q: int, width: int, ratio: int) -> int:
    return 2 * q * ratio * width + q * width


def act_transformer_layer(q: int, width: int, heads: int, ratio: int) -> int:
    return 4 * q * width + act_attention(q, q, width, heads) + act_mlp(q, width, ratio)


def act_gated_fuse(n: int, width: int, heads: int, ratio: int) -> int:
    return 4 * n * width + act_attention(n, n, width, heads) + act_mlp(n, width, ratio)


def act_spatial_resample(m: int, n: int, width: int) -> int:
    return 2 * m * width + 2 * m * n + n * width


def activations_total(spec: ArchSpec) -> int:
    d, h, r = spec.width, spec.heads, spec.mlp_ratio
    n, k, m, el = spec.latent_tokens, spec.iterations, spec.image_tokens, spec.text_len
    proj = m * d
    kind = spec.fusion_kind
    if kind == "jar":
        return (
            proj
            + act_attention(n, m, d, h)
            + act_attention(n, el, d, h)
            + k * act_gated_fuse(n, d, h, r)
            + spec.total_layers * act_transformer_layer(n, d, h, r)
        )
    if kind == "perceiver":
        return (
            proj
            + k * (act_attention(n, m, d, h) + act_attention(n, el, d, h) + act_gated_fuse(n, d, h, r))
            + spec.total_layers * act_transformer_layer(n, d, h, r)
        )
    if kind == "spatial":
        return (
            proj
            + act_attention(n, el, d, h)
            + k * (act_spatial_resample(m, n, d) + act_gated_fuse(n, d, h, r))
            + spec.total_layers * act_transformer_layer(n, d, h, r)
        )
    if kind == "concat":
        s = el + m
        return proj + s * d + spec.total_layers * act_transformer_layer(s, d, h, r)
    if kind == "crossattn":
        per_layer = 2 * el * d + act_attention(el, m, d, h) + act_mlp(el, d, r)
        return proj + m * d + spec.total_layers * per_layer
    raise ConfigError(f"unknown fusion kind {kind!r}")


# ---------------------------------------------------------------------------
# Reports and sweeps
# ---------------------------------------------------------------------------


def flops_total(spec: ArchSpec) -> CostReport:
    """Exact FLOPs plus parameter and activation counts for one architecture."""
    spec.validate()
    return CostReport(
        flops=_FLOPS[spec.fusion_kind](spec),
        params=params_total(spec),
        peak_activation_values=activations_total(spec),
    )


def _apply_axis(base: ArchSpec, axis: str, value: int) -> ArchSpec:
    if axis == "image_size":
        # Value is the visual token count M.
        return replace(base, grid_h=value, grid_w=1)
    if axis == "width":
        return replace(base, width=value, channels=value)
    if axis == "depth":
        return replace(base, total_layers=value)
    if axis == "iterations":
        return replace(base, iterations=value)
    if axis == "tokens":
        return replace(base, latent_tokens=value)
    raise ConfigError(f"unknown sweep axis {axis!r}; valid: {SWEEP_AXES}")


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: int
    kind: str
    flops: int
    params: int
    peak_values: int


def sweep(
    axis: str,
    grid: list[int],
    base: ArchSpec,
    kinds: tuple[str, ...] = FUSION_KINDS,
) -> list[SweepRow]:
    """One CostReport per (grid value, kind); value-major, declaration-order kinds."""
    if not grid:
        raise ConfigError("sweep grid must not be empty")
    for kind in kinds:
        if kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {kind!r}; valid: {FUSION_KINDS}")
    rows = []
    for value in grid:
        for kind in kinds:
            spec = replace(_apply_axis(base, axis, value), fusion_kind=kind)
            report = flops_total(spec)
            rows.append(
                SweepRow(axis, value, kind, report.flops, report.params,
                         report.peak_activation_values)
            )
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    out = io.StringIO()
    out.write("axis,value,kind,flops,params,peak_values\n")
    for r in rows:
        out.write(f"{r.axis},{r.value},{r.kind},{r.flops},{r.params},{r.peak_values}\n")
    return out.getvalue()
