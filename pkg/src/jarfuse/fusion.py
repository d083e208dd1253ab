"""Image-language fusion: latent resampling plus iterated gated cross-attention.

The main path ("jar") projects the image feature grid to the shared width,
compresses each modality to N learned latent tokens once, then runs K rounds
of tanh-gated cross-attention fusion, each followed by a slice of the
transformer-layer budget.  Four reference strategies are provided for
comparison:

* ``concat``    - self-attention over the (L+M)-token concatenation
* ``crossattn`` - text tokens querying image tokens at every layer
* ``perceiver`` - the latent resampling redone at every fusion round
* ``spatial``   - per-round token reduction via learned spatial weight maps

All forwards return a :class:`FusionOutput` carrying the fused features and
an exact FLOP count for the pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    AttentionParams,
    fan_in_std,
    LayerNormParams,
    MlpParams,
    TransformerLayerParams,
    init_attention,
    init_layer_norm,
    init_mlp,
    init_transformer_layer,
    mlp_forward,
    multi_head_attention,
    transformer_layer,
)
from .tensor import (
    ContractError,
    DimensionError,
    OpCounter,
    ParamStore,
    Tensor,
    add,
    add_row_vector,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_rows,
    tanh,
    transpose,
)

FUSION_KINDS = ("jar", "concat", "crossattn", "perceiver", "spatial")
COMBINATION_MODES = ("none", "residual", "weighted")
RESAMPLE_MODES = ("latent", "spatial")

LATENT_INIT_STD = 0.02


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


@dataclass
class FusionConfig:
    """Knobs of the fusion stack.

    ``total_layers`` is a whole-stack budget split evenly across the
    ``iterations`` fusion rounds, so FLOPs stay constant when only the
    combination mode changes.
    """

    width: int = 768
    heads: int = 12
    latent_tokens: int = 64
    iterations: int = 4
    total_layers: int = 32
    mlp_ratio: int = 4
    combination_mode: str = "weighted"
    resample_mode: str = "latent"
    use_positions: bool = True

    def validate(self) -> None:
        for name in ("width", "heads", "latent_tokens", "iterations",
                     "total_layers", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.width % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide width ({self.width})"
            )
        if self.total_layers % self.iterations != 0:
            raise ConfigError(
                f"total_layers ({self.total_layers}) must be divisible by "
                f"iterations ({self.iterations})"
            )
        if self.combination_mode not in COMBINATION_MODES:
            raise ConfigError(
                f"combination_mode must be one of {COMBINATION_MODES}, "
                f"got {self.combination_mode!r}"
            )
        if self.resample_mode not in RESAMPLE_MODES:
            raise ConfigError(
                f"resample_mode must be one of {RESAMPLE_MODES}, "
                f"got {self.resample_mode!r}"
            )

    @property
    def layers_per_iteration(self) -> int:
        return self.total_layers // self.iterations


@dataclass
class ModalityFeatures:
    """Raw fusion inputs: text tokens [L, D] and an image feature grid [H, W, C]."""

    text: Tensor
    image: Tensor

    def __post_init__(self):
        if self.text.data.ndim != 2 or self.text.shape[0] < 1:
            raise DimensionError(f"text must be [L, D] with L >= 1, got {self.text.shape}")
        if self.image.data.ndim != 3 or min(self.image.shape) < 1:
            raise DimensionError(
                f"image must be [H, W, C] with positive extents, got {self.image.shape}"
            )
        if not np.isfinite(self.text.data).all() or not np.isfinite(self.image.data).all():
            raise ContractError("modality features must be finite")

    @property
    def text_len(self) -> int:
        return self.text.shape[0]

    @property
    def image_tokens(self) -> int:
        h, w, _ = self.image.shape
        return h * w


@dataclass
class ProjectionParams:
    """Image-to-width projection plus optional additive position table."""

    weight: Tensor
    positions: Tensor | None = None


@dataclass
class LatentBank:
    """Per-modality learned query tokens and their resampling attention."""

    image_latents: Tensor
    text_latents: Tensor
    image_attn: AttentionParams
    text_attn: AttentionParams


@dataclass
class SpatialMapper:
    """Computes N spatial weight maps over the image tokens (map MLP + softmax)."""

    ln: LayerNormParams
    w_hidden: Tensor
    b_hidden: Tensor
    w_maps: Tensor
    b_maps: Tensor


@dataclass
class FusionParams:
    """Gates, fuse-block weights and the transformer-layer stack.

    ``alpha`` gates the cross-attention branch, ``beta`` the MLP branch,
    and ``lambdas[i]`` gates round i+2's query combination in weighted mode.
    All gates start at zero so the block begins as an identity-like map.
    """

    alpha: Tensor
    beta: Tensor
    lambdas: list[Tensor]
    xattn: AttentionParams
    mlp: MlpParams
    ln_query: LayerNormParams
    ln_context: LayerNormParams
    layers: list[TransformerLayerParams] = field(default_factory=list)


@dataclass
class FusionOutput:
    features: Tensor
    flops: OpCounter


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def project_image(image: Tensor, params: ProjectionParams) -> Tensor:
    """Flatten the [H, W, C] grid to [M, C] and project to [M, D]."""
    h, w, c = image.shape
    if params.weight.shape[0] != c:
        raise DimensionError(
            f"projection expects {params.weight.shape[0]} channels, image has {c}"
        )
    tokens = matmul(reshape(image, (h * w, c)), params.weight)
    if params.positions is not None:
        if params.positions.shape != tokens.shape:
            raise DimensionError(
                f"position table {params.positions.shape} does not cover "
                f"{tokens.shape} image tokens"
            )
        tokens = add(tokens, params.positions)
    return tokens


def latent_resample(inputs: Tensor, latents: Tensor, attn: AttentionParams) -> Tensor:
    """Compress M input tokens to the N learned latents via cross-attention."""
    if inputs.shape[1] != latents.shape[1]:
        raise DimensionError(
            f"resample width mismatch: inputs {inputs.shape}, latents {latents.shape}"
        )
    return multi_head_attention(latents, inputs, attn)


def spatial_resample(tokens: Tensor, mapper: SpatialMapper) -> Tensor:
    """Token reduction through N learned spatial attention maps."""
    h = layer_norm(tokens, mapper.ln.gain, mapper.ln.bias)
    h = gelu(add_row_vector(matmul(h, mapper.w_hidden), mapper.b_hidden))
    scores = add_row_vector(matmul(h, mapper.w_maps), mapper.b_maps)
    maps = softmax_rows(transpose(scores))
    return matmul(maps, tokens)


def gated_cross_fuse(t: Tensor, f: Tensor, params: FusionParams) -> Tensor:
    """Two-line gated fusion of query tokens t with context tokens f.

    p = Ln(t) + tanh(alpha) * Attn(Ln(t), Ln(f))
    out = p + tanh(beta) * MLP(p)

    With alpha = beta = 0 the output is exactly Ln(t).
    """
    if t.shape != f.shape:
        raise DimensionError(f"fuse shape mismatch: {t.shape} vs {f.shape}")
    tn = layer_norm(t, params.ln_query.gain, params.ln_query.bias)
    fn = layer_norm(f, params.ln_context.gain, params.ln_context.bias)
    attended = multi_head_attention(tn, fn, params.xattn)
    p = add(tn, scale(attended, tanh(params.alpha)))
    return add(p, scale(mlp_forward(p, params.mlp), tanh(params.beta)))


def _combine_query(
    fused: Tensor, t_n: Tensor, mode: str, gate: Tensor | None
) -> Tensor:
    if mode == "none":
        return fused
    if mode == "residual":
        return add(fused, t_n)
    if mode == "weighted":
        return add(scale(fused, tanh(gate)), t_n)
    raise ConfigError(f"unknown combination mode {mode!r}")


def iterative_refine(
    t_n: Tensor, f_n: Tensor, config: FusionConfig, params: FusionParams
) -> FusionOutput:
    """Run K fusion rounds; round 1 queries with t_n, later rounds with the
    combination of the previous output and t_n."""
    config.validate()
    per_round = config.layers_per_iteration
    if len(params.layers) != config.total_layers:
        raise ConfigError(
            f"fusion stack holds {len(params.layers)} layers, "
            f"config expects {config.total_layers}"
        )
    counter = OpCounter()
    with counter:
        fused = t_n
        for i in range(config.iterations):
            if i == 0:
                query = t_n
            else:
                query = _combine_query(
                    fused, t_n, config.combination_mode, params.lambdas[i - 1]
                )
            fused = gated_cross_fuse(query, f_n, params)
            for layer in params.layers[i * per_round : (i + 1) * per_round]:
                fused = transformer_layer(fused, layer)
    return FusionOutput(features=fused, flops=counter)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class FusionModel:
    """Parameters for one fusion kind, built for fixed channel count and
    image token count (the position table is sized to the grid)."""

    def __init__(
        self,
        kind: str,
        config: FusionConfig,
        channels: int,
        image_tokens: int,
        rng: np.random.Generator,
        store: ParamStore | None = None,
        prefix: str = "",
    ):
        if kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {kind!r}; valid: {FUSION_KINDS}")
        config.validate()
        self.kind = kind
        self.config = config
        self.channels = channels
        self.image_tokens = image_tokens
        self.store = store if store is not None else ParamStore()
        p = prefix

        d, n = config.width, config.latent_tokens
        self.projection = ProjectionParams(
            weight=self.store.add(f"{p}img_proj.w", rng.normal(0, fan_in_std(channels), (channels, d))),
            positions=(
                self.store.add(f"{p}img_proj.pos", rng.normal(0, LATENT_INIT_STD, (image_tokens, d)))
                if config.use_positions
                else None
            ),
        )

        self.latents: LatentBank | None = None
        self.text_latents: Tensor | None = None
        self.text_attn: AttentionParams | None = None
        self.mapper: SpatialMapper | None = None
        self.fuse: FusionParams | None = None
        self.layers: list[TransformerLayerParams] = []
        self.img_ln: LayerNormParams | None = None

        if kind in ("jar", "perceiver"):
            self.latents = LatentBank(
                image_latents=self.store.add(f"{p}latents.img", rng.normal(0, LATENT_INIT_STD, (n, d))),
                text_latents=self.store.add(f"{p}latents.txt", rng.normal(0, LATENT_INIT_STD, (n, d))),
                image_attn=init_attention(self.store, f"{p}resample.img", d, config.heads, rng),
                text_attn=init_attention(self.store, f"{p}resample.txt", d, config.heads, rng),
            )
            self.fuse = self._init_fuse(p, rng)
        elif kind == "spatial":
            # Text keeps its latent resampling; the image side uses weight maps.
            self.text_latents = self.store.add(f"{p}latents.txt", rng.normal(0, LATENT_INIT_STD, (n, d)))
            self.text_attn = init_attention(self.store, f"{p}resample.txt", d, config.heads, rng)
            self.mapper = SpatialMapper(
                ln=init_layer_norm(self.store, f"{p}mapper.ln", d),
                w_hidden=self.store.add(f"{p}mapper.w_hidden", rng.normal(0, fan_in_std(d), (d, d))),
                b_hidden=self.store.add(f"{p}mapper.b_hidden", np.zeros(d)),
                w_maps=self.store.add(f"{p}mapper.w_maps", rng.normal(0, fan_in_std(d), (d, n))),
                b_maps=self.store.add(f"{p}mapper.b_maps", np.zeros(n)),
            )
            self.fuse = self._init_fuse(p, rng)
        elif kind == "concat":
            self.layers = [
                init_transformer_layer(self.store, f"{p}layers.{i}", d, config.heads, config.mlp_ratio, rng)
                for i in range(config.total_layers)
            ]
        elif kind == "crossattn":
            self.img_ln = init_layer_norm(self.store, f"{p}img_ln", d)
            self.layers = [
                init_transformer_layer(self.store, f"{p}layers.{i}", d, config.heads, config.mlp_ratio, rng)
                for i in range(config.total_layers)
            ]

    def _init_fuse(self, p: str, rng: np.random.Generator) -> FusionParams:
        cfg = self.config
        d = cfg.width
        return FusionParams(
            alpha=self.store.add(f"{p}fuse.alpha", np.zeros(1)),
            beta=self.store.add(f"{p}fuse.beta", np.zeros(1)),
            lambdas=[
                self.store.add(f"{p}fuse.lambda.{i}", np.zeros(1))
                for i in range(cfg.iterations - 1)
            ],
            xattn=init_attention(self.store, f"{p}fuse.xattn", d, cfg.heads, rng),
            mlp=init_mlp(self.store, f"{p}fuse.mlp", d, cfg.mlp_ratio, rng),
            ln_query=init_layer_norm(self.store, f"{p}fuse.ln_query", d),
            ln_context=init_layer_norm(self.store, f"{p}fuse.ln_context", d),
            layers=[
                init_transformer_layer(
                    self.store, f"{p}layers.{i}", d, cfg.heads, cfg.mlp_ratio, rng
                )
                for i in range(cfg.total_layers)
            ],
        )

    # -- forwards ----------------------------------------------------------

    def forward(self, features: ModalityFeatures) -> FusionOutput:
        self._check_features(features)
        counter = OpCounter()
        with counter:
            if self.kind == "jar":
                out = self._forward_jar(features)
            elif self.kind == "perceiver":
                out = self._forward_perceiver(features)
            elif self.kind == "spatial":
                out = self._forward_spatial(features)
            elif self.kind == "concat":
                out = self._forward_concat(features)
            else:
                out = self._forward_crossattn(features)
        return FusionOutput(features=out, flops=counter)

    def _check_features(self, features: ModalityFeatures) -> None:
        if features.text.shape[1] != self.config.width:
            raise DimensionError(
                f"text width {features.text.shape[1]} != model width {self.config.width}"
            )
        if features.image.shape[2] != self.channels:
            raise DimensionError(
                f"image channels {features.image.shape[2]} != model channels {self.channels}"
            )
        if features.image_tokens != self.image_tokens and self.config.use_positions:
            raise DimensionError(
                f"model was built for {self.image_tokens} image tokens, "
                f"got {features.image_tokens}"
            )

    def _forward_jar(self, features: ModalityFeatures) -> Tensor:
        tokens = project_image(features.image, self.projection)
        f_n = latent_resample(tokens, self.latents.image_latents, self.latents.image_attn)
        t_n = latent_resample(features.text, self.latents.text_latents, self.latents.text_attn)
        return iterative_refine(t_n, f_n, self.config, self.fuse).features

    def _forward_perceiver(self, features: ModalityFeatures) -> Tensor:
        # Same parts as the main path, but the resampling of both modalities
        # is redone inside every round (the expensive variant).
        cfg = self.config
        tokens = project_image(features.image, self.projection)
        per_round = cfg.layers_per_iteration
        fused = None
        for i in range(cfg.iterations):
            f_n = latent_resample(tokens, self.latents.image_latents, self.latents.image_attn)
            t_n = latent_resample(features.text, self.latents.text_latents, self.latents.text_attn)
            if i == 0:
                query = t_n
            else:
                query = _combine_query(fused, t_n, cfg.combination_mode, self.fuse.lambdas[i - 1])
            fused = gated_cross_fuse(query, f_n, self.fuse)
            for layer in self.fuse.layers[i * per_round : (i + 1) * per_round]:
                fused = transformer_layer(fused, layer)
        return fused

    def _forward_spatial(self, features: ModalityFeatures) -> Tensor:
        cfg = self.config
        tokens = project_image(features.image, self.projection)
        t_n = latent_resample(features.text, self.text_latents, self.text_attn)
        per_round = cfg.layers_per_iteration
        fused = None
        for i in range(cfg.iterations):
            f_n = spatial_resample(tokens, self.mapper)
            if i == 0:
                query = t_n
            else:
                query = _combine_query(fused, t_n, cfg.combination_mode, self.fuse.lambdas[i - 1])
            fused = gated_cross_fuse(query, f_n, self.fuse)
            for layer in self.fuse.layers[i * per_round : (i + 1) * per_round]:
                fused = transformer_layer(fused, layer)
        return fused

    def _forward_concat(self, features: ModalityFeatures) -> Tensor:
        tokens = project_image(features.image, self.projection)
        x = concat_rows([features.text, tokens])
        for layer in self.layers:
            x = transformer_layer(x, layer)
        return x

    def _forward_crossattn(self, features: ModalityFeatures) -> Tensor:
        tokens = project_image(features.image, self.projection)
        context = layer_norm(tokens, self.img_ln.gain, self.img_ln.bias)
        x = features.text
        for layer in self.layers:
            h = layer_norm(x, layer.ln1.gain, layer.ln1.bias)
            x = add(x, multi_head_attention(h, context, layer.attn))
            h = layer_norm(x, layer.ln2.gain, layer.ln2.bias)
            x = add(x, mlp_forward(h, layer.mlp))
        return x


def jar_forward(features: ModalityFeatures, model: FusionModel) -> FusionOutput:
    """End-to-end main-path forward: project, resample once, refine K rounds."""
    if model.kind != "jar":
        raise ConfigError(f"jar_forward needs a jar model, got {model.kind!r}")
    return model.forward(features)


def baseline_forward(
    kind: str, features: ModalityFeatures, model: FusionModel
) -> FusionOutput:
    if kind not in FUSION_KINDS or kind == "jar":
        raise ConfigError(
            f"unknown baseline kind {kind!r}; valid: {[k for k in FUSION_KINDS if k != 'jar']}"
        )
    if model.kind != kind:
        raise ConfigError(f"model was built as {model.kind!r}, not {kind!r}")
    return model.forward(features)


def randomize_gates(model: FusionModel, rng: np.random.Generator, span: float = 0.5) -> None:
    """Move gate scalars off their zero init so every branch carries gradient."""
    if model.fuse is None:
        return
    for gate in [model.fuse.alpha, model.fuse.beta, *model.fuse.lambdas]:
        gate.data[...] = rng.uniform(-span, span, gate.shape)


def randomize_parameters(model: FusionModel, rng: np.random.Generator) -> None:
    """Move every parameter to a generic point for gradient checking.

    At the zero-gated init several branches carry exactly zero gradient and
    deep-path gradients sit below finite-difference noise; a healthy random
    point makes the check meaningful for all parameters.
    """
    for name, t in model.store.items():
        if name.endswith(".gain"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith((".bias", ".b1", ".b2", ".b_hidden", ".b_maps")):
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape)
        elif "alpha" in name or "beta" in name or "lambda" in name:
            t.data[...] = rng.uniform(-0.5, 0.5, t.shape)
        else:
            t.data[...] = rng.normal(0.0, 0.4, t.shape)
