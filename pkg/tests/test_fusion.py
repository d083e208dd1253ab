import numpy as np
import pytest

from jarfuse import checkpoint
from jarfuse.blocks import zero_layer_params
from jarfuse.costmodel import (
    ArchSpec,
    flops_latent_resample,
    flops_project_image,
    flops_total,
)
from jarfuse.fusion import (
    ConfigError,
    FusionConfig,
    FusionModel,
    ModalityFeatures,
    baseline_forward,
    gated_cross_fuse,
    iterative_refine,
    jar_forward,
    latent_resample,
    project_image,
    randomize_gates,
    ProjectionParams,
)
from jarfuse.tensor import (
    ContractError,
    DimensionError,
    ParamStore,
    Tensor,
    seeded_rng,
    sum_all,
)

SMALL = FusionConfig(
    width=16, heads=2, latent_tokens=4, iterations=2, total_layers=4, mlp_ratio=2
)


def small_model(kind="jar", config=SMALL, channels=6, image_tokens=12, seed=0):
    return FusionModel(kind, config, channels, image_tokens, seeded_rng(seed))


def small_features(model, text_len=5, grid=(3, 4), seed=1):
    rng = seeded_rng(seed)
    return ModalityFeatures(
        text=Tensor(rng.normal(0, 1, (text_len, model.config.width))),
        image=Tensor(rng.normal(0, 1, (grid[0], grid[1], model.channels))),
    )


class TestConfig:
    def test_defaults_match_main_operating_point(self):
        cfg = FusionConfig()
        assert (cfg.latent_tokens, cfg.iterations, cfg.total_layers) == (64, 4, 32)
        assert cfg.combination_mode == "weighted"
        assert cfg.resample_mode == "latent"
        cfg.validate()

    def test_layers_must_divide_iterations(self):
        with pytest.raises(ConfigError):
            FusionConfig(total_layers=5, iterations=2).validate()

    def test_unknown_modes_rejected(self):
        with pytest.raises(ConfigError):
            FusionConfig(combination_mode="sum").validate()
        with pytest.raises(ConfigError):
            FusionConfig(resample_mode="pool").validate()

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            FusionModel("mix", SMALL, 6, 12, seeded_rng(0))


class TestProjectImage:
    def test_identity_projection(self):
        store = ParamStore()
        params = ProjectionParams(weight=store.add("w", np.eye(4)), positions=None)
        rng = seeded_rng(2)
        image = rng.normal(0, 1, (2, 3, 4))
        out = project_image(Tensor(image), params)
        assert np.array_equal(out.data, image.reshape(6, 4))

    def test_matches_loop_oracle(self):
        rng = seeded_rng(3)
        w = rng.normal(0, 1, (3, 4))
        image = rng.normal(0, 1, (2, 2, 3))
        store = ParamStore()
        params = ProjectionParams(weight=store.add("w", w), positions=None)
        out = project_image(Tensor(image), params)
        flat = image.reshape(4, 3)
        expected = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                for k in range(3):
                    expected[i, j] += flat[i, k] * w[k, j]
        assert np.max(np.abs(out.data - expected)) < 1e-12

    def test_grid_14x14_gives_196_tokens(self):
        model = small_model(image_tokens=196)
        feats = small_features(model, grid=(14, 14))
        tokens = project_image(feats.image, model.projection)
        assert tokens.shape == (196, model.config.width)

    def test_channel_mismatch(self):
        model = small_model()
        with pytest.raises(DimensionError):
            project_image(Tensor(np.ones((2, 2, 9))), model.projection)


class TestLatentResample:
    def test_single_input_token_dominates(self):
        # One key/value token: output rows are identical and do not depend on
        # the latent values.
        model = small_model()
        rng = seeded_rng(4)
        inputs = Tensor(rng.normal(0, 1, (1, 16)))
        out_a = latent_resample(inputs, model.latents.image_latents, model.latents.image_attn)
        other = Tensor(rng.normal(0, 5, (4, 16)))
        out_b = latent_resample(inputs, other, model.latents.image_attn)
        assert np.allclose(out_a.data, np.tile(out_a.data[0], (4, 1)), atol=1e-12)
        assert np.allclose(out_a.data, out_b.data, atol=1e-12)

    @pytest.mark.parametrize("m", [16, 196, 1024])
    def test_output_shape_fixed(self, m):
        model = small_model()
        rng = seeded_rng(5)
        out = latent_resample(
            Tensor(rng.normal(0, 1, (m, 16))),
            model.latents.image_latents,
            model.latents.image_attn,
        )
        assert out.shape == (4, 16)

    def test_permutation_invariance_without_positions(self):
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=2, total_layers=4,
            mlp_ratio=2, use_positions=False,
        )
        model = small_model(config=cfg)
        rng = seeded_rng(6)
        image = rng.normal(0, 1, (3, 4, 6))
        feats = ModalityFeatures(
            text=Tensor(rng.normal(0, 1, (5, 16))), image=Tensor(image)
        )
        out = model.forward(feats).features.data
        flat = image.reshape(12, 6)[rng.permutation(12)]
        feats_p = ModalityFeatures(
            text=feats.text, image=Tensor(flat.reshape(3, 4, 6))
        )
        out_p = model.forward(feats_p).features.data
        assert np.max(np.abs(out - out_p)) <= 1e-12


class TestGatedCrossFuse:
    def test_zero_gates_equal_layer_norm(self):
        from jarfuse.tensor import layer_norm

        model = small_model()
        rng = seeded_rng(7)
        t = Tensor(rng.normal(0, 1, (4, 16)))
        f = Tensor(rng.normal(0, 1, (4, 16)))
        out = gated_cross_fuse(t, f, model.fuse)
        expected = layer_norm(t, model.fuse.ln_query.gain, model.fuse.ln_query.bias)
        assert np.array_equal(out.data, expected.data)

    def test_zero_inputs_zero_output(self):
        model = small_model()
        out = gated_cross_fuse(
            Tensor(np.zeros((4, 16))), Tensor(np.zeros((4, 16))), model.fuse
        )
        assert np.array_equal(out.data, np.zeros((4, 16)))

    def test_matches_straight_line_oracle(self):
        model = small_model(config=FusionConfig(
            width=4, heads=1, latent_tokens=2, iterations=2, total_layers=2,
            mlp_ratio=2,
        ), channels=3, image_tokens=4)
        fuse = model.fuse
        fuse.alpha.data[...] = 0.5
        fuse.beta.data[...] = 0.5
        rng = seeded_rng(8)
        t = rng.normal(0, 1, (2, 4))
        f = rng.normal(0, 1, (2, 4))
        out = gated_cross_fuse(Tensor(t), Tensor(f), fuse)

        def ln(x, gain, bias):
            mu = x.mean(axis=1, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
            return (x - mu) / np.sqrt(var + 1e-5) * gain + bias

        def attn(q, kv, p):
            qq = q @ p.wq.data
            kk = kv @ p.wk.data
            vv = kv @ p.wv.data
            logits = qq @ kk.T / np.sqrt(q.shape[1])
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            return (e / e.sum(axis=1, keepdims=True)) @ vv @ p.wo.data

        def mlp(x, p):
            h = x @ p.w1.data + p.b1.data
            h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
            return h @ p.w2.data + p.b2.data

        tn = ln(t, fuse.ln_query.gain.data, fuse.ln_query.bias.data)
        fn = ln(f, fuse.ln_context.gain.data, fuse.ln_context.bias.data)
        p_cr = tn + np.tanh(0.5) * attn(tn, fn, fuse.xattn)
        expected = p_cr + np.tanh(0.5) * mlp(p_cr, fuse.mlp)
        assert np.max(np.abs(out.data - expected)) < 1e-10


class TestIterativeRefine:
    def test_single_round_is_fuse_plus_stack(self):
        from jarfuse.blocks import transformer_layer

        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=1, total_layers=2, mlp_ratio=2
        )
        model = small_model(config=cfg, seed=9)
        randomize_gates(model, seeded_rng(10))
        rng = seeded_rng(11)
        t = Tensor(rng.normal(0, 1, (4, 16)))
        f = Tensor(rng.normal(0, 1, (4, 16)))
        out = iterative_refine(t, f, cfg, model.fuse)
        manual = gated_cross_fuse(t, f, model.fuse)
        for layer in model.fuse.layers:
            manual = transformer_layer(manual, layer)
        assert np.array_equal(out.features.data, manual.data)

    def test_weighted_zero_lambda_queries_with_text(self):
        # tanh(0) * F_i vanishes, so round 2's query input is exactly t_n.
        from jarfuse.blocks import transformer_layer

        model = small_model(seed=12)
        model.fuse.alpha.data[...] = 0.3
        model.fuse.beta.data[...] = 0.2
        rng = seeded_rng(13)
        t = Tensor(rng.normal(0, 1, (4, 16)))
        f = Tensor(rng.normal(0, 1, (4, 16)))
        out = iterative_refine(t, f, SMALL, model.fuse)
        manual = None
        for i in range(2):
            manual_in = t  # lambda == 0 makes every round query t
            manual = gated_cross_fuse(manual_in, f, model.fuse)
            for layer in model.fuse.layers[i * 2 : (i + 1) * 2]:
                manual = transformer_layer(manual, layer)
        assert np.array_equal(out.features.data, manual.data)

    @pytest.mark.parametrize("mode", ["none", "residual", "weighted"])
    def test_two_rounds_match_unrolled_oracle(self, mode):
        from jarfuse.blocks import transformer_layer
        from jarfuse.tensor import add, scale, tanh

        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=2, total_layers=4,
            mlp_ratio=2, combination_mode=mode,
        )
        model = small_model(config=cfg, seed=14)
        randomize_gates(model, seeded_rng(15))
        rng = seeded_rng(16)
        t = Tensor(rng.normal(0, 1, (4, 16)))
        f = Tensor(rng.normal(0, 1, (4, 16)))
        out = iterative_refine(t, f, cfg, model.fuse)

        current = gated_cross_fuse(t, f, model.fuse)
        for layer in model.fuse.layers[:2]:
            current = transformer_layer(current, layer)
        if mode == "none":
            query = current
        elif mode == "residual":
            query = add(current, t)
        else:
            query = add(scale(current, tanh(model.fuse.lambdas[0])), t)
        current = gated_cross_fuse(query, f, model.fuse)
        for layer in model.fuse.layers[2:]:
            current = transformer_layer(current, layer)
        assert np.max(np.abs(out.features.data - current.data)) <= 1e-12

    def test_indivisible_budget_rejected(self):
        model = small_model()
        bad = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=3, total_layers=4, mlp_ratio=2
        )
        rng = seeded_rng(17)
        with pytest.raises(ConfigError):
            iterative_refine(
                Tensor(rng.normal(0, 1, (4, 16))),
                Tensor(rng.normal(0, 1, (4, 16))),
                bad,
                model.fuse,
            )


class TestJarForward:
    def test_shape_and_finiteness(self):
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=2, total_layers=4, mlp_ratio=2
        )
        model = FusionModel("jar", cfg, channels=16, image_tokens=16, rng=seeded_rng(18))
        rng = seeded_rng(19)
        feats = ModalityFeatures(
            text=Tensor(rng.normal(0, 1, (8, 16))),
            image=Tensor(rng.normal(0, 1, (4, 4, 16))),
        )
        out = jar_forward(feats, model)
        assert out.features.shape == (4, 16)
        assert np.isfinite(out.features.data).all()

    def test_flop_growth_in_m_is_resample_and_projection_only(self):
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=2, total_layers=4,
            mlp_ratio=2, use_positions=False,
        )
        rng = seeded_rng(20)
        model = FusionModel("jar", cfg, channels=6, image_tokens=196, rng=rng)
        flops = {}
        for m, grid in ((196, (14, 14)), (784, (28, 28))):
            feats = small_features(model, grid=grid, seed=21)
            flops[m] = model.forward(feats).flops.total_flops
        expected_delta = (
            flops_project_image(784, 6, 16)
            - flops_project_image(196, 6, 16)
            + flops_latent_resample(4, 784, 16, 2)
            - flops_latent_resample(4, 196, 16, 2)
        )
        assert flops[784] - flops[196] == expected_delta

    def test_recorded_flops_match_cost_model_exactly(self):
        spec = ArchSpec(
            width=16, heads=2, total_layers=4, text_len=5, grid_h=3, grid_w=4,
            channels=6, latent_tokens=4, iterations=2, fusion_kind="jar", mlp_ratio=2,
        )
        model = FusionModel("jar", spec.to_fusion_config(), 6, 12, seeded_rng(22))
        feats = small_features(model)
        out = model.forward(feats)
        assert out.flops.total_flops == flops_total(spec).flops

    def test_gating_identity_with_zeroed_stack(self):
        from jarfuse.tensor import layer_norm

        model = small_model(seed=23)
        for layer in model.fuse.layers:
            zero_layer_params(layer)
        feats = small_features(model, seed=24)
        out = model.forward(feats).features
        t_n = latent_resample(
            feats.text, model.latents.text_latents, model.latents.text_attn
        )
        expected = layer_norm(t_n, model.fuse.ln_query.gain, model.fuse.ln_query.bias)
        assert np.max(np.abs(out.data - expected.data)) <= 1e-12

    def test_gradients_reach_every_parameter(self):
        model = small_model(seed=25)
        randomize_gates(model, seeded_rng(26))
        feats = small_features(model, seed=27)
        out = model.forward(feats).features
        loss = sum_all(out * out)
        model.store.zero_grad()
        loss.backward()
        for name, t in model.store.items():
            assert t.grad is not None, f"{name} missing grad"
            assert np.any(t.grad != 0.0), f"{name} has all-zero grad"


class TestBaselines:
    def test_concat_keeps_full_sequence(self):
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=1, total_layers=2, mlp_ratio=2
        )
        model = FusionModel("concat", cfg, channels=6, image_tokens=196, rng=seeded_rng(28))
        feats = small_features(model, text_len=10, grid=(14, 14), seed=29)
        out = baseline_forward("concat", feats, model)
        assert out.features.shape == (206, 16)

    @pytest.mark.parametrize("grid", [(2, 3), (14, 14)])
    def test_crossattn_output_rows_follow_text(self, grid):
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=1, total_layers=2, mlp_ratio=2
        )
        model = FusionModel(
            "crossattn", cfg, channels=6, image_tokens=grid[0] * grid[1], rng=seeded_rng(30)
        )
        feats = small_features(model, text_len=7, grid=grid, seed=31)
        out = baseline_forward("crossattn", feats, model)
        assert out.features.shape == (7, 16)

    def test_perceiver_single_round_matches_jar_flops(self):
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=1, total_layers=2, mlp_ratio=2
        )
        flops = {}
        for kind in ("jar", "perceiver"):
            model = FusionModel(kind, cfg, channels=6, image_tokens=12, rng=seeded_rng(32))
            feats = small_features(model, seed=33)
            flops[kind] = model.forward(feats).flops.total_flops
        assert flops["jar"] == flops["perceiver"]

    def test_spatial_output_shape(self):
        model = small_model(kind="spatial", seed=34)
        feats = small_features(model, seed=35)
        out = model.forward(feats)
        assert out.features.shape == (4, 16)
        assert np.isfinite(out.features.data).all()

    def test_unknown_kind_rejected(self):
        model = small_model()
        feats = small_features(model)
        with pytest.raises(ConfigError):
            baseline_forward("mix", feats, model)

    @pytest.mark.parametrize("mode", ["none", "residual", "weighted"])
    def test_combination_mode_does_not_change_flops(self, mode):
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=2, total_layers=4,
            mlp_ratio=2, combination_mode=mode,
        )
        model = FusionModel("jar", cfg, channels=6, image_tokens=12, rng=seeded_rng(36))
        feats = small_features(model, seed=37)
        baseline = FusionModel("jar", SMALL, 6, 12, seeded_rng(36))
        assert (
            model.forward(feats).flops.total_flops
            == baseline.forward(feats).flops.total_flops
        )


class TestShapeDecoupling:
    @pytest.mark.parametrize("text_len", [1, 16])
    @pytest.mark.parametrize("m", [16, 196])
    def test_output_always_n_by_d(self, text_len, m):
        grid = (4, 4) if m == 16 else (14, 14)
        cfg = FusionConfig(
            width=16, heads=2, latent_tokens=4, iterations=2, total_layers=4, mlp_ratio=2
        )
        model = FusionModel("jar", cfg, channels=6, image_tokens=m, rng=seeded_rng(38))
        feats = small_features(model, text_len=text_len, grid=grid, seed=39)
        out = model.forward(feats)
        assert out.features.shape == (4, 16)


class TestModalityFeatures:
    def test_nonfinite_rejected(self):
        with pytest.raises(ContractError):
            ModalityFeatures(
                text=Tensor(np.array([[np.inf, 1.0]])), image=Tensor(np.ones((1, 1, 2)))
            )

    def test_wrong_rank_rejected(self):
        with pytest.raises(DimensionError):
            ModalityFeatures(text=Tensor(np.ones(3)), image=Tensor(np.ones((1, 1, 2))))
        with pytest.raises(DimensionError):
            ModalityFeatures(text=Tensor(np.ones((2, 3))), image=Tensor(np.ones((2, 2))))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(seed=40)
        randomize_gates(model, seeded_rng(41))
        path = tmp_path / "model.bin"
        checkpoint.save_params(path, model.store)
        clone = small_model(seed=42)
        checkpoint.load_params(path, clone.store)
        for name, t in model.store.items():
            assert np.array_equal(t.data, clone.store[name].data), name

    def test_header_is_readable_text(self, tmp_path):
        model = small_model(seed=43)
        path = tmp_path / "model.bin"
        checkpoint.save_params(path, model.store)
        head = path.read_bytes().split(b"\nDATA\n")[0].decode()
        assert head.startswith("tensors-v1")
        assert "img_proj.w" in head

    def test_name_mismatch_rejected(self, tmp_path):
        path = tmp_path / "odd.bin"
        checkpoint.save_tensors(path, {"only": np.ones(3)})
        model = small_model(seed=44)
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_params(path, model.store)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "trunc.bin"
        checkpoint.save_tensors(path, {"w": np.ones(8)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_tensors(path)
