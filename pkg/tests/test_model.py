import numpy as np
import pytest

from sret.model import (
    GroupSchedule,
    ModelConfig,
    build_mixed_depth,
    build_model,
    preset,
)
from sret.tensor import ConfigError, ShapeError, Tape, Tensor, backward, grad_check_finite_diff
from sret.train import smoothed_ce_loss


@pytest.fixture(scope="module")
def desk_model():
    return build_model(preset("sret_desk"), np.random.default_rng(0))


@pytest.fixture(scope="module")
def desk_images():
    return Tensor(np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32))


class TestPresets:
    def test_sret_t_dims(self):
        cfg = preset("sret_t")
        assert cfg.stage_dims == [64, 128, 256]
        assert cfg.stage_blocks == [2, 5, 3]
        assert cfg.recursions_per_block == 2
        assert cfg.ffn_ratio == 3.6 and cfg.nll_ratio == 1.0

    def test_sret_t_group_schedule(self):
        assert preset("sret_t").group_schedule.stages == [[8, 2], [4, 1], [1, 1]]

    def test_sret_tl_only_widens_ffn(self):
        t, tl = preset("sret_t"), preset("sret_tl")
        assert tl.ffn_ratio == 4.0 and tl.stage_dims == t.stage_dims

    def test_sret_s(self):
        cfg = preset("sret_s")
        assert cfg.stage_dims == [126, 252, 504]
        assert cfg.ffn_ratio == 3.0 and cfg.nll_ratio == 2.0
        assert cfg.stem_channels == [63, 126, 126]

    def test_deit_t(self):
        cfg = preset("deit_t")
        assert cfg.stage_dims == [192] and cfg.stage_blocks == [12]
        assert cfg.heads_per_stage == [3] and cfg.ffn_ratio == 4.0
        assert cfg.patch_size == 16 and not cfg.use_lrc

    def test_mixer_dims(self):
        cfg = preset("mixer_b16_recursive")
        assert cfg.stage_dims == [768] and cfg.stage_blocks == [12]
        assert cfg.mixer_channel_hidden == 3072 and cfg.mixer_token_hidden == 384
        assert cfg.stage_tokens() == [196]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("sret_xxl")


class TestConfigValidation:
    def test_group_divisibility_at_224(self):
        cfg = preset("sret_t")
        assert cfg.stage_tokens() == [784, 196, 49]
        cfg.validate()  # all published group counts divide their token counts

    def test_bad_group_count_rejected(self):
        cfg = preset("sret_t")
        cfg.group_schedule = GroupSchedule([[8, 2], [4, 1], [7, 2]])
        with pytest.raises(ConfigError, match="divide"):
            cfg.validate()

    def test_resolution_must_be_divisible(self):
        cfg = preset("sret_desk")
        cfg.input_resolution = 30
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_heads_must_divide_dim(self):
        cfg = preset("sret_desk")
        cfg.heads_per_stage = [3, 4, 8]
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_stage_list_lengths_must_agree(self):
        cfg = preset("sret_desk")
        cfg.stage_blocks = [1, 1]
        with pytest.raises(ConfigError):
            cfg.validate()


class TestBuild:
    def test_registry_is_duplicate_free_and_complete(self, desk_model):
        sizes = {name: t.size for name, t in desk_model.registry.items()}
        assert sum(sizes.values()) == desk_model.param_count()
        assert all(t.requires_grad for t in desk_model.registry.values())

    def test_no_class_or_distillation_token(self, desk_model):
        assert not any("token" in name for name in desk_model.registry)
        # stage-1 positional embedding covers exactly the stem token grid
        assert desk_model.registry["pos_embed"].shape == (1, 16, 16)

    def test_shared_subset_constant_in_recursions(self):
        from dataclasses import replace

        base = preset("sret_desk")
        names = {}
        for recs in (1, 2, 3):
            sched = GroupSchedule([[1] * recs] * 3)
            cfg = replace(base, recursions_per_block=recs, group_schedule=sched)
            m = build_model(cfg, np.random.default_rng(0))
            names[recs] = {n: t.size for n, t in m.registry.items() if ".nll" not in n}
        assert names[1] == names[2] == names[3]

    def test_nll_entries_grow_with_recursions(self):
        from dataclasses import replace

        base = preset("sret_desk")
        counts = {}
        for recs in (1, 2):
            sched = GroupSchedule([[1] * recs] * 3)
            cfg = replace(base, recursions_per_block=recs, group_schedule=sched)
            m = build_model(cfg, np.random.default_rng(0))
            counts[recs] = sum(t.size for n, t in m.registry.items() if ".nll" in n)
        assert counts[2] == 2 * counts[1]

    def test_init_values(self, desk_model):
        lrc = desk_model.registry["stage1.block0.lrc.attn_branch"]
        assert lrc.data == 1.0
        gain = desk_model.registry["stage1.block0.norm1.gain"]
        assert (gain.data == 1.0).all()
        w = desk_model.registry["stage1.block0.attn.w_qkv"]
        assert np.abs(w.data).max() <= 0.04 + 1e-9  # truncated at two sigmas


class TestForward:
    def test_stem_token_counts_sret_t(self):
        m = build_model(preset("sret_t"), np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 224, 224)).astype(np.float32))
        tokens = m.stem_forward(x)
        assert tokens.shape == (1, 784, 64)

    def test_desk_stem_tokens(self, desk_model, desk_images):
        assert desk_model.stem_forward(desk_images).shape == (2, 16, 16)

    def test_logits_shape(self, desk_model, desk_images):
        assert desk_model.forward(desk_images, mode="eval").shape == (2, 10)

    def test_eval_is_deterministic(self, desk_model, desk_images):
        a = desk_model.forward(desk_images, mode="eval")
        b = desk_model.forward(desk_images, mode="eval")
        assert np.array_equal(a.data, b.data)

    def test_token_pyramid(self, desk_model, desk_images):
        tokens = desk_model.embed(desk_images, training=False)
        assert tokens.shape[1] == 16
        pooled = desk_model.conv_pool_forward(tokens, 0)
        assert pooled.shape == (2, 4, 32)
        pooled2 = desk_model.conv_pool_forward(pooled, 1)
        assert pooled2.shape == (2, 1, 64)

    def test_conv_pool_rejects_non_square(self, desk_model):
        with pytest.raises(ShapeError):
            desk_model.conv_pool_forward(Tensor(np.zeros((1, 3, 16))), 0)

    def test_wrong_resolution_rejected(self, desk_model):
        with pytest.raises(ShapeError):
            desk_model.forward(Tensor(np.zeros((1, 3, 64, 64))), mode="eval")

    def test_train_mode_needs_rng(self, desk_model, desk_images):
        with pytest.raises(ConfigError):
            desk_model.forward(desk_images, mode="train")

    def test_train_mode_runs_and_differs_by_permutation(self, desk_model, desk_images):
        a = desk_model.forward(desk_images, mode="train", rng=np.random.default_rng(1))
        b = desk_model.forward(desk_images, mode="train", rng=np.random.default_rng(1))
        c = desk_model.forward(desk_images, mode="train", rng=np.random.default_rng(2))
        assert np.array_equal(a.data, b.data)  # same seed, same permutations
        assert not np.array_equal(a.data, c.data)  # grouped stages reshuffle

    def test_bn_eval_uses_frozen_stats(self, desk_images):
        m = build_model(preset("sret_desk"), np.random.default_rng(0))
        before = m.forward(desk_images, mode="eval")
        m.forward(desk_images, mode="train", rng=np.random.default_rng(0))
        after = m.forward(desk_images, mode="eval")  # running stats moved
        assert not np.array_equal(before.data, after.data)

    def test_bn_identity_case(self):
        # unit gain, zero bias, fresh running stats (mean 0, var 1): eval-mode
        # BN is the identity up to the eps in the denominator
        model = build_model(preset("sret_desk"), np.random.default_rng(0))
        layer = model.stem[0]
        c = layer.bn_gain.size
        x = Tensor(np.random.default_rng(0).normal(size=(2, c, 4, 4)).astype(np.float32))
        out = model.batch_norm(x, layer, training=False)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-4)

    def test_working_precision_is_preserved_end_to_end(self):
        # a stray numpy float64 scalar anywhere in the graph would silently
        # promote the whole forward; both precisions must survive untouched
        for dtype in (np.float32, np.float64):
            m = build_model(preset("sret_desk"), np.random.default_rng(0), dtype=dtype)
            x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 32, 32)), dtype=dtype)
            assert m.forward(x, mode="eval").dtype == dtype
            with Tape() as tape:
                out = m.forward(x, mode="train", rng=np.random.default_rng(2))
                loss = smoothed_ce_loss(out, np.array([0, 1]), 0.1)
            grads = backward(loss, tape)
            assert loss.dtype == dtype
            assert {g.dtype for g in grads.values()} == {np.dtype(dtype)}
            assert {v.dtype for v in m.buffers.values()} == {np.dtype(dtype)}

    def test_full_resolution_logits_shape(self):
        m = build_model(preset("sret_t"), np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 224, 224)).astype(np.float32))
        logits = m.forward(x, mode="eval")
        assert logits.shape == (2, 1000)

    def test_deit_baseline_forward(self):
        from dataclasses import replace

        cfg = replace(
            preset("deit_t"), input_resolution=32, num_classes=7,
            stage_dims=[16], stage_blocks=[2], heads_per_stage=[2], patch_size=8,
        )
        m = build_model(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(3, 3, 32, 32)).astype(np.float32))
        assert m.forward(x, mode="eval").shape == (3, 7)

    def test_mixer_forward(self):
        from dataclasses import replace

        cfg = replace(
            preset("mixer_b16_recursive"), input_resolution=32, num_classes=5,
            stage_dims=[8], stage_blocks=[2], patch_size=8,
            mixer_token_hidden=6, mixer_channel_hidden=12,
        )
        m = build_model(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32))
        assert m.forward(x, mode="eval").shape == (2, 5)


class TestMixedDepth:
    def test_registry_grows_by_exactly_one_head(self, desk_model):
        md = build_mixed_depth(desk_model)
        extra = set(md.registry) - set(desk_model.registry)
        assert extra == {"unrolled_head.weight", "unrolled_head.bias"}
        d, c = desk_model.config.stage_dims[-1], desk_model.config.num_classes
        assert sum(md.registry[n].size for n in extra) == d * c + c

    def test_branches_bitwise_equal_at_identity_permutations(self, desk_model, desk_images):
        md = build_mixed_depth(desk_model)
        a, b = md.forward_branches(desk_images, mode="eval")
        assert np.array_equal(a.data, b.data)

    def test_requires_recursions(self):
        from dataclasses import replace

        cfg = replace(
            preset("sret_desk"), recursions_per_block=1,
            group_schedule=GroupSchedule([[1], [1], [1]]),
        )
        with pytest.raises(ConfigError):
            build_mixed_depth(build_model(cfg, np.random.default_rng(0)))

    def test_shared_weight_gradient_sums_over_branches(self):
        m = build_model(preset("sret_desk"), np.random.default_rng(3), dtype=np.float64)
        md = build_mixed_depth(m)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 3, 32, 32)), dtype=np.float64)
        labels = np.array([2])

        def f():
            rng = np.random.default_rng(7)
            a, b = md.forward_branches(x, mode="train", rng=rng)
            la = smoothed_ce_loss(a, labels, 0.0)
            lb = smoothed_ce_loss(b, labels, 0.0)
            from sret.tensor import add, mul

            return mul(add(la, lb), 0.5)

        probe = [md.registry["stage2.block0.attn.w_qkv"], md.registry["stage1.block0.ffn.w1"]]
        assert grad_check_finite_diff(f, probe, samples_per_param=4) < 1e-4
