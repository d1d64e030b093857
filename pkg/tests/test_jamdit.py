from __future__ import annotations

import numpy as np
import pytest
import torch

from videojam.jamdit import (
    JamDiT,
    ModelConfig,
    extend_joint,
    init_base,
    parameter_count,
    patchify,
    unpatchify,
)


def rand_video(seed, shape=(4, 8, 8, 3)):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g)


class TestPatchify:
    def test_bijection(self):
        x = rand_video(0, (8, 16, 16, 3))
        tokens = patchify(x, 1, 2)
        back = unpatchify(tokens, 1, 2, 8, 16, 16, 3)
        assert torch.equal(back, x)

    def test_token_count_default_patch(self):
        tokens = patchify(rand_video(1, (8, 16, 16, 3)), 1, 2)
        assert tokens.shape == (8 * 8 * 8, 1 * 2 * 2 * 3)

    def test_constant_video_identical_tokens(self):
        tokens = patchify(torch.full((4, 4, 4, 3), 0.7), 2, 2)
        assert (tokens == tokens[0]).all()

    def test_row_major_patch_order(self):
        # token 0 must be the (t=0, h=0, w=0) patch
        x = torch.zeros(2, 4, 4, 1)
        x[0, 0, 0, 0] = 5.0
        tokens = patchify(x, 1, 2)
        assert tokens[0, 0] == 5.0
        assert (tokens[1:] != 5.0).all()

    def test_divisibility_error(self):
        with pytest.raises(ValueError, match="divide"):
            patchify(rand_video(0, (3, 8, 8, 3)), 2, 2)
        with pytest.raises(ValueError, match="divide"):
            patchify(rand_video(0, (4, 9, 8, 3)), 1, 2)

    def test_batched(self):
        x = rand_video(2, (5, 4, 8, 8, 3))
        tokens = patchify(x, 1, 2)
        assert tokens.shape == (5, 4 * 4 * 4, 12)
        assert torch.equal(unpatchify(tokens, 1, 2, 4, 8, 8, 3), x)

    def test_unpatchify_shape_check(self):
        with pytest.raises(ValueError, match="match"):
            unpatchify(torch.zeros(10, 12), 1, 2, 4, 8, 8, 3)


class TestModelConfig:
    def test_defaults(self):
        config = ModelConfig()
        assert (config.embed_dim, config.n_blocks, config.n_heads) == (64, 4, 4)
        assert (config.patch_t, config.patch) == (1, 2)
        assert config.null_class_id == 12
        assert config.patch_dim == 12

    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="n_heads"):
            ModelConfig(embed_dim=65)

    def test_positive_fields(self):
        with pytest.raises(ValueError, match="positive"):
            ModelConfig(n_blocks=0)


class TestInitBase:
    def test_seed_determinism(self):
        a = init_base(seed=3).state_dict()
        b = init_base(seed=3).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seeds_differ(self):
        a = init_base(seed=0).state_dict()
        b = init_base(seed=1).state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_forward_finite_at_init(self, base_model):
        pred = base_model.forward_base(rand_video(5), 2, 0.5)
        assert torch.isfinite(pred.u_x).all()
        assert pred.u_d is None

    def test_parameter_count_closed_form(self, base_model, joint_model):
        d, pd, freq = 64, 12, 64
        time_mlp = (freq * d + d) + (d * d + d)
        block = (
            2 * d  # norm1
            + (d * 3 * d + 3 * d) + (d * d + d)  # self-attn qkv + proj
            + 2 * d  # norm2
            + (d * d + d) + (d * 2 * d + 2 * d) + (d * d + d)  # cross q, kv, proj
            + 2 * d  # norm3
            + (d * 4 * d + 4 * d) + (4 * d * d + d)  # mlp
        )
        expected = lambda width: (
            (width * d + d)  # w_in
            + 13 * d  # class embedding incl null row
            + time_mlp
            + 4 * block
            + 2 * d  # final norm
            + (d * width + width)  # w_out
        )
        assert parameter_count(base_model) == expected(pd)
        assert parameter_count(joint_model) == expected(2 * pd)


class TestForward:
    def test_purity(self, base_model):
        x = rand_video(6)
        a = base_model.forward_base(x, 1, 0.3)
        b = base_model.forward_base(x, 1, 0.3)
        assert torch.equal(a.u_x, b.u_x)

    def test_output_shape_matches_input(self, base_model):
        x = rand_video(7, (2, 4, 8, 8, 3))
        pred = base_model.forward_base(x, torch.tensor([0, 5]), torch.tensor([0.1, 0.9]))
        assert pred.u_x.shape == x.shape

    def test_null_condition_accepted(self, base_model):
        pred = base_model.forward_base(rand_video(8), None, 0.5)
        assert torch.isfinite(pred.u_x).all()

    def test_unknown_class_rejected(self, base_model):
        with pytest.raises(ValueError, match="class id"):
            base_model.forward_base(rand_video(9), 13, 0.5)
        with pytest.raises(ValueError, match="class id"):
            base_model.forward_base(rand_video(9), -1, 0.5)

    def test_t_out_of_range(self, base_model):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            base_model.forward_base(rand_video(10), 0, 1.5)

    def test_base_rejects_motion_input(self, base_model):
        with pytest.raises(ValueError, match="motion"):
            base_model(rand_video(11), d=rand_video(12))

    def test_joint_requires_matching_shapes(self, joint_model):
        with pytest.raises(ValueError, match="shape"):
            joint_model.forward_joint(rand_video(0), rand_video(1, (4, 8, 8, 3))[:2], 0, 0.5)

    def test_wrong_mode_errors(self, base_model, joint_model):
        with pytest.raises(ValueError, match="base mode"):
            base_model.forward_joint(rand_video(0), rand_video(1), 0, 0.5)
        with pytest.raises(ValueError, match="joint mode"):
            joint_model.forward_base(rand_video(0), 0, 0.5)


class TestExtendJoint:
    def test_zero_init_equivalence_over_random_motion(self, base_model, joint_model):
        x = rand_video(20)
        base_pred = base_model.forward_base(x, 4, 0.7)
        for seed in range(10):
            pred = joint_model.forward_joint(x, rand_video(100 + seed), 4, 0.7)
            assert (pred.u_x - base_pred.u_x).abs().max() <= 1e-6

    def test_motion_input_columns_exactly_zero(self, joint_model):
        pd = joint_model.config.patch_dim
        # math layout: rows of W+_in are input features; torch stores (out, in)
        assert (joint_model.w_in.weight[:, pd:] == 0).all()
        assert not (joint_model.w_in.weight[:, :pd] == 0).all()

    def test_extended_projection_shapes(self, joint_model):
        # math shapes: W+_in is (2*12) x 64, W+_out is 64 x (2*12)
        assert tuple(joint_model.w_in.weight.T.shape) == (24, 64)
        assert tuple(joint_model.w_out.weight.T.shape) == (64, 24)

    def test_double_extension_rejected(self, joint_model):
        with pytest.raises(ValueError, match="already joint"):
            extend_joint(joint_model)

    def test_null_motion_signal_matches_zeros(self, joint_model):
        x = rand_video(21)
        a = joint_model.forward_joint(x, None, 2, 0.4)
        b = joint_model.forward_joint(x, torch.zeros_like(x), 2, 0.4)
        assert torch.equal(a.u_x, b.u_x)
        assert torch.equal(a.u_d, b.u_d)

    def test_output_split_boundary(self, joint_model):
        # appearance reads only the first patch_dim output rows, motion the rest
        x, d = rand_video(22), rand_video(23)
        before = joint_model.forward_joint(x, d, 1, 0.5)
        pd = joint_model.config.patch_dim
        hacked = extend_joint(init_base(seed=0), seed=1)
        hacked.load_state_dict(joint_model.state_dict())
        with torch.no_grad():
            hacked.w_out.weight[pd:] += 1.0
        after = hacked.forward_joint(x, d, 1, 0.5)
        assert torch.equal(after.u_x, before.u_x)
        assert not torch.equal(after.u_d, before.u_d)

    def test_extension_seed_determinism(self, base_model):
        a = extend_joint(base_model, seed=5).state_dict()
        b = extend_joint(base_model, seed=5).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
