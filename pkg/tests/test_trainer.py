from __future__ import annotations

import numpy as np
import pytest
import torch

import videojam as vj
from videojam.formats import FormatError
from videojam.jamdit import extend_joint, init_base
from videojam.trainer import (
    TrainConfig,
    derive_seed,
    finite_difference_check,
    grad_check,
    load_checkpoint,
    make_optimizer,
    prepare_items,
    restore_optimizer,
    sample_dropout,
    save_checkpoint,
    train,
    train_step,
)


class TestSampleDropout:
    def test_zero_rates_never_drop(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            decision = sample_dropout(rng, 0.0, 0.0)
            assert not decision.drop_text and not decision.drop_flow

    def test_rate_one_always_drops(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert sample_dropout(rng, 1.0, 1.0).drop_text

    def test_empirical_rates(self):
        rng = np.random.default_rng(42)
        n = 10_000
        decisions = [sample_dropout(rng, 0.3, 0.2) for _ in range(n)]
        text_rate = sum(d.drop_text for d in decisions) / n
        flow_rate = sum(d.drop_flow for d in decisions) / n
        assert abs(text_rate - 0.3) < 0.02
        assert abs(flow_rate - 0.2) < 0.02

    def test_bad_probability(self):
        with pytest.raises(ValueError, match="p_text"):
            sample_dropout(np.random.default_rng(0), 1.5, 0.0)


class TestTrainStep:
    def test_zero_lr_leaves_params_unchanged(self, micro_items):
        items = prepare_items(micro_items)
        model = extend_joint(init_base(seed=0), seed=1)
        config = TrainConfig(steps=1, batch_size=2, learning_rate=0.0, mode="videojam")
        before = {k: v.clone() for k, v in model.state_dict().items()}
        metrics = train_step(model, make_optimizer(model, config), items, 0, config)
        assert metrics["loss"] > 0
        after = model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_deterministic_loss_sequence(self, micro_items):
        items = prepare_items(micro_items)

        def run():
            model = extend_joint(init_base(seed=0), seed=1)
            config = TrainConfig(steps=5, batch_size=2, seed=9, mode="videojam")
            opt = make_optimizer(model, config)
            return [train_step(model, opt, items, s, config)["loss"] for s in range(5)]

        assert run() == run()

    def test_every_parameter_group_changes(self, micro_items):
        items = prepare_items(micro_items)
        model = extend_joint(init_base(seed=0), seed=1)
        config = TrainConfig(steps=1, batch_size=4, learning_rate=1e-3, mode="videojam")
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_step(model, make_optimizer(model, config), items, 0, config)
        after = model.state_dict()
        changed = {k for k in before if not torch.equal(before[k], after[k])}
        assert changed == set(before)

    def test_dropped_flow_items_do_not_touch_the_loss(self, micro_items):
        # with p_drop_flow=1 the flow input is zeroed and the motion loss is
        # masked, so corrupting every flow field must not change the step
        items_a = prepare_items(micro_items)
        items_b = prepare_items(micro_items)
        for item in items_b:
            item.flow_video = item.flow_video + 123.0
        config = TrainConfig(steps=1, batch_size=4, seed=3, p_drop_flow=1.0, mode="videojam")

        def run(items):
            model = extend_joint(init_base(seed=0), seed=1)
            opt = make_optimizer(model, config)
            train_step(model, opt, items, 0, config)
            return model.state_dict()

        a, b = run(items_a), run(items_b)
        assert all(torch.equal(a[k], b[k]) for k in a)
        # sanity: with dropout off the same corruption does change the step
        config_on = TrainConfig(steps=1, batch_size=4, seed=3, p_drop_flow=0.0, mode="videojam")

        def run_on(items):
            model = extend_joint(init_base(seed=0), seed=1)
            opt = make_optimizer(model, config_on)
            train_step(model, opt, items, 0, config_on)
            return model.state_dict()

        a_on, b_on = run_on(items_a), run_on(items_b)
        assert any(not torch.equal(a_on[k], b_on[k]) for k in a_on)

    def test_base_mode_ignores_flow(self, micro_items):
        items = prepare_items(micro_items)
        model = init_base(seed=0)
        config = TrainConfig(steps=1, batch_size=2, mode="base")
        metrics = train_step(model, make_optimizer(model, config), items, 0, config)
        assert metrics["loss_d"] == 0.0
        assert metrics["dropped_flow_frac"] == 0.0


class TestTrain:
    def test_single_step_writes_final_checkpoint(self, small_dataset, tmp_path):
        config = TrainConfig(steps=1, batch_size=2, mode="base")
        result = train(config, small_dataset, tmp_path)
        assert result.checkpoint.exists()
        assert result.loss_csv.exists()
        header = result.loss_csv.read_text().splitlines()[0]
        assert header == "step,loss,loss_x,loss_d,dropped_text_frac,dropped_flow_frac"

    def test_videojam_requires_base_checkpoint(self, small_dataset, tmp_path):
        config = TrainConfig(steps=1, mode="videojam")
        with pytest.raises(ValueError, match="init_from"):
            train(config, small_dataset, tmp_path)

    def test_resume_reproduces_loss_tail(self, small_dataset, tmp_path):
        full_cfg = TrainConfig(steps=12, batch_size=2, seed=4, mode="base", checkpoint_interval=6)
        full = train(full_cfg, small_dataset, tmp_path / "full")
        part = train(
            TrainConfig(steps=6, batch_size=2, seed=4, mode="base", checkpoint_interval=0),
            small_dataset,
            tmp_path / "part",
        )
        resumed = train(
            TrainConfig(steps=12, batch_size=2, seed=4, mode="base", checkpoint_interval=0),
            small_dataset,
            tmp_path / "resumed",
            resume_from=part.checkpoint,
        )
        full_tail = [r["loss"] for r in full.losses[6:]]
        resumed_losses = [r["loss"] for r in resumed.losses]
        assert resumed_losses == full_tail

    def test_two_seeded_runs_identical(self, small_dataset, tmp_path):
        config = TrainConfig(steps=5, batch_size=2, seed=7, mode="base")
        a = train(config, small_dataset, tmp_path / "a")
        b = train(config, small_dataset, tmp_path / "b")
        assert [r["loss"] for r in a.losses] == [r["loss"] for r in b.losses]
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


class TestCheckpoint:
    def test_roundtrip_byte_exact(self, joint_model, tmp_path):
        p1, p2 = tmp_path / "a.vjc", tmp_path / "b.vjc"
        save_checkpoint(joint_model, p1)
        model, _ = load_checkpoint(p1)
        save_checkpoint(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_forward_matches(self, joint_model, tmp_path):
        path = tmp_path / "m.vjc"
        save_checkpoint(joint_model, path)
        loaded, _ = load_checkpoint(path)
        g = torch.Generator().manual_seed(0)
        x = torch.randn(4, 8, 8, 3, generator=g)
        d = torch.randn(4, 8, 8, 3, generator=g)
        a = joint_model.forward_joint(x, d, 3, 0.5)
        b = loaded.forward_joint(x, d, 3, 0.5)
        assert (a.u_x - b.u_x).abs().max() <= 1e-7
        assert (a.u_d - b.u_d).abs().max() <= 1e-7

    def test_base_checkpoint_then_extend_passes_equivalence(self, base_model, tmp_path):
        path = tmp_path / "base.vjc"
        save_checkpoint(base_model, path)
        loaded, _ = load_checkpoint(path)
        joint = extend_joint(loaded, seed=2)
        g = torch.Generator().manual_seed(1)
        x = torch.randn(4, 8, 8, 3, generator=g)
        d = torch.randn(4, 8, 8, 3, generator=g)
        diff = joint.forward_joint(x, d, 1, 0.25).u_x - base_model.forward_base(x, 1, 0.25).u_x
        assert diff.abs().max() <= 1e-6

    def test_corrupted_magic_rejected(self, base_model, tmp_path):
        path = tmp_path / "m.vjc"
        save_checkpoint(base_model, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"JUNK"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_optimizer_state_roundtrip(self, micro_items, tmp_path):
        items = prepare_items(micro_items)
        model = init_base(seed=0)
        config = TrainConfig(steps=2, batch_size=2, mode="base")
        opt = make_optimizer(model, config)
        for step in range(2):
            train_step(model, opt, items, step, config)
        path = tmp_path / "m.vjc"
        save_checkpoint(model, path, optimizer=opt, step=2)
        loaded, meta = load_checkpoint(path)
        opt2 = make_optimizer(loaded, config)
        restore_optimizer(opt2, loaded, meta)
        metrics_a = train_step(model, opt, items, 2, config)
        metrics_b = train_step(loaded, opt2, items, 2, config)
        assert metrics_a["loss"] == metrics_b["loss"]
        assert all(
            torch.equal(a, b)
            for a, b in zip(model.state_dict().values(), loaded.state_dict().values())
        )


class TestGradCheck:
    def test_linear_model_is_exact(self):
        # FD of a quadratic loss has no truncation error
        g = torch.Generator().manual_seed(0)
        lin = torch.nn.Linear(4, 2).double()
        x = torch.randn(8, 4, generator=g, dtype=torch.float64)
        target = torch.randn(8, 2, generator=g, dtype=torch.float64)

        def loss_fn():
            return ((lin(x) - target) ** 2).mean()

        err = finite_difference_check(loss_fn, list(lin.named_parameters()), epsilon=1e-5)
        assert err <= 1e-10

    def test_joint_model_within_tolerance(self, micro_prepared):
        model = extend_joint(init_base(seed=0), seed=1)
        assert grad_check(model, micro_prepared, n_coords=200, seed=0) <= 1e-4

    def test_base_model_within_tolerance(self, micro_prepared):
        assert grad_check(init_base(seed=0), micro_prepared, n_coords=200, seed=0) <= 1e-4

    def test_halving_epsilon_bounded_growth(self, micro_prepared):
        model = extend_joint(init_base(seed=0), seed=1)
        err = grad_check(model, micro_prepared, epsilon=5e-4, n_coords=100, seed=2)
        err_half = grad_check(model, micro_prepared, epsilon=2.5e-4, n_coords=100, seed=2)
        assert err_half <= 10 * max(err, 1e-12)


class TestDeriveSeed:
    def test_stable_and_distinct(self):
        assert derive_seed(0, "step", 1) == derive_seed(0, "step", 1)
        assert derive_seed(0, "step", 1) != derive_seed(0, "step", 2)
        assert derive_seed(0, "step", 1) != derive_seed(1, "step", 1)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="mode"):
            TrainConfig(mode="other").validate()
        with pytest.raises(ValueError, match="p_drop_text"):
            TrainConfig(p_drop_text=2.0).validate()
        with pytest.raises(ValueError, match="steps"):
            TrainConfig(steps=-1).validate()
