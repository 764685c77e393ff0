from unittest.mock import patch

import pytest
import torch
from torch import nn

from splatengine.checkpoint import (
    CheckpointError,
    read_checkpoint,
    write_checkpoint,
)
from splatengine.constants import GROUND_TRUTH_NAME, TRUTH_STAGE
from splatengine.pipeline import (
    TrainingDivergedError,
    adam_step,
    build_optimizer,
    check_dataset,
    initialize_state,
    joint_refine,
    learning_rate,
    load_checkpoint,
    pretrain_components,
    restore_state,
    save_checkpoint,
    seed_foreground,
    train,
    train_sdf_proxy,
)
from splatengine.renderer import render_at
from splatengine.scene import DensifyThresholds
from splatengine.utils.config import RunConfig, StageBudgets
from splatengine.utils.data.dataset import Dataset
from tests.fixtures.scenes import tiny_config


def single_parameter(value: float = 0.0) -> nn.Parameter:
    return nn.Parameter(torch.full((3,), value, dtype=torch.float64))


def render_first_frame(state, dataset):
    frame = dataset.frames[0]
    return render_at(
        state.model,
        state.deformation,
        state.camera_at(frame, 0),
        dataset.time(0),
    )


class TestLearningRate:
    def test__given_start__then_base_rate(self):
        assert learning_rate(0, RunConfig()) == 1e-4

    def test__given_two_decay_steps__then_quarter_rate(self):
        assert learning_rate(4000, RunConfig()) == pytest.approx(2.5e-5)


class TestAdamStep:
    def test__given_no_parameters__then_no_optimizer(self):
        assert build_optimizer([], RunConfig()) == (None, None)

    def test__given_first_step__then_moves_by_learning_rate(self):
        param = single_parameter()
        optimizer, scheduler = build_optimizer(
            [("w", param, 1.0)], RunConfig()
        )
        param.grad = torch.tensor([3.0, -2.0, 0.5], dtype=torch.float64)

        adam_step(optimizer, scheduler)

        torch.testing.assert_close(
            param.detach(),
            torch.tensor([-1e-4, 1e-4, -1e-4], dtype=torch.float64),
            rtol=1e-5,
            atol=0,
        )

    def test__given_zero_gradient__then_parameter_unchanged(self):
        param = single_parameter(1.0)
        optimizer, scheduler = build_optimizer(
            [("w", param, 1.0)], RunConfig()
        )
        param.grad = torch.zeros(3, dtype=torch.float64)

        adam_step(optimizer, scheduler)

        assert torch.equal(param.detach(), torch.ones(3).double())

    def test__given_non_finite_gradient__then_group_is_skipped(self):
        param = single_parameter(1.0)
        other = single_parameter(1.0)
        optimizer, scheduler = build_optimizer(
            [("w", param, 1.0), ("v", other, 1.0)], RunConfig()
        )
        param.grad = torch.tensor(
            [1.0, float("nan"), 0.0], dtype=torch.float64
        )
        other.grad = torch.ones(3, dtype=torch.float64)

        skipped = adam_step(optimizer, scheduler)

        assert skipped == ["w"]
        assert torch.equal(param.detach(), torch.ones(3).double())
        assert (other.detach() < 1.0).all()

    def test__given_decay_interval__then_rate_halves(self):
        param = single_parameter()
        optimizer, scheduler = build_optimizer(
            [("w", param, 2.0)], RunConfig(lr_step=2)
        )

        for _ in range(2):
            param.grad = torch.ones(3, dtype=torch.float64)
            adam_step(optimizer, scheduler)

        assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-4)


class TestInitializeState:
    def test__given_tiny_dataset__then_one_object_and_anchored_camera(
        self, fresh_state, tiny_dataset
    ):
        camera = fresh_state.deformation.camera_pose(0.0)

        expected = tiny_dataset.frames[0].camera.world_to_camera
        assert fresh_state.object_count == 1
        assert len(fresh_state.proxies) == 1
        assert len(fresh_state.model.foreground[0]) == 0
        torch.testing.assert_close(
            camera.translation, expected.translation, atol=1e-9, rtol=0
        )

    def test__given_seeded_foreground__then_gaussians_carry_object_id(
        self, fresh_state
    ):
        seed_foreground(fresh_state)

        gaussians = fresh_state.model.foreground[0].snapshot()
        assert len(gaussians) == 32
        assert (gaussians.object_ids == 1).all()


class TestTrainSdfProxy:
    def test__given_budget__then_runs_and_updates_parameters(
        self, fresh_state, tiny_dataset
    ):
        fresh_state.stage = "proxy"
        before = [p.detach().clone() for p in fresh_state.proxies.parameters()]

        train_sdf_proxy(fresh_state, tiny_dataset)

        after = list(fresh_state.proxies.parameters())
        assert fresh_state.iteration == 2
        assert any(not torch.equal(a, b) for a, b in zip(after, before))
        assert {row["component"] for row in fresh_state.history} == {
            "objects"
        }
        assert fresh_state.optimizer is None

    def test__given_zero_iterations__then_nothing_changes(
        self, fresh_state, tiny_dataset
    ):
        fresh_state.stage = "proxy"
        before = [p.detach().clone() for p in fresh_state.proxies.parameters()]

        train_sdf_proxy(fresh_state, tiny_dataset, iterations=0)

        after = list(fresh_state.proxies.parameters())
        assert fresh_state.iteration == 0
        assert all(torch.equal(a, b) for a, b in zip(after, before))


class TestPretrainComponents:
    def test__given_budgets__then_background_then_each_object(
        self, fresh_state, tiny_dataset
    ):
        seed_foreground(fresh_state)
        fresh_state.stage = "component"

        pretrain_components(fresh_state, tiny_dataset)

        components = {row["component"] for row in fresh_state.history}
        assert fresh_state.iteration == 4
        assert components <= {"background", "object 1"}
        assert components
        gaussians = fresh_state.model.foreground[0].snapshot()
        assert (gaussians.object_ids == 1).all()


class TestTrain:
    def test__given_zero_budgets__then_model_is_untouched(
        self, tiny_dataset
    ):
        config = tiny_config(
            budgets=StageBudgets(proxy=0, background=0, foreground=0, joint=0)
        )
        state = initialize_state(config, tiny_dataset)
        before = {
            name: value.clone()
            for name, value in state.deformation.state_dict().items()
        }
        background = state.model.background.centers.detach().clone()

        train(state, tiny_dataset)

        assert state.stage == "joint"
        assert state.iteration == 0
        for name, value in state.deformation.state_dict().items():
            assert torch.equal(value, before[name]), name
        assert torch.equal(state.model.background.centers, background)

    def test__given_checkpoint_dir__then_one_file_per_stage(
        self, fresh_state, tiny_dataset, tmp_path
    ):
        train(fresh_state, tiny_dataset, tmp_path)

        names = sorted(path.name for path in tmp_path.iterdir())
        assert names == [
            "component.hgsc",
            "init.hgsc",
            "joint.hgsc",
            "proxy.hgsc",
        ]
        assert read_checkpoint(tmp_path / "proxy.hgsc").iteration == 2
        assert fresh_state.history

    def test__given_frozen_background__then_joint_leaves_it_bit_identical(
        self, fresh_state, tiny_dataset
    ):
        seed_foreground(fresh_state)
        fresh_state.stage = "joint"
        before = fresh_state.model.background.snapshot().detach()

        joint_refine(fresh_state, tiny_dataset)

        after = fresh_state.model.background.snapshot()
        assert torch.equal(after.centers, before.centers)
        assert torch.equal(after.colors, before.colors)
        assert torch.equal(after.log_scales, before.log_scales)

    def test__given_non_finite_loss__then_raises_diverged(
        self, fresh_state, tiny_dataset
    ):
        seed_foreground(fresh_state)
        fresh_state.stage = "joint"
        nan = torch.tensor(float("nan"), dtype=torch.float64)

        with patch(
            "splatengine.pipeline.photometric_loss", return_value=nan
        ):
            with pytest.raises(TrainingDivergedError, match="joint"):
                joint_refine(fresh_state, tiny_dataset)

    def test__given_densify_interval__then_foreground_stays_valid(
        self, tiny_dataset
    ):
        config = tiny_config(densify=DensifyThresholds(interval=1))
        state = initialize_state(config, tiny_dataset)
        seed_foreground(state)
        state.stage = "joint"

        joint_refine(state, tiny_dataset)

        gaussians = state.model.foreground[0].snapshot()
        assert len(gaussians) > 0
        assert torch.isfinite(gaussians.centers).all()
        assert (gaussians.colors >= 0).all() and (gaussians.colors <= 1).all()


class TestCheckpoints:
    def test__given_saved_state__then_reload_renders_identically(
        self, fresh_state, tiny_dataset, tmp_path
    ):
        seed_foreground(fresh_state)
        path = tmp_path / "state.hgsc"

        save_checkpoint(fresh_state, path)
        loaded = load_checkpoint(path)

        original = render_first_frame(fresh_state, tiny_dataset)
        restored = render_first_frame(loaded, tiny_dataset)
        assert torch.equal(original.rgb, restored.rgb)
        assert torch.equal(original.depth, restored.depth)

    def test__given_checkpoint__then_restore_resumes_stage_and_iteration(
        self, fresh_state, tiny_dataset, tmp_path
    ):
        fresh_state.stage = "proxy"
        fresh_state.iteration = 1
        path = tmp_path / "proxy.hgsc"
        save_checkpoint(fresh_state, path)
        target = initialize_state(tiny_config(seed=5), tiny_dataset)

        restore_state(target, read_checkpoint(path))

        assert target.stage == "proxy"
        assert target.iteration == 1
        assert target.seed == 0

    def test__given_missing_model_group__then_error_names_it(
        self, fresh_state, tmp_path
    ):
        seed_foreground(fresh_state)
        path = tmp_path / "state.hgsc"
        save_checkpoint(fresh_state, path)
        checkpoint = read_checkpoint(path)
        del checkpoint.groups["model.foreground.0.centers"]
        write_checkpoint(checkpoint, path)

        with pytest.raises(
            CheckpointError, match="model.foreground.0.centers is missing"
        ):
            load_checkpoint(path)

    def test__given_other_object_count__then_dataset_check_fails(
        self, fresh_state, tiny_dataset
    ):
        other = Dataset(frames=tiny_dataset.frames, object_count=0)

        with pytest.raises(CheckpointError, match="1 objects"):
            check_dataset(fresh_state, other)

    def test__given_ground_truth_checkpoint__then_loads_true_model(
        self, tiny_dataset_dir, tiny_ground_truth
    ):
        state = load_checkpoint(tiny_dataset_dir / GROUND_TRUTH_NAME)

        assert state.stage == TRUTH_STAGE
        assert state.object_count == 1
        assert torch.equal(
            state.model.foreground[0].centers,
            tiny_ground_truth.model.foreground[0].centers,
        )

    def test__given_truth_checkpoint__then_it_cannot_be_resumed(
        self, fresh_state, tiny_dataset_dir
    ):
        checkpoint = read_checkpoint(tiny_dataset_dir / GROUND_TRUTH_NAME)

        with pytest.raises(CheckpointError, match="cannot be resumed"):
            restore_state(fresh_state, checkpoint)

    @pytest.mark.slow
    def test__given_resumed_run__then_matches_uninterrupted_run(
        self, tiny_dataset, tmp_path
    ):
        full = initialize_state(tiny_config(), tiny_dataset)
        train(full, tiny_dataset)
        partial = initialize_state(tiny_config(), tiny_dataset)
        train(partial, tiny_dataset, tmp_path)
        resumed = restore_state(
            initialize_state(tiny_config(), tiny_dataset),
            read_checkpoint(tmp_path / "component.hgsc"),
        )

        train(resumed, tiny_dataset)

        original = render_first_frame(full, tiny_dataset)
        result = render_first_frame(resumed, tiny_dataset)
        torch.testing.assert_close(result.rgb, original.rgb)
