import pytest
import torch
from torch import nn

from splatengine.deformation import (
    DeformationModel,
    FourierPoseNet,
    Skeleton,
    SoftDeformField,
    articulate,
    bone_pose,
    frame_time,
    kmeans_bone_centers,
    skinning_weights,
    soft_apply,
    warp_gaussian,
)
from splatengine.scene import CanonicalModel, GaussianSet
from splatengine.utils.config import AblationToggles
from tests.fixtures.scenes import random_gaussians, tiny_architecture


def points(count: int = 20, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(count, 3, dtype=torch.float64, generator=generator)


def perturb(module: nn.Module, seed: int, scale: float = 0.1) -> None:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for parameter in module.parameters():
            parameter.add_(
                scale
                * torch.randn(
                    parameter.shape,
                    dtype=parameter.dtype,
                    generator=generator,
                )
            )


def build_model(bone_centers, **toggles) -> DeformationModel:
    return DeformationModel.build(
        tiny_architecture(),
        frame_count=4,
        bone_centers=bone_centers,
        toggles=AblationToggles(**toggles),
    )


def two_bones() -> torch.Tensor:
    return torch.tensor(
        [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64
    )


class TestFrameTime:
    def test__given_single_frame__then_zero(self):
        assert frame_time(0, 1) == 0.0

    def test__given_middle_frame__then_half(self):
        assert frame_time(2, 5) == 0.5


class TestFourierPoseNet:
    def test__given_fresh_net__then_returns_anchor(self):
        anchors = torch.tensor(
            [[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]], dtype=torch.float64
        )
        net = FourierPoseNet(frequencies=2, width=8, depth=2, anchors=anchors)

        twist = net.twist(0.7)

        torch.testing.assert_close(twist.as_vector(), anchors[0])

    def test__given_two_anchors__then_interpolates_between_them(self):
        anchors = torch.zeros(2, 6, dtype=torch.float64)
        anchors[1, 3] = 2.0
        net = FourierPoseNet(frequencies=2, width=8, depth=2, anchors=anchors)

        transform = net(0.5)

        torch.testing.assert_close(
            transform.translation,
            torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64),
        )

    def test__given_time_outside_unit_interval__then_raises(self):
        net = FourierPoseNet(frequencies=2, width=8, depth=2)

        with pytest.raises(ValueError, match="Normalised time"):
            net(1.5)


class TestSkinningWeights:
    def test__given_point_on_bone__then_that_bone_dominates(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)
        point = torch.tensor([[-1.0, 0.0, 0.0]], dtype=torch.float64)

        weights = skinning_weights(point, skeleton, 0.0)

        assert float(weights[0, 0]) > 1.0 - 1e-9

    def test__given_point_between_equal_bones__then_split_evenly(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)
        point = torch.zeros(1, 3, dtype=torch.float64)

        weights = skinning_weights(point, skeleton, 0.0)

        torch.testing.assert_close(
            weights[0], torch.tensor([0.5, 0.5], dtype=torch.float64)
        )

    def test__given_any_points__then_weights_sum_to_one(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)

        weights = skinning_weights(points(), skeleton, 0.3)

        assert (weights >= 0).all()
        torch.testing.assert_close(
            weights.sum(dim=-1), torch.ones(20, dtype=torch.float64)
        )

    def test__given_posed_frame__then_weights_follow_moved_bone(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)
        skeleton.twist_nets[0].set_anchors(
            torch.tensor(
                [[0.0, 0.0, 0.0, -1.0, 3.0, 0.0]], dtype=torch.float64
            )
        )
        point = torch.tensor([[-1.0, 3.0, 0.0]], dtype=torch.float64)

        weights = skinning_weights(point, skeleton, 0.5, frame="posed")

        assert float(weights[0, 0]) > 1.0 - 1e-9

    def test__given_unknown_frame__then_raises(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)

        with pytest.raises(ValueError, match="skinning frame"):
            skinning_weights(points(), skeleton, 0.0, frame="world")


class TestSkeleton:
    def test__given_fresh_skeleton__then_bones_sit_at_rest(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)

        pose = bone_pose(skeleton, 1, 0.4)

        torch.testing.assert_close(pose.translation, two_bones()[1])
        torch.testing.assert_close(
            pose.rotation,
            torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64),
        )

    def test__given_no_bones__then_raises(self):
        with pytest.raises(ValueError, match="at least one bone"):
            Skeleton(torch.zeros(0, 3, dtype=torch.float64))

    def test__given_non_positive_temperature__then_raises(self):
        with pytest.raises(ValueError, match="temperature"):
            Skeleton(two_bones(), temperature=0.0)


class TestArticulate:
    def test__given_fresh_skeleton__then_identity(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)
        x = points()

        result, _ = articulate(x, skeleton, 0.5)

        torch.testing.assert_close(result, x, atol=1e-9, rtol=0)

    def test__given_translated_bone__then_points_follow_and_return(self):
        skeleton = Skeleton(
            torch.zeros(1, 3, dtype=torch.float64), width=8, depth=1
        )
        skeleton.twist_nets[0].set_anchors(
            torch.tensor(
                [[0.0, 0.0, 0.0, 0.1, 0.2, 0.3]], dtype=torch.float64
            )
        )
        x = points()

        posed, _ = articulate(x, skeleton, 0.3)
        result, _ = articulate(posed, skeleton, 0.3, "frame_to_canonical")

        shift = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
        torch.testing.assert_close(posed, x + shift)
        torch.testing.assert_close(result, x)

    def test__given_unknown_direction__then_raises(self):
        skeleton = Skeleton(two_bones(), width=8, depth=1)

        with pytest.raises(ValueError, match="Unknown warp direction"):
            articulate(points(), skeleton, 0.0, "sideways")


class TestSoftDeformField:
    def test__given_fresh_field__then_identity(self):
        field = SoftDeformField(frame_count=3, latent_dim=2, width=8)
        x = points()

        result = soft_apply(field, x, field.latent(0.5))

        torch.testing.assert_close(result, x)

    def test__given_trained_field__then_inverse_undoes_forward(self):
        field = SoftDeformField(frame_count=3, latent_dim=2, width=8)
        perturb(field, seed=1, scale=0.3)
        x = points()
        latent = field.latent(0.25)

        forward = soft_apply(field, x, latent, "forward")
        result = soft_apply(field, forward, latent, "inverse")

        assert not torch.allclose(forward, x)
        assert float((result - x).abs().max()) < 1e-9

    def test__given_wrong_latent_width__then_raises(self):
        field = SoftDeformField(frame_count=3, latent_dim=2, width=8)

        with pytest.raises(ValueError, match="Latent has dimension 3"):
            soft_apply(field, points(), torch.zeros(3, dtype=torch.float64))


class TestDeformationModel:
    def test__given_fresh_model__then_identity_warp(self):
        model = build_model([two_bones()])
        x = points()

        result = model.warp_canonical_to_frame(x, 0.5, object_id=1)

        torch.testing.assert_close(result, x, atol=1e-9, rtol=0)

    def test__given_root_translation__then_points_shift_back(self):
        model = build_model([two_bones()])
        model.object(1).root.set_anchors(
            torch.tensor(
                [[0.0, 0.0, 0.0, 0.2, -0.1, 0.3]], dtype=torch.float64
            )
        )
        x = points()

        result = model.warp_canonical_to_frame(x, 0.0, object_id=1)

        expected = x - torch.tensor([0.2, -0.1, 0.3], dtype=torch.float64)
        torch.testing.assert_close(result, expected, atol=1e-9, rtol=0)

    def test__given_root_disabled__then_root_pose_is_identity(self):
        model = build_model([two_bones()], root=False)
        model.object(1).root.set_anchors(
            torch.tensor(
                [[0.0, 0.0, 0.0, 0.2, -0.1, 0.3]], dtype=torch.float64
            )
        )

        pose = model.root_pose(1, 0.0)

        assert torch.equal(
            pose.translation, torch.zeros(3, dtype=torch.float64)
        )

    def test__given_single_bone_object__then_warps_round_trip(self):
        model = build_model([torch.zeros(1, 3, dtype=torch.float64)])
        perturb(model.object(1), seed=2)
        x = points()

        frame = model.warp_canonical_to_frame(x, 0.6, object_id=1)
        result = model.warp_frame_to_canonical(frame, 0.6, object_id=1)

        assert not torch.allclose(frame, x)
        assert float((result - x).abs().max()) < 1e-9

    def test__given_unknown_object__then_raises(self):
        model = build_model([two_bones()])

        with pytest.raises(ValueError, match="Object id 2 does not exist"):
            model.warp_canonical_to_frame(points(), 0.0, object_id=2)

    def test__given_time_outside_unit_interval__then_raises(self):
        model = build_model([two_bones()])

        with pytest.raises(ValueError, match="Normalised time"):
            model.warp_frame_to_canonical(points(), -0.1, object_id=1)

    def test__given_empty_gaussians__then_returned_unchanged(self):
        model = build_model([two_bones()])
        empty = GaussianSet.empty()

        result = model.warp_gaussians(empty, 0.5, object_id=1)

        assert len(result) == 0

    def test__given_fresh_model__then_gaussians_unchanged(self):
        model = build_model([two_bones()])
        gaussians = random_gaussians(6, object_id=1)

        result = warp_gaussian(gaussians, 0.3, model, object_id=1)

        torch.testing.assert_close(
            result.centers, gaussians.centers, atol=1e-9, rtol=0
        )
        torch.testing.assert_close(
            result.rotations, gaussians.rotations, atol=1e-9, rtol=0
        )

    def test__given_root_rotation__then_gaussian_rotations_follow(self):
        model = build_model([torch.zeros(1, 3, dtype=torch.float64)])
        model.object(1).root.set_anchors(
            torch.tensor(
                [[0.0, 0.0, 0.5, 0.0, 0.0, 0.0]], dtype=torch.float64
            )
        )
        gaussians = random_gaussians(4, object_id=1)

        result = model.warp_gaussians(gaussians, 0.0, object_id=1)

        expected = model.root_pose(1, 0.0).inverse().matrix()
        rotated = expected @ gaussians.centers[..., None]
        torch.testing.assert_close(
            result.centers, rotated[..., 0], atol=1e-9, rtol=0
        )
        assert not torch.allclose(result.rotations, gaussians.rotations)
        assert torch.equal(result.log_scales, gaussians.log_scales)

    def test__given_mismatched_canonical_model__then_raises(self):
        model = build_model([two_bones()])
        canonical = CanonicalModel(random_gaussians(4))

        with pytest.raises(ValueError, match="0 objects"):
            model.warp_foreground(canonical, 0.0)

    def test__given_wrong_cycle_weight_count__then_raises(self):
        model = build_model([two_bones()])

        with pytest.raises(ValueError, match="cycle weights"):
            DeformationModel(
                model.background_pose,
                list(model.objects),
                4,
                cycle_weights=(1.0, 1.0),
            )


class TestKmeansBoneCenters:
    def test__given_two_clusters__then_finds_both_means(self):
        generator = torch.Generator().manual_seed(0)
        noise = 0.01 * torch.randn(
            40, 3, dtype=torch.float64, generator=generator
        )
        offsets = torch.tensor(
            [[-1.0, 0.0, 0.0]] * 20 + [[1.0, 0.0, 0.0]] * 20,
            dtype=torch.float64,
        )
        cloud = offsets + noise

        centers = kmeans_bone_centers(cloud, 2)

        ordered = centers[centers[:, 0].argsort()]
        torch.testing.assert_close(
            ordered,
            torch.tensor([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).double(),
            atol=0.02,
            rtol=0,
        )
