import math

import pytest
import torch

from splatengine.geometry import (
    AmbiguousLogError,
    DegenerateBlendError,
    DualQuaternion,
    RigidTransform,
    Twist,
    dq_blend,
    look_at,
    se3_apply,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
)


def vector(*values: float) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)


def z_rotation(angle: float) -> RigidTransform:
    return se3_exp(Twist(vector(0.0, 0.0, angle), vector(0.0, 0.0, 0.0)))


def random_twists(count: int, seed: int = 0) -> Twist:
    generator = torch.Generator().manual_seed(seed)
    axis = torch.randn(count, 3, dtype=torch.float64, generator=generator)
    axis = axis / axis.norm(dim=-1, keepdim=True)
    angle = 3.0 * torch.rand(
        count, 1, dtype=torch.float64, generator=generator
    )
    vee = torch.randn(count, 3, dtype=torch.float64, generator=generator)
    return Twist(omega=axis * angle, vee=vee)


class TestSe3Exp:
    def test__given_zero_twist__then_identity(self):
        transform = se3_exp(Twist.zeros())

        assert torch.equal(transform.rotation, vector(1.0, 0.0, 0.0, 0.0))
        assert torch.equal(transform.translation, vector(0.0, 0.0, 0.0))

    def test__given_pure_translation_twist__then_translates(self):
        twist = Twist(vector(0.0, 0.0, 0.0), vector(1.0, 2.0, 3.0))

        transform = se3_exp(twist)

        torch.testing.assert_close(
            transform.translation, vector(1.0, 2.0, 3.0)
        )
        torch.testing.assert_close(
            transform.rotation, vector(1.0, 0.0, 0.0, 0.0)
        )

    def test__given_quarter_turn_about_z__then_maps_x_to_y(self):
        transform = z_rotation(math.pi / 2)

        result = se3_apply(transform, vector(1.0, 0.0, 0.0))

        torch.testing.assert_close(
            result, vector(0.0, 1.0, 0.0), atol=1e-12, rtol=0
        )

    def test__given_non_finite_twist__then_raises(self):
        twist = Twist(vector(math.nan, 0.0, 0.0), vector(0.0, 0.0, 0.0))

        with pytest.raises(ValueError, match="non-finite"):
            se3_exp(twist)


class TestSe3Log:
    def test__given_identity__then_zero_twist(self):
        twist = se3_log(RigidTransform.identity())

        torch.testing.assert_close(
            twist.as_vector(), torch.zeros(6, dtype=torch.float64)
        )

    def test__given_pure_translation__then_vee_is_translation(self):
        transform = RigidTransform.from_translation(vector(1.0, 2.0, 3.0))

        twist = se3_log(transform)

        torch.testing.assert_close(twist.omega, vector(0.0, 0.0, 0.0))
        torch.testing.assert_close(twist.vee, vector(1.0, 2.0, 3.0))

    def test__given_random_twists__then_exp_log_round_trips(self):
        twists = random_twists(10_000)

        recovered = se3_log(se3_exp(twists))

        error = (recovered.as_vector() - twists.as_vector()).abs().max()
        assert float(error) < 1e-8

    def test__given_half_turn__then_raises_ambiguous_log(self):
        transform = z_rotation(math.pi)

        with pytest.raises(AmbiguousLogError):
            se3_log(transform)


class TestSe3Inverse:
    def test__given_translation__then_negated(self):
        transform = RigidTransform.from_translation(vector(1.0, 2.0, 3.0))

        inverse = se3_inverse(transform)

        torch.testing.assert_close(
            inverse.translation, vector(-1.0, -2.0, -3.0)
        )

    def test__given_random_transforms__then_compose_is_identity(self):
        transforms = se3_exp(random_twists(10_000, seed=1))

        identity = se3_compose(transforms, se3_inverse(transforms))

        rotation = identity.rotation * torch.sign(identity.rotation[:, :1])
        expected = RigidTransform.identity(10_000)
        assert float((rotation - expected.rotation).abs().max()) < 1e-9
        assert float(identity.translation.abs().max()) < 1e-9

    def test__given_random_transform__then_inverse_undoes_apply(self):
        transform = se3_exp(random_twists(1, seed=2))[0]
        point = vector(0.3, -1.2, 2.5)

        result = se3_apply(
            se3_inverse(transform), se3_apply(transform, point)
        )

        torch.testing.assert_close(result, point, atol=1e-9, rtol=0)

    def test__given_non_finite_point__then_apply_raises(self):
        with pytest.raises(ValueError):
            se3_apply(
                RigidTransform.identity(), vector(math.inf, 0.0, 0.0)
            )


class TestDqBlend:
    def test__given_single_transform__then_returns_it(self):
        transform = se3_exp(random_twists(1, seed=3))[0]

        blended = dq_blend([transform], vector(1.0))

        torch.testing.assert_close(blended.rotation, transform.rotation)
        torch.testing.assert_close(
            blended.translation, transform.translation
        )

    def test__given_copies_of_one_transform__then_returns_it(self):
        transform = se3_exp(random_twists(1, seed=4))[0]

        blended = dq_blend([transform] * 3, vector(0.2, 0.5, 0.3))

        torch.testing.assert_close(blended.rotation, transform.rotation)
        torch.testing.assert_close(
            blended.translation, transform.translation
        )

    def test__given_identity_and_quarter_turn__then_eighth_turn(self):
        transforms = [RigidTransform.identity(), z_rotation(math.pi / 2)]

        blended = dq_blend(transforms, vector(0.5, 0.5))

        expected = z_rotation(math.pi / 4)
        torch.testing.assert_close(blended.rotation, expected.rotation)
        torch.testing.assert_close(
            blended.translation, vector(0.0, 0.0, 0.0)
        )

    def test__given_flipped_quaternion_sign__then_blend_is_unchanged(self):
        a, b = se3_exp(random_twists(2, seed=5))[0], z_rotation(0.4)
        flipped = RigidTransform(-b.rotation, b.translation)
        weights = vector(0.7, 0.3)

        original = dq_blend([a, b], weights)
        result = dq_blend([a, flipped], weights)

        torch.testing.assert_close(result.rotation, original.rotation)
        torch.testing.assert_close(
            result.translation, original.translation
        )

    def test__given_random_blend__then_unit_dual_quaternion(self):
        transforms = se3_exp(random_twists(4, seed=6))
        weights = vector(0.1, 0.2, 0.3, 0.4)

        blended = DualQuaternion.from_transform(
            dq_blend(transforms, weights)
        )

        assert abs(float(blended.real.norm()) - 1.0) < 1e-8
        assert abs(float((blended.real * blended.dual).sum())) < 1e-8

    def test__given_all_zero_weights__then_raises(self):
        with pytest.raises(DegenerateBlendError):
            dq_blend([RigidTransform.identity()] * 2, vector(0.0, 0.0))

    def test__given_negative_weight__then_raises(self):
        with pytest.raises(ValueError, match="non-negative"):
            dq_blend([RigidTransform.identity()] * 2, vector(1.5, -0.5))


class TestLookAt:
    def test__given_target_ahead__then_target_on_optical_axis(self):
        eye = vector(1.0, -0.5, -2.0)
        target = vector(0.0, 0.0, 0.0)

        world_to_camera = look_at(eye, target)

        local = world_to_camera.apply(target)
        torch.testing.assert_close(
            local[:2], vector(0.0, 0.0), atol=1e-12, rtol=0
        )
        assert float(local[2]) > 0

    def test__given_default_down__then_world_down_is_image_down(self):
        eye = vector(0.0, 0.0, -2.0)

        world_to_camera = look_at(eye, vector(0.0, 0.0, 0.0))

        below = world_to_camera.apply(vector(0.0, 1.0, 0.0))
        assert float(below[1]) > 0
