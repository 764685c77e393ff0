from unittest.mock import patch

import pytest
import torch

from splatengine.deformation import DeformationModel
from splatengine.geometry import RigidTransform
from splatengine.renderer import (
    Camera,
    predicted_flow,
    project,
    rasterize,
    rasterize_backward,
    render_at,
)
from splatengine.scene import CanonicalModel, GaussianSet
from tests.fixtures.scenes import (
    front_camera,
    gaussian_set,
    random_gaussians,
    tiny_architecture,
)


def one_object_scene() -> tuple[CanonicalModel, DeformationModel]:
    model = CanonicalModel(
        random_gaussians(20),
        [random_gaussians(10, seed=1, object_id=1)],
    )
    deformation = DeformationModel.build(
        tiny_architecture(),
        frame_count=3,
        bone_centers=[torch.zeros(2, 3, dtype=torch.float64)],
    )
    return model, deformation


class TestCamera:
    def test__given_principal_point_outside_image__then_raises(self):
        with pytest.raises(ValueError, match="Principal point"):
            Camera(fx=10, fy=10, cx=9, cy=4, width=8, height=8)

    def test__given_non_positive_focal__then_raises(self):
        with pytest.raises(ValueError, match="Focal lengths"):
            Camera(fx=0, fy=10, cx=4, cy=4, width=8, height=8)

    def test__given_constant_depth__then_backprojects_onto_plane(self):
        camera = front_camera()
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)

        points = camera.backproject(depth)

        torch.testing.assert_close(
            points[4, 4], torch.tensor([0.0, 0.0, 2.0], dtype=torch.float64)
        )
        pixels, z = camera.project_points(points.reshape(-1, 3))
        assert torch.allclose(z, torch.full_like(z, 2.0))
        assert torch.allclose(pixels[9], torch.tensor([1.0, 1.0]).double())


class TestProject:
    def test__given_on_axis_gaussian__then_mean_at_principal_point(self):
        gaussians = gaussian_set([[0.0, 0.0, 2.0]])

        projection = project(front_camera(), gaussians)

        torch.testing.assert_close(
            projection.means2d[0],
            torch.tensor([4.0, 4.0], dtype=torch.float64),
        )
        assert bool(projection.visible[0])

    def test__given_isotropic_gaussian__then_covariance_has_low_pass(self):
        gaussians = gaussian_set([[0.0, 0.0, 2.0]], scale=0.1)

        projection = project(front_camera(focal=10.0), gaussians)

        expected = (0.1 * 10.0 / 2.0) ** 2 + 0.3
        torch.testing.assert_close(
            projection.cov2d[0],
            expected * torch.eye(2, dtype=torch.float64),
        )

    def test__given_gaussian_behind_camera__then_culled(self):
        gaussians = gaussian_set([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0]])

        projection = project(front_camera(), gaussians)

        assert projection.visible.tolist() == [False, True]

    def test__given_gaussian_far_off_screen__then_culled(self):
        gaussians = gaussian_set([[50.0, 0.0, 2.0]])

        projection = project(front_camera(), gaussians)

        assert not bool(projection.visible[0])


class TestRasterize:
    def test__given_empty_scene__then_black_and_transparent(self):
        buffers = rasterize(GaussianSet.empty(), front_camera())

        assert torch.equal(buffers.rgb, torch.zeros(8, 8, 3).double())
        assert torch.equal(buffers.alpha, torch.zeros(8, 8).double())
        assert torch.equal(buffers.depth, torch.zeros(8, 8).double())
        assert buffers.object_mask.shape == (8, 8, 0)

    def test__given_background_colour__then_fills_empty_pixels(self):
        buffers = rasterize(
            GaussianSet.empty(), front_camera(), background=(1.0, 1.0, 1.0)
        )

        assert torch.equal(buffers.rgb, torch.ones(8, 8, 3).double())

    def test__given_single_gaussian__then_depth_is_its_distance(self):
        gaussians = gaussian_set([[0.0, 0.0, 2.0]], scale=0.2)

        buffers = rasterize(gaussians, front_camera())

        covered = buffers.alpha > 1e-6
        assert bool(covered[4, 4])
        assert float((buffers.depth[covered] - 2.0).abs().max()) < 1e-6

    def test__given_two_stacked_gaussians__then_front_one_composites_first(
        self,
    ):
        back = gaussian_set(
            [[0.0, 0.0, 3.0]], opacity_logit=0.0, color=(0.0, 1.0, 0.0)
        )
        front = gaussian_set(
            [[0.0, 0.0, 2.0]], opacity_logit=0.0, color=(1.0, 0.0, 0.0)
        )

        buffers = rasterize(GaussianSet.cat([back, front]), front_camera())

        torch.testing.assert_close(
            buffers.rgb[4, 4],
            torch.tensor([0.5, 0.25, 0.0], dtype=torch.float64),
        )
        torch.testing.assert_close(
            buffers.alpha[4, 4], torch.tensor(0.75, dtype=torch.float64)
        )

    def test__given_objects__then_masks_never_exceed_alpha(self):
        gaussians = GaussianSet.cat(
            [
                random_gaussians(30),
                random_gaussians(20, seed=1, object_id=1),
                random_gaussians(20, seed=2, object_id=2),
            ]
        )

        buffers = rasterize(gaussians, front_camera(width=20, height=20))

        assert buffers.object_mask.shape == (20, 20, 2)
        assert (buffers.object_mask >= 0).all()
        total_mask = buffers.object_mask.sum(dim=-1)
        assert (total_mask <= buffers.alpha + 1e-12).all()
        assert (buffers.alpha <= 1.0).all()

    def test__given_thread_counts__then_bit_identical(self):
        gaussians = random_gaussians(60)
        camera = front_camera(width=40, height=40, focal=30.0)

        with patch("splatengine.renderer.CHUNK_BUDGET", 256):
            serial = rasterize(gaussians, camera, threads=1)
            parallel = rasterize(gaussians, camera, threads=4)

        assert torch.equal(serial.rgb, parallel.rgb)
        assert torch.equal(serial.depth, parallel.depth)
        assert torch.equal(serial.alpha, parallel.alpha)

    def test__given_features__then_alpha_normalised_like_depth(self):
        gaussians = gaussian_set([[0.0, 0.0, 2.0]], scale=0.2)
        features = torch.tensor([[3.0, -1.0]], dtype=torch.float64)

        buffers = rasterize(gaussians, front_camera(), features=features)

        torch.testing.assert_close(buffers.features[4, 4], features[0])


class TestRasterizeBackward:
    def test__given_small_scene__then_matches_finite_differences(self):
        gaussians = GaussianSet.cat(
            [
                gaussian_set(
                    [[0.05, 0.02, 2.0]], scale=0.15, opacity_logit=0.5
                ),
                gaussian_set(
                    [[-0.1, 0.05, 2.5]],
                    scale=0.2,
                    opacity_logit=-0.5,
                    color=(0.2, 0.4, 0.9),
                ),
            ]
        )
        camera = front_camera()
        upstream = torch.linspace(0, 1, 8 * 8 * 3, dtype=torch.float64)
        upstream = upstream.reshape(8, 8, 3)

        def loss(centers: torch.Tensor) -> float:
            moved = gaussians.with_updates(centers=centers)
            return float((rasterize(moved, camera).rgb * upstream).sum())

        grads = rasterize_backward(gaussians, camera, {"rgb": upstream})

        step = 1e-6
        numeric = torch.zeros_like(gaussians.centers)
        for i in range(2):
            for j in range(3):
                offset = torch.zeros_like(gaussians.centers)
                offset[i, j] = step
                numeric[i, j] = (
                    loss(gaussians.centers + offset)
                    - loss(gaussians.centers - offset)
                ) / (2 * step)
        torch.testing.assert_close(
            grads.centers, numeric, rtol=1e-4, atol=1e-6
        )

    def test__given_unused_buffer__then_zero_colour_gradient(self):
        gaussians = gaussian_set([[0.0, 0.0, 2.0]])

        grads = rasterize_backward(
            gaussians,
            front_camera(),
            {"alpha": torch.ones(8, 8, dtype=torch.float64)},
        )

        assert torch.equal(grads.colors, torch.zeros(1, 3).double())


class TestRenderAt:
    def test__given_removed_object__then_its_mask_channel_is_empty(self):
        model, deformation = one_object_scene()
        camera = front_camera(width=16, height=16)

        buffers = render_at(model, deformation, camera, 0.5, [1])

        assert buffers.object_mask.shape == (16, 16, 1)
        assert float(buffers.object_mask.abs().max()) == 0.0

    def test__given_static_scene__then_flow_is_zero(self):
        model, deformation = one_object_scene()
        camera = front_camera(width=16, height=16)

        flow = predicted_flow(model, deformation, camera, camera, 0.0, 0.5)

        assert flow.shape == (16, 16, 2)
        assert float(flow.abs().max()) < 1e-9

    def test__given_sideways_camera__then_flow_follows_parallax(self):
        model, deformation = one_object_scene()
        camera = front_camera(width=16, height=16)
        shifted = camera.with_pose(
            RigidTransform.from_translation(
                torch.tensor([0.1, 0.0, 0.0], dtype=torch.float64)
            )
        )

        flow = predicted_flow(model, deformation, camera, shifted, 0.0, 0.5)

        u = flow[..., 0][flow[..., 0].abs() > 1e-12]
        assert u.numel() > 0
        assert float(u.min()) > 0.44
        assert float(u.max()) < 0.58
        assert float(flow[..., 1].abs().max()) < 1e-9

    def test__given_scene_behind_next_camera__then_flow_is_zero(self):
        model, deformation = one_object_scene()
        camera = front_camera(width=16, height=16)
        ahead = camera.with_pose(
            RigidTransform.from_translation(
                torch.tensor([0.0, 0.0, -5.0], dtype=torch.float64)
            )
        )

        flow = predicted_flow(model, deformation, camera, ahead, 0.0, 0.5)

        assert float(flow.abs().max()) == 0.0
