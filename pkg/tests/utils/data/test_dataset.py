import json

import pytest
import torch

from splatengine.constants import MANIFEST_NAME
from splatengine.utils.data.dataset import (
    DatasetError,
    load_dataset,
    normals_from_depth,
    save_dataset,
)
from splatengine.utils.data.tensor_file import read_tensor, write_tensor
from tests.fixtures.scenes import front_camera


def dataset_files(path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.fixture
def dataset_copy(tmp_path, tiny_dataset):
    path = tmp_path / "dataset"
    save_dataset(tiny_dataset, path)
    return path


def edit_manifest(path, **changes) -> None:
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    manifest.update(changes)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))


class TestSaveAndLoadDataset:
    def test__given_saved_dataset__then_loads_same_observations(
        self, dataset_copy, tiny_dataset
    ):
        loaded = load_dataset(dataset_copy)

        assert loaded.frame_count == 3
        assert len(loaded.eval_frames) == 3
        assert loaded.object_count == 1
        assert loaded.name == tiny_dataset.name
        original = tiny_dataset.frames
        assert torch.equal(loaded.frames[1].depth, original[1].depth)
        assert torch.equal(loaded.frames[0].masks, original[0].masks)
        assert loaded.frames[-1].flow_to_next is None
        assert loaded.frames[0].flow_to_next.shape == (12, 16, 2)

    def test__given_loaded_dataset__then_resave_is_byte_identical(
        self, dataset_copy, tmp_path
    ):
        again = tmp_path / "again"

        save_dataset(load_dataset(dataset_copy), again)

        assert dataset_files(again) == dataset_files(dataset_copy)

    def test__given_missing_depth__then_error_names_frame(self, dataset_copy):
        (dataset_copy / "frame_00001_depth.hgst").unlink()

        with pytest.raises(DatasetError, match="Frame 1: depth file"):
            load_dataset(dataset_copy)

    def test__given_missing_flow__then_error_names_channel(
        self, dataset_copy
    ):
        manifest = json.loads((dataset_copy / MANIFEST_NAME).read_text())
        manifest["frames"][0]["flow"] = None
        (dataset_copy / MANIFEST_NAME).write_text(json.dumps(manifest))

        with pytest.raises(DatasetError, match="channel 'flow' is missing"):
            load_dataset(dataset_copy)

    def test__given_wrong_mask_channels__then_raises(self, dataset_copy):
        write_tensor(
            dataset_copy / "frame_00002_masks.hgst",
            read_tensor(dataset_copy / "frame_00002_masks.hgst")[..., :0],
        )

        with pytest.raises(DatasetError, match="Frame 2: masks has shape"):
            load_dataset(dataset_copy)

    def test__given_negative_depth__then_raises(self, dataset_copy):
        depth = read_tensor(dataset_copy / "frame_00000_depth.hgst")
        depth[0, 0] = -1.0
        write_tensor(dataset_copy / "frame_00000_depth.hgst", depth)

        with pytest.raises(DatasetError, match="negative"):
            load_dataset(dataset_copy)

    def test__given_other_version__then_raises(self, dataset_copy):
        edit_manifest(dataset_copy, version=2)

        with pytest.raises(DatasetError, match="version 2"):
            load_dataset(dataset_copy)

    def test__given_frame_count_mismatch__then_raises(self, dataset_copy):
        edit_manifest(dataset_copy, frame_count=4)

        with pytest.raises(DatasetError, match="declares 4"):
            load_dataset(dataset_copy)

    def test__given_no_manifest__then_raises(self, tmp_path):
        with pytest.raises(DatasetError, match=MANIFEST_NAME):
            load_dataset(tmp_path)


class TestScaledDataset:
    def test__given_scale__then_depth_and_translations_scale(
        self, tiny_dataset
    ):
        scaled = tiny_dataset.scaled(0.5)

        frame, original = scaled.frames[0], tiny_dataset.frames[0]
        assert torch.equal(frame.depth, original.depth * 0.5)
        torch.testing.assert_close(
            frame.camera.world_to_camera.translation,
            original.camera.world_to_camera.translation * 0.5,
        )
        assert torch.equal(frame.rgb, original.rgb)

    def test__given_unit_scale__then_same_dataset(self, tiny_dataset):
        assert tiny_dataset.scaled(1.0) is tiny_dataset


class TestNormalsFromDepth:
    def test__given_fronto_parallel_plane__then_normals_face_camera(self):
        camera = front_camera()
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)

        normals, valid = normals_from_depth(depth, camera)

        assert bool(valid[1:-1, 1:-1].all())
        assert not bool(valid[0].any())
        torch.testing.assert_close(
            normals[4, 4], torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64)
        )

    def test__given_depth_step__then_edge_pixels_invalid(self):
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        depth[:, 4:] = 3.0

        _, valid = normals_from_depth(depth, front_camera())

        assert not bool(valid[4, 3]) and not bool(valid[4, 4])
        assert bool(valid[4, 2])
