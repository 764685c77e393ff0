"""Reconstruct a dynamic scene and derive renders, metrics and trajectories."""

import importlib
import logging
from functools import partial, wraps
from pathlib import Path
from typing import Callable, Collection, Literal

import pandas as pd
import torch
from pydantic import BaseModel, Field

from .checkpoint import read_checkpoint
from .deformation import DeformationModel, frame_time
from .geometry import RigidTransform
from .pipeline import (
    TrainState,
    check_dataset,
    initialize_state,
    load_checkpoint,
    restore_state,
    train,
)
from .renderer import Camera, RenderBuffers, render_at
from .scene import CanonicalModel, check_object_ids
from .utils.config import RunConfig
from .utils.data.dataset import Dataset, FrameObservation, load_dataset

logger = logging.getLogger(__name__)

SplitType = Literal["train", "eval"]


class ReconstructionOptions(BaseModel):
    dataset: Path | None = Field(
        None, description="Dataset directory to train on or evaluate against."
    )
    checkpoint: Path | None = Field(
        None, description="Checkpoint to evaluate, render or resume."
    )
    resume: bool = Field(
        False,
        description="Rebuild the state from the dataset and continue training "
        "from the checkpoint, instead of loading the checkpoint alone.",
    )
    config: RunConfig = Field(
        default_factory=RunConfig, description="The run configuration."
    )
    title: str = Field(
        "[Sequence title]", description="The title used on charts."
    )


class Reconstruction:
    """A canonical scene with its deformation, and the outputs derived from it.

    Every function under `outputs/` whose `reconstruction` argument is
    annotated `Reconstruction` is attached as a method.
    """

    state: TrainState
    """Model, deformation, proxies and training progress."""
    dataset: Dataset | None = None
    """The dataset in its stored units."""
    scaled_dataset: Dataset | None = None
    """The dataset in model units (depth and translations scaled)."""

    def __init__(self, **options: ReconstructionOptions):
        self.options = ReconstructionOptions(**options)

        self._load_dataset()
        self._initialise_state()
        self._add_output_functions()

    def _add_output_functions(self):
        folder = Path(__file__).parent / "outputs"

        for module in folder.glob("**/*.py"):
            if module.stem == "__init__":
                continue
            python_module = (
                module.relative_to(folder.parent)
                .with_suffix("")
                .as_posix()
                .replace("/", ".")
            )
            module = importlib.import_module("splatengine." + python_module)
            for name in dir(module):
                func = getattr(module, name)
                if not isinstance(func, Callable):
                    continue
                annotations = getattr(func, "__annotations__", {})
                if annotations.get("reconstruction") is not Reconstruction:
                    continue
                wrapped_func = wraps(func)(partial(func, reconstruction=self))
                wrapped_func.__annotations__ = func.__annotations__
                setattr(self, func.__name__, wrapped_func)

    def _load_dataset(self):
        if self.options.dataset is not None:
            self.dataset = load_dataset(self.options.dataset)

    def _initialise_state(self):
        options = self.options
        if options.checkpoint is not None and not options.resume:
            self.state = load_checkpoint(options.checkpoint)
            self.state.config = self.state.config.model_copy(
                update={"threads": options.config.threads}
            )
            if self.dataset is not None:
                check_dataset(self.state, self.dataset)
        else:
            if self.dataset is None:
                raise ValueError(
                    "A dataset is required to build a new reconstruction."
                )
            self.state = initialize_state(
                options.config, self.dataset.scaled(options.config.scene_scale)
            )
            if options.checkpoint is not None:
                restore_state(self.state, read_checkpoint(options.checkpoint))
        if self.dataset is not None:
            self.scaled_dataset = self.dataset.scaled(self.scene_scale)

    @property
    def model(self) -> CanonicalModel:
        return self.state.model

    @property
    def deformation(self) -> DeformationModel:
        return self.state.deformation

    @property
    def object_count(self) -> int:
        return self.state.object_count

    @property
    def frame_count(self) -> int:
        return self.state.deformation.frame_count

    @property
    def scene_scale(self) -> float:
        return self.state.scene_scale

    def train(self, checkpoint_dir: str | Path | None = None) -> TrainState:
        """Run the remaining training stages on the dataset."""
        if self.scaled_dataset is None:
            raise ValueError("Training needs a dataset.")
        return train(self.state, self.scaled_dataset, checkpoint_dir)

    def loss_log(self) -> pd.DataFrame:
        """Logged loss terms, one row per recorded iteration."""
        return pd.DataFrame(self.state.history)

    def check_object_ids(self, object_ids: Collection[int]) -> None:
        check_object_ids(object_ids, self.object_count)

    def frames(self, split: SplitType = "train") -> list[FrameObservation]:
        """Observations of a split, in model units."""
        if self.scaled_dataset is None:
            raise ValueError("This reconstruction has no dataset attached.")
        if split == "train":
            return self.scaled_dataset.frames
        return self.scaled_dataset.eval_frames

    def camera(self, frame: FrameObservation, split: SplitType) -> Camera:
        """The recovered camera for an observation.

        Training views use G_b(t). Held-out views keep their fixed rig
        offset from the training camera of the same instant.
        """
        index = frame.time_index
        t = frame_time(index, self.frame_count)
        pose = self.deformation.camera_pose(t).detach()
        if split == "eval":
            train_pose = self.scaled_dataset.frames[index].camera
            rig = frame.camera.world_to_camera.compose(
                train_pose.world_to_camera.inverse()
            )
            pose = rig.compose(pose)
        return frame.camera.with_pose(pose)

    def render(
        self,
        camera: Camera,
        t: float,
        removed_objects: Collection[int] = (),
    ) -> RenderBuffers:
        """Render the composed scene at time t without tracking gradients."""
        self.check_object_ids(removed_objects)
        with torch.no_grad():
            return render_at(
                self.model,
                self.deformation,
                camera,
                t,
                removed_objects,
                threads=self.state.config.threads,
            )

    def actor_pose(self, object_id: int, t: float) -> RigidTransform:
        """A(t): the actor's root frame expressed in world coordinates."""
        self.check_object_ids([object_id])
        return self.deformation.root_pose(object_id, t).inverse().detach()
