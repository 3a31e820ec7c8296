import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn
from torchvision.models import resnet18, resnet50

from guided_dml.datapipe.main import PATCH_SIZE, PatchRecord
from guided_dml.errors import RejectedInputError

FORMAT_VERSION = 1
STUDENT_EMBEDDING_DIMS = (8, 16, 32, 64, 128, 256, 512, 1024)
PARAMETERS_FILE = "parameters.pt"
CONFIG_FILE = "config.json"
META_FILE = "training_meta.json"


class StreamSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: List[int] = Field([8, 16], min_length=1)
    kernel_size: int = Field(3, ge=1)
    first_stride: int = Field(2, ge=1)
    pool: int = Field(2, ge=1)
    out_spatial: int = Field(4, ge=1)

    @property
    def output_size(self) -> int:
        return self.channels[-1] * self.out_spatial**2


class GlobalSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_dim: int = Field(128, ge=1)


class TeacherConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_classes: int = Field(..., ge=2)
    stream_spec: StreamSpec = StreamSpec()
    global_spec: GlobalSpec = GlobalSpec()
    embedding_dim: int = Field(..., ge=2)
    patch_size: int = PATCH_SIZE


class BackboneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: Literal["shallow", "resnet18", "resnet50"] = "shallow"
    widths: List[int] = Field([16, 32, 64], min_length=1)
    blocks_per_stage: int = Field(1, ge=1)


class StudentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backbone_spec: BackboneSpec = BackboneSpec()
    embedding_dim: int
    n_classes: int = Field(..., ge=2)
    patch_size: int = PATCH_SIZE

    @field_validator("embedding_dim")
    @classmethod
    def check_embedding_dim(cls, value: int) -> int:
        if value not in STUDENT_EMBEDDING_DIMS:
            raise ValueError(f"embedding_dim must be one of {STUDENT_EMBEDDING_DIMS}, got {value}")
        return value


class TrainingMeta(BaseModel):
    seed: int
    epoch: int = 0
    loss_curve: List[Tuple[int, float]] = []


ModelConfig = Union[TeacherConfig, StudentConfig]


class ModelState:
    """A network with the config it was built from and its training history."""

    def __init__(self, config: BaseModel, network: nn.Module, training_meta: TrainingMeta):
        self.config = config
        self.network = network
        self.training_meta = training_meta

    @property
    def parameters(self) -> Dict[str, torch.Tensor]:
        return self.network.state_dict()

    @property
    def kind(self) -> str:
        return type(self.config).__name__.replace("Config", "").lower()


class TeacherNetwork(nn.Module):
    """One convolutional stream per class followed by a shared fully connected head."""

    def __init__(self, config: TeacherConfig):
        super().__init__()
        spec = config.stream_spec
        self.stream_output_size = spec.output_size
        self.streams = nn.ModuleList(self._stream(spec) for _ in range(config.n_classes))
        self.global_head = nn.Sequential(
            nn.Linear(spec.output_size, config.global_spec.hidden_dim),
            nn.ReLU(),
            nn.Linear(config.global_spec.hidden_dim, config.embedding_dim),
        )

    @staticmethod
    def _stream(spec: StreamSpec) -> nn.Sequential:
        layers: List[nn.Module] = []
        in_channels = 3
        for position, channels in enumerate(spec.channels):
            layers += [
                nn.Conv2d(
                    in_channels,
                    channels,
                    spec.kernel_size,
                    stride=spec.first_stride if position == 0 else 1,
                    padding=spec.kernel_size // 2,
                ),
                nn.ReLU(),
                nn.MaxPool2d(spec.pool),
            ]
            in_channels = channels
        layers += [nn.AdaptiveAvgPool2d(spec.out_spatial), nn.Flatten()]
        return nn.Sequential(*layers)

    def forward_local(self, x: torch.Tensor, class_index: torch.Tensor) -> torch.Tensor:
        outputs, positions = [], []
        for stream_index in class_index.unique().tolist():
            selected = torch.nonzero(class_index == stream_index).flatten()
            outputs.append(self.streams[stream_index](x[selected]))
            positions.append(selected)
        order = torch.argsort(torch.cat(positions))
        return torch.cat(outputs)[order]

    def forward_global(self, intermediate: torch.Tensor) -> torch.Tensor:
        return self.global_head(intermediate)

    def forward(self, x: torch.Tensor, class_index: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        local = self.forward_local(x, class_index)
        return local, self.forward_global(local)


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ShallowResNet(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, spec.widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(spec.widths[0]),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        blocks: List[nn.Module] = []
        in_channels = spec.widths[0]
        for stage, width in enumerate(spec.widths):
            for block in range(spec.blocks_per_stage):
                stride = 2 if stage > 0 and block == 0 else 1
                blocks.append(BasicBlock(in_channels, width, stride))
                in_channels = width
        self.stages = nn.Sequential(*blocks)
        self.out_channels = in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))


def build_backbone(spec: BackboneSpec) -> Tuple[nn.Module, int]:
    if spec.arch == "shallow":
        backbone = ShallowResNet(spec)
        return backbone, backbone.out_channels
    network = resnet18(weights=None) if spec.arch == "resnet18" else resnet50(weights=None)
    out_channels = network.fc.in_features
    # drop the average pool and the ImageNet classifier, keep the last feature map
    return nn.Sequential(*list(network.children())[:-2]), out_channels


class StudentNetwork(nn.Module):
    def __init__(self, config: StudentConfig):
        super().__init__()
        self.backbone, channels = build_backbone(config.backbone_spec)
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.embedding = nn.Linear(channels, config.embedding_dim)
        self.classifier = nn.Linear(config.embedding_dim, config.n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        embedding = self.embedding(self.pool(self.backbone(x)))
        return embedding, self.classifier(embedding)


def build_teacher(config: TeacherConfig, seed: int) -> ModelState:
    torch.manual_seed(seed)
    return ModelState(config=config, network=TeacherNetwork(config), training_meta=TrainingMeta(seed=seed))


def build_student(config: StudentConfig, seed: int) -> ModelState:
    torch.manual_seed(seed)
    return ModelState(config=config, network=StudentNetwork(config), training_meta=TrainingMeta(seed=seed))


@contextmanager
def inference(network: nn.Module) -> Iterator[None]:
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        network.train(was_training)


def patches_to_tensor(patches: Sequence[PatchRecord], patch_size: Optional[int] = None) -> torch.Tensor:
    values = np.stack([patch.values for patch in patches])
    if patch_size is not None and values.shape[1:] != (patch_size, patch_size, 3):
        raise RejectedInputError(
            f"Expected {patch_size}x{patch_size}x3 patches, got {values.shape[1:]}"
        )
    return torch.from_numpy(values.astype(np.float32, copy=False)).permute(0, 3, 1, 2).contiguous()


def class_indices(patches: Sequence[PatchRecord]) -> torch.Tensor:
    missing = [patch.patch_id for patch in patches if patch.label is None]
    if missing:
        raise RejectedInputError(f"Teacher routing requires labels, unlabelled patches: {missing[:5]}")
    return torch.tensor([patch.label.index for patch in patches], dtype=torch.long)


def teacher_forward_local(state: ModelState, patch: PatchRecord, class_index: int) -> torch.Tensor:
    if not 0 <= class_index < state.config.n_classes:
        raise RejectedInputError(
            f"class_index {class_index} outside [0, {state.config.n_classes})"
        )
    x = patches_to_tensor([patch], state.config.patch_size)
    with inference(state.network):
        return state.network.forward_local(x, torch.tensor([class_index]))[0]


def teacher_forward_global(state: ModelState, intermediate: torch.Tensor) -> torch.Tensor:
    intermediate = torch.as_tensor(intermediate, dtype=torch.float32)
    expected = state.network.stream_output_size
    if intermediate.shape[-1:] != (expected,):
        raise RejectedInputError(f"Intermediate must have size {expected}, got {tuple(intermediate.shape)}")
    with inference(state.network):
        return state.network.forward_global(intermediate)


def teacher_embed(state: ModelState, patches: Sequence[PatchRecord], batch_size: int = 64) -> torch.Tensor:
    """Each patch goes through its own class stream, then the shared head."""
    embeddings = []
    with inference(state.network):
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            x = patches_to_tensor(chunk, state.config.patch_size)
            embeddings.append(state.network(x, class_indices(chunk))[1])
    return torch.cat(embeddings)


def student_forward(state: ModelState, patch: PatchRecord) -> Tuple[torch.Tensor, torch.Tensor]:
    x = patches_to_tensor([patch], state.config.patch_size)
    with inference(state.network):
        embedding, logits = state.network(x)
    return embedding[0], logits[0]


def embed_patches(
    state: ModelState, patches: Sequence[PatchRecord], batch_size: int = 64
) -> Tuple[torch.Tensor, torch.Tensor]:
    embeddings, logits = [], []
    with inference(state.network):
        for start in range(0, len(patches), batch_size):
            x = patches_to_tensor(patches[start : start + batch_size], state.config.patch_size)
            embedding, logit = state.network(x)
            embeddings.append(embedding)
            logits.append(logit)
    return torch.cat(embeddings), torch.cat(logits)


def penultimate_features(
    state: ModelState, patches: Sequence[PatchRecord], batch_size: int = 64
) -> torch.Tensor:
    """Last spatial feature map of the backbone as (N, H', W', C)."""
    features = []
    with inference(state.network):
        for start in range(0, len(patches), batch_size):
            x = patches_to_tensor(patches[start : start + batch_size], state.config.patch_size)
            features.append(state.network.features(x).permute(0, 2, 3, 1))
    return torch.cat(features)


def extract_penultimate_features(state: ModelState, patch: PatchRecord) -> torch.Tensor:
    return penultimate_features(state, [patch])[0]


def save_checkpoint(state: ModelState, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(state.network.state_dict(), directory / PARAMETERS_FILE)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": state.kind,
        "config": state.config.model_dump(mode="json"),
    }
    with open(directory / CONFIG_FILE, "w") as file:
        json.dump(header, file, indent=2, sort_keys=True)
    with open(directory / META_FILE, "w") as file:
        json.dump(state.training_meta.model_dump(mode="json"), file, indent=2, sort_keys=True)
    return directory


def read_checkpoint_files(directory: Path) -> Tuple[Dict, TrainingMeta, Dict[str, torch.Tensor]]:
    directory = Path(directory)
    if not (directory / PARAMETERS_FILE).exists():
        raise FileNotFoundError(f"Checkpoint not found in {directory}")
    with open(directory / CONFIG_FILE, "r") as file:
        header = json.load(file)
    if header.get("format_version") != FORMAT_VERSION:
        raise RejectedInputError(
            f"Unsupported checkpoint version {header.get('format_version')} in {directory}"
        )
    with open(directory / META_FILE, "r") as file:
        meta = TrainingMeta(**json.load(file))
    parameters = torch.load(directory / PARAMETERS_FILE, weights_only=True)
    return header, meta, parameters


def load_checkpoint(directory: Path) -> ModelState:
    header, meta, parameters = read_checkpoint_files(directory)
    if header["kind"] == "teacher":
        config: ModelConfig = TeacherConfig(**header["config"])
        network: nn.Module = TeacherNetwork(config)
    elif header["kind"] == "student":
        config = StudentConfig(**header["config"])
        network = StudentNetwork(config)
    else:
        raise RejectedInputError(f"Checkpoint in {directory} holds a {header['kind']} model")
    network.load_state_dict(parameters)
    logging.info(f"Loaded {header['kind']} checkpoint from {directory}")
    return ModelState(config=config, network=network, training_meta=meta)
