import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from guided_dml.errors import ConfigurationError, RejectedInputError

DEFAULT_CLASSES = ("WW", "WD", "UA", "STR", "BRU", "CYS")
PATCH_SIZE = 256
MAX_OVERLAP = 20
MASK_THRESHOLD = 0.5
MIN_IMAGE_SIZE = 256
WHITEN_EPS = 1e-8
IMAGE_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff")
PATCH_FOLDER = "patches"
SPLIT_MANIFEST = "split_manifest.json"
SYNTHETIC_WAVELENGTH = (8.0, 20.0)
SYNTHETIC_AMPLITUDE = (30.0, 70.0)
SYNTHETIC_NOISE = 20.0


class View(str, Enum):
    SUR = "SUR"
    SEC = "SEC"
    MIX = "MIX"


class ClassLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    index: int = Field(..., ge=0)


def make_class_labels(names: Sequence[str]) -> List[ClassLabel]:
    if len(set(names)) != len(names):
        raise ConfigurationError(f"Duplicated class names: {list(names)}")
    return [ClassLabel(name=name, index=index) for index, name in enumerate(names)]


def default_class_names(n_classes: int) -> List[str]:
    if n_classes <= len(DEFAULT_CLASSES):
        return list(DEFAULT_CLASSES[:n_classes])
    return [f"C{index}" for index in range(n_classes)]


class SourceImage(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    image_id: str
    pixels: np.ndarray
    label: ClassLabel
    view: View
    fragment_mask: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def check_shapes(self) -> "SourceImage":
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"Image {self.image_id} must be HxWx3, got {self.pixels.shape}")
        height, width = self.pixels.shape[:2]
        if height < MIN_IMAGE_SIZE or width < MIN_IMAGE_SIZE:
            raise ValueError(
                f"Image {self.image_id} is {height}x{width}, minimum is {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}"
            )
        if self.fragment_mask is not None and self.fragment_mask.shape != (height, width):
            raise ValueError(f"Mask of {self.image_id} does not match image size {height}x{width}")
        return self


class PatchRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    patch_id: str
    values: np.ndarray
    label: Optional[ClassLabel]
    view: View
    source_image_id: str
    grid_position: Tuple[int, int]

    @model_validator(mode="after")
    def check_values(self) -> "PatchRecord":
        shape = self.values.shape
        if len(shape) != 3 or shape[2] != 3 or shape[0] != shape[1]:
            raise ValueError(f"Patch {self.patch_id} must be a square PxPx3 array, got {shape}")
        return self


class DatasetSplit(BaseModel):
    model_config = ConfigDict(frozen=True)

    train: List[PatchRecord]
    test: List[PatchRecord]
    seed: int
    train_image_ids: List[str]
    test_image_ids: List[str]

    @model_validator(mode="after")
    def check_leakage(self) -> "DatasetSplit":
        shared = set(self.train_image_ids) & set(self.test_image_ids)
        if shared:
            raise ValueError(f"Source images present in both splits: {sorted(shared)}")
        for name, patches, image_ids in (
            ("train", self.train, self.train_image_ids),
            ("test", self.test, self.test_image_ids),
        ):
            unknown = {p.source_image_id for p in patches} - set(image_ids)
            if unknown:
                raise ValueError(f"{name} patches reference unknown images: {sorted(unknown)}")
        return self

    @property
    def class_labels(self) -> List[ClassLabel]:
        labels = {p.label for p in self.train + self.test if p.label is not None}
        return sorted(labels, key=lambda label: label.index)


def whiten(patch_values: np.ndarray) -> np.ndarray:
    """Per-channel standardisation with the patch's own mean and population std.

    Constant channels come out as zeros because the deviation is clamped to
    ``WHITEN_EPS``.
    """
    values = np.asarray(patch_values, dtype=np.float64)
    mean = values.mean(axis=(0, 1), keepdims=True)
    std = values.std(axis=(0, 1), keepdims=True)
    return (values - mean) / np.maximum(std, WHITEN_EPS)


def extract_patches(
    img: SourceImage,
    patch_size: int = PATCH_SIZE,
    max_overlap: int = MAX_OVERLAP,
    mask_threshold: float = MASK_THRESHOLD,
) -> List[PatchRecord]:
    """Cut whitened square patches on a regular grid of stride ``patch_size - max_overlap``.

    No edge-aligned extra patch is added, so neighbouring patches never share
    more than ``max_overlap`` rows or columns.
    """
    height, width = img.pixels.shape[:2]
    if height < patch_size or width < patch_size:
        raise RejectedInputError(
            f"Image {img.image_id} ({height}x{width}) is smaller than the patch size {patch_size}"
        )
    if not 0 <= max_overlap < patch_size:
        raise RejectedInputError(f"max_overlap must be in [0, {patch_size}), got {max_overlap}")

    stride = patch_size - max_overlap
    n_rows = (height - patch_size) // stride + 1
    n_cols = (width - patch_size) // stride + 1

    patches = []
    for row in range(n_rows):
        for col in range(n_cols):
            top, left = row * stride, col * stride
            window = (slice(top, top + patch_size), slice(left, left + patch_size))
            if img.fragment_mask is not None:
                coverage = float(np.mean(img.fragment_mask[window]))
                if coverage < mask_threshold:
                    continue
            patches.append(
                PatchRecord(
                    patch_id=f"{img.image_id}_r{row}_c{col}",
                    values=whiten(img.pixels[window]).astype(np.float32),
                    label=img.label,
                    view=img.view,
                    source_image_id=img.image_id,
                    grid_position=(row, col),
                )
            )
    return patches


def split_dataset(
    images: Sequence[SourceImage],
    train_fraction: float = 0.8,
    seed: int = 0,
    patch_size: int = PATCH_SIZE,
    max_overlap: int = MAX_OVERLAP,
    mask_threshold: float = MASK_THRESHOLD,
) -> DatasetSplit:
    """Split source images per class, then extract patches on each side.

    Splitting happens before patch extraction so that no fragment contributes
    patches to both train and test.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")

    by_class: Dict[int, List[SourceImage]] = {}
    for image in images:
        by_class.setdefault(image.label.index, []).append(image)

    rng = np.random.default_rng(seed)
    train_images, test_images = [], []
    for class_index in sorted(by_class):
        members = sorted(by_class[class_index], key=lambda image: image.image_id)
        if len(members) < 2:
            raise ConfigurationError(
                f"Class {members[0].label.name} has {len(members)} image(s), at least 2 are required"
            )
        order = rng.permutation(len(members))
        n_train = int(np.floor(train_fraction * len(members) + 0.5))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_images.extend(members[i] for i in order[:n_train])
        test_images.extend(members[i] for i in order[n_train:])

    def patches_of(selected: List[SourceImage]) -> List[PatchRecord]:
        return [
            patch
            for image in selected
            for patch in extract_patches(image, patch_size, max_overlap, mask_threshold)
        ]

    split = DatasetSplit(
        train=patches_of(train_images),
        test=patches_of(test_images),
        seed=seed,
        train_image_ids=[image.image_id for image in train_images],
        test_image_ids=[image.image_id for image in test_images],
    )
    logging.info(
        f"Split {len(images)} images into {len(split.train)} train and {len(split.test)} test patches"
    )
    return split


def _class_color(class_index: int, n_classes: int) -> np.ndarray:
    hsv = np.array([[[int(180 * class_index / n_classes), 120, 170]]], dtype=np.uint8)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float64)


def generate_synthetic_dataset(
    n_classes: int,
    images_per_class: int,
    image_size: Tuple[int, int] = (512, 512),
    seed: int = 0,
    view: View = View.SUR,
) -> List[SourceImage]:
    """Procedural stand-in for the endoscopic image set.

    Grating orientation, wavelength and phase are drawn per image from ranges
    shared by every class, so they carry no label information. A class shows
    only in how the texture is spread over the colour channels and in its
    contrast against the sensor noise. SUR images carry a plain grating, SEC
    images a crossed one with the channel mixing rotated by half a class step.
    """
    if n_classes < 2:
        raise ConfigurationError(f"At least 2 classes are required, got {n_classes}")
    if view == View.MIX:
        raise ConfigurationError("Generate SUR and SEC separately and combine them with mix_views")

    height, width = image_size
    labels = make_class_labels(default_class_names(n_classes))
    rng = np.random.default_rng([seed, 0 if view == View.SUR else 1])
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    images = []
    for label in labels:
        base = _class_color(label.index, n_classes)
        chroma = np.pi * label.index / n_classes
        if view == View.SEC:
            chroma += np.pi / (2 * n_classes)
        gains = np.cos(chroma + 2.0 * np.pi * np.arange(3) / 3.0)
        amplitude = SYNTHETIC_AMPLITUDE[0] + np.diff(SYNTHETIC_AMPLITUDE)[0] * label.index / (n_classes - 1)

        for number in range(images_per_class):
            theta = rng.uniform(0.0, np.pi)
            frequency = 2.0 * np.pi / rng.uniform(*SYNTHETIC_WAVELENGTH)
            u = xx * np.cos(theta) + yy * np.sin(theta)
            texture = np.sin(frequency * u + rng.uniform(0.0, 2.0 * np.pi))
            if view == View.SEC:
                v = -xx * np.sin(theta) + yy * np.cos(theta)
                texture *= np.sin(frequency * v + rng.uniform(0.0, 2.0 * np.pi))
            color = base + rng.normal(0.0, 4.0, size=3)
            contrast = amplitude * rng.uniform(0.95, 1.05)
            noise = rng.normal(0.0, SYNTHETIC_NOISE, size=(height, width, 3))
            pixels = color + contrast * texture[..., None] * gains + noise
            images.append(
                SourceImage(
                    image_id=f"{view.value}-{label.name}-{number:03d}",
                    pixels=np.clip(np.rint(pixels), 0, 255).astype(np.uint8),
                    label=label,
                    view=view,
                )
            )
    return images


def mix_views(surface: Sequence[SourceImage], section: Sequence[SourceImage]) -> List[SourceImage]:
    """Union of both views; images keep their own view tag."""
    surface_labels = {image.label for image in surface}
    section_labels = {image.label for image in section}
    if surface_labels != section_labels:
        raise ConfigurationError("SUR and SEC images must share the same class set")
    ids = [image.image_id for image in list(surface) + list(section)]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("Image ids must be unique across views")
    return list(surface) + list(section)


def load_image_tree(
    root: Path, view: View, class_names: Sequence[str] = DEFAULT_CLASSES
) -> List[SourceImage]:
    """Read ``<root>/<view>/<class>/<image>``; ``<stem>_mask.png`` marks fragment pixels."""
    view_dir = Path(root) / view.value
    if not view_dir.is_dir():
        raise ConfigurationError(f"View directory not found: {view_dir}")

    images = []
    for label in make_class_labels(class_names):
        class_dir = view_dir / label.name
        if not class_dir.is_dir():
            raise ConfigurationError(f"Missing directory for class {label.name}: {class_dir}")
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS or path.stem.endswith("_mask"):
                continue
            bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
            if bgr is None:
                raise RejectedInputError(f"Unreadable image file: {path}")
            mask_path = path.with_name(f"{path.stem}_mask.png")
            mask = None
            if mask_path.exists():
                mask = cv2.imread(str(mask_path), cv2.IMREAD_GRAYSCALE) > 0
            images.append(
                SourceImage(
                    image_id=f"{view.value}-{label.name}-{path.stem}",
                    pixels=cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB),
                    label=label,
                    view=view,
                    fragment_mask=mask,
                )
            )
    logging.info(f"Loaded {len(images)} images from {view_dir}")
    return images


def _sidecar(patch: PatchRecord) -> Dict:
    return {
        "patch_id": patch.patch_id,
        "label": None if patch.label is None else patch.label.model_dump(),
        "view": patch.view.value,
        "source_image_id": patch.source_image_id,
        "grid_position": list(patch.grid_position),
    }


def save_patch_store(
    split: DatasetSplit, directory: Path, sources: Sequence[SourceImage] = ()
) -> Path:
    directory = Path(directory)
    patch_dir = directory / PATCH_FOLDER
    patch_dir.mkdir(parents=True, exist_ok=True)

    for patch in split.train + split.test:
        np.save(patch_dir / f"{patch.patch_id}.npy", patch.values)
        with open(patch_dir / f"{patch.patch_id}.json", "w") as file:
            json.dump(_sidecar(patch), file, sort_keys=True)

    manifest = {
        "seed": split.seed,
        "train": [p.patch_id for p in split.train],
        "test": [p.patch_id for p in split.test],
        "train_image_ids": split.train_image_ids,
        "test_image_ids": split.test_image_ids,
        "sources": [
            {"image_id": image.image_id, "label": image.label.name, "view": image.view.value}
            for image in sources
        ],
    }
    manifest_path = directory / SPLIT_MANIFEST
    with open(manifest_path, "w") as file:
        json.dump(manifest, file, indent=2, sort_keys=True)
    logging.info(f"Patch store written to {directory}")
    return manifest_path


def _load_patch(patch_dir: Path, patch_id: str) -> PatchRecord:
    with open(patch_dir / f"{patch_id}.json", "r") as file:
        sidecar = json.load(file)
    label = sidecar["label"]
    return PatchRecord(
        patch_id=sidecar["patch_id"],
        values=np.load(patch_dir / f"{patch_id}.npy"),
        label=None if label is None else ClassLabel(**label),
        view=View(sidecar["view"]),
        source_image_id=sidecar["source_image_id"],
        grid_position=tuple(sidecar["grid_position"]),
    )


def load_patch_store(directory: Path) -> DatasetSplit:
    directory = Path(directory)
    manifest_path = directory / SPLIT_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"Split manifest not found in {directory}")
    with open(manifest_path, "r") as file:
        manifest = json.load(file)

    patch_dir = directory / PATCH_FOLDER
    return DatasetSplit(
        train=[_load_patch(patch_dir, patch_id) for patch_id in manifest["train"]],
        test=[_load_patch(patch_dir, patch_id) for patch_id in manifest["test"]],
        seed=manifest["seed"],
        train_image_ids=manifest["train_image_ids"],
        test_image_ids=manifest["test_image_ids"],
    )


def manifest_digest(manifest_path: Path) -> str:
    with open(manifest_path, "rb") as file:
        return hashlib.sha256(file.read()).hexdigest()
