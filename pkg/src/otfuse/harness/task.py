"""Procedural image-classification task.

Five texture classes drawn on a small square image: horizontal stripes,
vertical stripes, checkerboard, diagonal bands and pixel noise. Every
example is a pure function of ``(seed, index)``; the label is
``index % num_classes`` so any split of consecutive indices whose length is
a multiple of ``num_classes`` is exactly balanced.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..linalg import Rng
from ..model import ArchConfig

CLASS_NAMES = ("horizontal", "vertical", "checkerboard", "diagonal", "noise")

TEST_OFFSET = 1_000_000  # test indices start here, disjoint from training


@dataclass(frozen=True)
class SyntheticTask:
    image_side: int = 12
    patch_side: int = 4
    num_classes: int = 5
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValueError("image_side must be a multiple of patch_side")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side

    def arch(self, **overrides) -> ArchConfig:
        """Default toy architecture matching this task's patch layout."""
        kw = dict(grid_side=self.grid_side, patch_dim=self.patch_dim, num_classes=self.num_classes)
        kw.update(overrides)
        return ArchConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def render(label: int, side: int, rng: Rng) -> np.ndarray:
    """Noise-free texture of class ``label``; ``rng`` picks width, phase, amplitude."""
    r, c = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    u = rng.uniform(4)
    width = 1 + int(u[0] * 2)  # band half-period 1 or 2 pixels
    phase = int(u[1] * 4)
    amp = 0.75 + 0.5 * u[2]
    name = CLASS_NAMES[label]
    if name == "horizontal":
        bits = ((r + phase) // width) % 2
    elif name == "vertical":
        bits = ((c + phase) // width) % 2
    elif name == "checkerboard":
        bits = ((r + phase) // width + (c + phase) // width) % 2
    elif name == "diagonal":
        # width 2 keeps the bands distinct from a one-pixel checkerboard
        s = r + c if u[3] < 0.5 else r - c
        bits = ((s + phase) // 2) % 2
    else:
        bits = (rng.uniform(side * side) < 0.5).reshape(side, side).astype(np.int64)
    return amp * (2.0 * bits - 1.0)


def patchify(image: np.ndarray, patch_side: int) -> np.ndarray:
    """``(H, W)`` -> ``(grid*grid, patch_side*patch_side)``, both row-major."""
    g = image.shape[0] // patch_side
    x = image.reshape(g, patch_side, g, patch_side).transpose(0, 2, 1, 3)
    return x.reshape(g * g, patch_side * patch_side)


def gen_example(task: SyntheticTask, index: int) -> tuple[np.ndarray, int]:
    rng = Rng(task.seed, stream=index + 1)
    label = index % task.num_classes
    image = render(label, task.image_side, rng)
    image = image + task.noise_std * rng.normal(image.size).reshape(image.shape)
    return image, label


def gen_dataset(task: SyntheticTask, count: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``count`` examples from index ``start``: float32 patches ``(count, g*g, p)`` and labels."""
    if count % task.num_classes:
        raise ValueError(f"count {count} is not divisible by {task.num_classes} classes")
    patches = np.empty((count, task.grid_side ** 2, task.patch_dim), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        image, labels[i] = gen_example(task, start + i)
        patches[i] = patchify(image, task.patch_side)
    return patches, labels


def gen_splits(task: SyntheticTask, n_train: int = 2000, n_test: int = 500):
    return gen_dataset(task, n_train), gen_dataset(task, n_test, start=TEST_OFFSET)
