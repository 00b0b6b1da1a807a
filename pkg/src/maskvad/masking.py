"""Patch-aligned random masking for pseudo-anomaly synthesis.

A mask selects whole patches on the tokenizer grid; the chosen patch
embeddings are later replaced by a learned mask token, turning a normal
input window into its pseudo-anomaly counterpart.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class PatchGrid:
    """Spatial patch layout of a frame: ``rows * cols`` square patches."""

    patch_size: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.patch_size <= 0 or self.rows <= 0 or self.cols <= 0:
            raise ConfigError(f"invalid patch grid {self.rows}x{self.cols}, patch {self.patch_size}")

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if height % patch_size or width % patch_size:
            raise ConfigError(
                f"image {height}x{width} not divisible by patch size {patch_size}"
            )
        return cls(patch_size=patch_size, rows=height // patch_size, cols=width // patch_size)


@dataclass(frozen=True)
class PatchMask:
    """Boolean selection over a patch grid, flat row-major order."""

    grid: PatchGrid
    masked: np.ndarray  # bool, shape (rows*cols,)
    ratio: float
    seed: int

    def __post_init__(self):
        if self.masked.shape != (self.grid.num_patches,):
            raise ShapeError(
                f"mask length {self.masked.shape} does not match grid "
                f"{self.grid.rows}x{self.grid.cols}"
            )

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


def masked_count(ratio: float, num_patches: int) -> int:
    """Number of patches to mask: round(ratio * N), half rounding up.

    Exact rational arithmetic so that e.g. ratio 0.5 on 49 patches gives
    25 regardless of floating-point representation.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    return int(Fraction(ratio) * num_patches + Fraction(1, 2))


def generate_mask(grid: PatchGrid, ratio: float, seed: int) -> PatchMask:
    """Draw a uniformly random patch subset of the exact rounded size."""
    k = masked_count(ratio, grid.num_patches)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(grid.num_patches, size=k, replace=False)
    masked = np.zeros(grid.num_patches, dtype=bool)
    masked[chosen] = True
    return PatchMask(grid=grid, masked=masked, ratio=float(ratio), seed=int(seed))


def apply_mask(token_embeddings: np.ndarray, mask: PatchMask, mask_token: np.ndarray) -> np.ndarray:
    """Replace masked token embeddings with the mask token.

    Unmasked positions pass through bit-identically. Accepts (N, d) or a
    batched (B, N, d) embedding array.
    """
    n = token_embeddings.shape[-2]
    if n != mask.grid.num_patches:
        raise ShapeError(
            f"{n} token embeddings but mask covers {mask.grid.num_patches} patches"
        )
    if mask_token.shape != (token_embeddings.shape[-1],):
        raise ShapeError(
            f"mask token dim {mask_token.shape} does not match embeddings "
            f"dim {token_embeddings.shape[-1]}"
        )
    return np.where(mask.masked[:, None], mask_token, token_embeddings)


def window_seed(global_seed: int, epoch: int, window_index: int, stream: int = 0) -> int:
    """Stateless per-window seed, collision-free within a run.

    Derives a 64-bit seed from (global_seed, epoch, window_index, stream)
    via SeedSequence hashing; safe to call concurrently.
    """
    ss = np.random.SeedSequence((global_seed, epoch, window_index, stream))
    a, b = ss.generate_state(2, dtype=np.uint32)
    return (int(a) << 32) | int(b)
