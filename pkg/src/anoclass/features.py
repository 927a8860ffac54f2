"""Handcrafted multi-scale patch descriptors and greedy coreset selection."""
from __future__ import annotations

import numpy as np

ORIENTATION_BINS = 8


def _downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling; trailing rows/cols beyond a full block are cropped."""
    if factor == 1:
        return image.astype(np.float64)
    h = (image.shape[0] // factor) * factor
    w = (image.shape[1] // factor) * factor
    cropped = image[:h, :w].astype(np.float64)
    return cropped.reshape(
        h // factor, factor, w // factor, factor, image.shape[2]
    ).mean(axis=(1, 3))


def _orientation_bins(gy: np.ndarray, gx: np.ndarray) -> np.ndarray:
    # Orientations are folded to [0, pi/2) so descriptors are invariant under
    # horizontal and vertical mirroring.
    axis_angle = np.mod(np.arctan2(gy, gx), np.pi)
    folded = np.minimum(axis_angle, np.pi - axis_angle)
    bins = np.floor(folded / (np.pi / 2 / ORIENTATION_BINS)).astype(np.intp)
    return np.clip(bins, 0, ORIENTATION_BINS - 1)


def _scale_descriptors(
    image_s: np.ndarray, ys: np.ndarray, xs: np.ndarray, patch_size: int
) -> np.ndarray:
    """Per-location descriptor at one scale: for each channel, patch mean, patch
    std, and an 8-bin gradient-magnitude-weighted orientation histogram."""
    gy, gx = np.gradient(image_s, axis=(0, 1))
    magnitude = np.hypot(gy, gx)
    bins = _orientation_bins(gy, gx)

    window = (patch_size, patch_size)
    views = {
        "img": np.lib.stride_tricks.sliding_window_view(image_s, window, axis=(0, 1)),
        "mag": np.lib.stride_tricks.sliding_window_view(magnitude, window, axis=(0, 1)),
        "bin": np.lib.stride_tricks.sliding_window_view(bins, window, axis=(0, 1)),
    }
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    iy, ix = grid_y.ravel(), grid_x.ravel()

    patches = views["img"][iy, ix]  # (N, C, p, p)
    mags = views["mag"][iy, ix]
    bin_ids = views["bin"][iy, ix]

    mean = patches.mean(axis=(2, 3))
    std = patches.std(axis=(2, 3))
    hist = np.stack(
        [np.where(bin_ids == b, mags, 0.0).sum(axis=(2, 3)) for b in range(ORIENTATION_BINS)],
        axis=-1,
    )  # (N, C, bins)
    return np.concatenate([mean[..., None], std[..., None], hist], axis=-1).reshape(
        len(iy), -1
    )


def extract_patch_features(
    image: np.ndarray,
    patch_size: int = 16,
    stride: int = 8,
    scales: tuple[int, ...] = (1, 2),
) -> tuple[np.ndarray, np.ndarray]:
    """Extract dense patch descriptors from an RGB image.

    Returns ``(locations, descriptors)``: locations is an (N, 2) int array of
    patch top-left ``(row, col)`` coordinates at full resolution; descriptors
    is (N, D) with the per-scale descriptors concatenated per location.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {arr.shape}")
    if not scales:
        raise ValueError("scales must be a non-empty list of integer factors")
    height, width = arr.shape[:2]
    for s in scales:
        if s < 1:
            raise ValueError(f"invalid scale factor {s}")
        if height // s < patch_size or width // s < patch_size:
            raise ValueError(
                f"image of size {height}x{width} is smaller than one "
                f"{patch_size}px patch at scale {s}"
            )

    ys = np.arange(0, height - patch_size + 1, stride)
    xs = np.arange(0, width - patch_size + 1, stride)

    parts = []
    half = patch_size / 2.0
    for s in scales:
        image_s = _downsample(arr, s)
        hs, ws = image_s.shape[:2]
        # Center the scale-s window on the patch center so that mirrored
        # images produce mirrored window sets (clamping is symmetric too).
        sy = np.clip(np.round((ys + half) / s - half), 0, hs - patch_size).astype(np.intp)
        sx = np.clip(np.round((xs + half) / s - half), 0, ws - patch_size).astype(np.intp)
        parts.append(_scale_descriptors(image_s, sy, sx, patch_size))
    descriptors = np.concatenate(parts, axis=1)

    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    locations = np.stack([grid_y.ravel(), grid_x.ravel()], axis=1)
    return locations, descriptors


def coreset_subsample(
    features: np.ndarray, m: int, seed: int, first_index: int | None = None
) -> list[int]:
    """Greedy k-center subset selection.

    The first pick is a seeded uniform choice (or ``first_index`` when given);
    each later pick is the point farthest from the selected set, ties broken
    by lowest index. Returns indices in selection order.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        feats = feats.reshape(len(feats), -1)
    n = len(feats)
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= first_index < n:
        raise ValueError(f"first_index out of range: {first_index}")

    selected = [first_index]
    dists = np.linalg.norm(feats - feats[first_index], axis=1)
    dists[first_index] = -1.0
    for _ in range(m - 1):
        nxt = int(np.argmax(dists))
        selected.append(nxt)
        dists = np.minimum(dists, np.linalg.norm(feats - feats[nxt], axis=1))
        dists[nxt] = -1.0
    return selected
