"""Mask-to-contour tracing and red-outline rendering.

Contours are traced with Moore-neighbor tracing (Jacob's stopping criterion)
around every 8-connected foreground component, including the boundaries of
enclosed holes. The union of traced points equals the set of foreground
pixels with a background 4-neighbor (the image border counts as background).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import AnoclassError

# Moore neighborhood in clockwise order, starting north, as (drow, dcol).
_MOORE = (
    (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1),
)
_EIGHT_CONN = np.ones((3, 3), dtype=int)
_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass(frozen=True)
class Contour:
    """Closed boundary walk: consecutive points (and first/last) are 8-neighbors."""

    points: tuple[tuple[int, int], ...]  # (x, y) pixel coordinates
    hole: bool = False


@dataclass(frozen=True)
class OverlayStyle:
    color: tuple[int, int, int] = (255, 0, 0)
    line_width: int = 3

    def __post_init__(self):
        if self.line_width < 1:
            raise ValueError(f"line_width must be >= 1, got {self.line_width}")


def _trace(mask: np.ndarray, start: tuple[int, int], backtrack: tuple[int, int]) -> list:
    """Moore-neighbor boundary walk from ``start`` with initial backtrack
    pixel ``backtrack``.

    Stops when the (pixel, backtrack) walk state repeats. For closed loops
    this is exactly the classical criterion (re-entering the start pixel from
    the original direction); the state check additionally terminates on thin
    structures whose orbit re-enters the start pixel from a new direction.
    """
    height, width = mask.shape

    def foreground(pos):
        r, c = pos
        return 0 <= r < height and 0 <= c < width and mask[r, c]

    points = [start]
    state = (start, backtrack)
    seen: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    while state not in seen:
        seen.add(state)
        current, back = state
        ring = [(current[0] + dr, current[1] + dc) for dr, dc in _MOORE]
        try:
            back_idx = ring.index(back)
        except ValueError:  # pragma: no cover - backtrack is always 8-adjacent
            raise AnoclassError("contour tracing lost its backtrack pixel")
        found = None
        for step in range(1, 9):
            candidate = ring[(back_idx + step) % 8]
            if foreground(candidate):
                found = candidate
                prev = ring[(back_idx + step - 1) % 8]
                break
        if found is None:
            break  # isolated pixel
        state = (found, prev)
        if state not in seen:
            points.append(found)
    return points


def _first_pixels(labels: np.ndarray, count: int) -> dict[int, tuple[int, int]]:
    """Row-major first pixel per label (the topmost-leftmost pixel)."""
    firsts: dict[int, tuple[int, int]] = {}
    flat = labels.ravel()
    width = labels.shape[1]
    for idx in np.flatnonzero(flat):
        label = int(flat[idx])
        if label not in firsts:
            firsts[label] = (int(idx) // width, int(idx) % width)
            if len(firsts) == count:
                break
    return firsts


def extract_contours(mask: np.ndarray, min_area: int = 4) -> list[Contour]:
    """Trace boundaries of every 8-connected component with area >= min_area,
    ordered by each component's topmost-leftmost pixel, holes after their
    component's outer contour."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        return []

    labels, n_components = ndimage.label(mask, structure=_EIGHT_CONN)
    areas = np.bincount(labels.ravel(), minlength=n_components + 1)
    firsts = _first_pixels(labels, n_components)

    # Holes: 4-connected background regions that do not touch the image border.
    bg_labels, n_bg = ndimage.label(~mask, structure=_FOUR_CONN)
    border = np.concatenate(
        [bg_labels[0, :], bg_labels[-1, :], bg_labels[:, 0], bg_labels[:, -1]]
    )
    exterior = set(np.unique(border[border > 0]).tolist())
    holes_by_owner: dict[int, list[tuple[int, int]]] = {}
    if n_bg:
        bg_firsts = _first_pixels(bg_labels, n_bg)
        for bg_label, (row, col) in bg_firsts.items():
            if bg_label in exterior:
                continue
            # The pixel above a hole's first pixel is foreground of the
            # surrounding component (a background pixel there would belong to
            # the same 4-connected region and occur earlier in scan order).
            owner = int(labels[row - 1, col])
            holes_by_owner.setdefault(owner, []).append((row, col))

    contours: list[Contour] = []
    for label in sorted(firsts, key=lambda lab: firsts[lab]):
        if areas[label] < min_area:
            continue
        row, col = firsts[label]
        outer = _trace(mask, (row, col), (row, col - 1))
        contours.append(Contour(tuple((c, r) for r, c in outer), hole=False))
        for hole_row, hole_col in sorted(holes_by_owner.get(label, [])):
            walk = _trace(mask, (hole_row - 1, hole_col), (hole_row, hole_col))
            contours.append(Contour(tuple((c, r) for r, c in walk), hole=True))
    return contours


@lru_cache(maxsize=None)
def _disc_offsets(line_width: int) -> tuple[tuple[int, int], ...]:
    radius = line_width / 2.0
    reach = int(np.floor(radius))
    offsets = [
        (dx, dy)
        for dy in range(-reach, reach + 1)
        for dx in range(-reach, reach + 1)
        if dx * dx + dy * dy <= radius * radius
    ]
    return tuple(offsets)


def render_overlay(
    image: np.ndarray, contours: list[Contour], style: OverlayStyle = OverlayStyle()
) -> np.ndarray:
    """Paint every contour point, dilated to a disc of ``line_width`` diameter,
    onto a copy of the image. Pixels outside the discs are untouched."""
    img = np.array(image, dtype=np.uint8, copy=True)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    height, width = img.shape[:2]
    offsets = _disc_offsets(style.line_width)
    color = np.asarray(style.color, dtype=np.uint8)
    for contour in contours:
        if not contour.points:
            continue
        pts = np.asarray(contour.points, dtype=np.intp)
        if (
            pts[:, 0].min() < 0
            or pts[:, 0].max() >= width
            or pts[:, 1].min() < 0
            or pts[:, 1].max() >= height
        ):
            raise ValueError("contour point out of image bounds")
        for dx, dy in offsets:
            xs = pts[:, 0] + dx
            ys = pts[:, 1] + dy
            keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
            img[ys[keep], xs[keep]] = color
    return img
