"""Procedural texture benchmark with pixel-exact ground-truth masks.

Generates an mvtec-layout tree of seeded texture categories. Anomalous test
images carry one injected defect (blob, scratch, or color patch) whose exact
pixel footprint is written as the ground-truth mask.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .prompting import CategoryTaxonomy

ANOMALY_KINDS = ("blob", "color_patch", "scratch")
_TEXTURE_STYLES = ("weave", "specks", "stripes")


@dataclass(frozen=True)
class SynthConfig:
    categories: int = 3
    train_samples: int = 30
    test_good: int = 20
    test_per_class: int = 20
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    image_size: int = 64
    seed: int = 0

    def category_names(self) -> tuple[str, ...]:
        return tuple(
            f"{_TEXTURE_STYLES[i % len(_TEXTURE_STYLES)]}{i:02d}"
            for i in range(self.categories)
        )


def _rng(*parts) -> np.random.Generator:
    token = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _base_texture(style_index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    style = style_index % len(_TEXTURE_STYLES)
    if style == 0:  # woven sines
        field = 0.5 * np.sin(xx * 0.7) + 0.5 * np.sin(yy * 0.7)
        base = np.array([120.0, 110.0, 90.0])
    elif style == 1:  # smoothed speckle field
        noise = rng.normal(0.0, 1.0, (size, size))
        kernel = np.ones((5, 5)) / 25.0
        padded = np.pad(noise, 2, mode="wrap")
        field = np.zeros_like(noise)
        for dy in range(5):
            for dx in range(5):
                field += kernel[dy, dx] * padded[dy : dy + size, dx : dx + size]
        field *= 3.0
        base = np.array([90.0, 125.0, 105.0])
    else:  # diagonal stripes
        field = np.sin((xx + yy) * 0.45)
        base = np.array([105.0, 95.0, 130.0])
    img = base[None, None, :] + field[..., None] * 35.0
    img += rng.normal(0.0, 4.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _inject_anomaly(
    image: np.ndarray, kind: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    size = image.shape[0]
    out = image.astype(np.int16)
    mask = np.zeros((size, size), dtype=bool)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    margin = max(6, size // 8)
    if kind == "blob":
        radius = int(rng.integers(5, 9))
        cy = int(rng.integers(margin, size - margin))
        cx = int(rng.integers(margin, size - margin))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        out[mask] += 85
    elif kind == "scratch":
        y0 = int(rng.integers(margin, size - margin))
        x0 = int(rng.integers(margin, size - margin))
        angle = rng.uniform(0, np.pi)
        length = int(rng.integers(size // 3, size // 2))
        steps = np.linspace(0.0, 1.0, length * 2)
        ys = np.clip(np.round(y0 + np.sin(angle) * length * steps), 0, size - 1).astype(int)
        xs = np.clip(np.round(x0 + np.cos(angle) * length * steps), 0, size - 1).astype(int)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                mask[np.clip(ys + dy, 0, size - 1), np.clip(xs + dx, 0, size - 1)] = True
        out[mask] -= 90
    elif kind == "color_patch":
        side = int(rng.integers(10, 16))
        top = int(rng.integers(margin, size - margin - side))
        left = int(rng.integers(margin, size - margin - side))
        mask[top : top + side, left : left + side] = True
        region = out[mask]
        out[mask] = region[:, [2, 0, 1]] + np.array([40, -30, 25])
    else:
        raise ValueError(f"unknown anomaly kind: {kind!r}")
    return np.clip(out, 0, 255).astype(np.uint8), mask


def generate_synthetic_benchmark(out_dir: str | Path, config: SynthConfig = SynthConfig()) -> Path:
    """Write the benchmark tree under ``out_dir``; fully determined by the seed."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create benchmark directory {root}: {exc}") from exc

    for index, category in enumerate(config.category_names()):
        cat_dir = root / category
        for i in range(config.train_samples):
            rng = _rng(config.seed, category, "train", i)
            image = _base_texture(index, config.image_size, rng)
            imgio.save_rgb(cat_dir / "train" / "good" / f"{i:03d}.png", image)
        for i in range(config.test_good):
            rng = _rng(config.seed, category, "test-good", i)
            image = _base_texture(index, config.image_size, rng)
            imgio.save_rgb(cat_dir / "test" / "good" / f"{i:03d}.png", image)
        for kind in config.anomaly_kinds:
            for i in range(config.test_per_class):
                rng = _rng(config.seed, category, "test", kind, i)
                image = _base_texture(index, config.image_size, rng)
                image, mask = _inject_anomaly(image, kind, rng)
                imgio.save_rgb(cat_dir / "test" / kind / f"{i:03d}.png", image)
                imgio.save_mask(
                    cat_dir / "ground_truth" / kind / f"{i:03d}_mask.png", mask
                )
    return root


_KIND_DESCRIPTIONS = {
    "blob": "A bright round blob where the texture is locally overexposed.",
    "scratch": "A dark thin line scratched across the texture.",
    "color_patch": "A square patch whose colors are shifted and swapped.",
}


def synthetic_taxonomy(
    category_names, anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
) -> dict[str, CategoryTaxonomy]:
    """Prompt content matching the generated benchmark classes."""
    taxonomy = {}
    for category in category_names:
        taxonomy[category] = CategoryTaxonomy(
            category=category,
            normal_description=(
                f"A uniform procedural texture sample of type {category} with a "
                "repeating pattern and no local disruptions."
            ),
            classification_strategy=(
                "Compare the query against the reference texture and classify "
                "the single local disruption by its shape and color: round and "
                "bright, thin and dark, or a square color shift."
            ),
            class_descriptions={
                kind: _KIND_DESCRIPTIONS.get(kind, f"A {kind} defect.")
                for kind in anomaly_kinds
            },
        )
    return taxonomy
