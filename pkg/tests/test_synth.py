"""Synthetic benchmark generation: layout, determinism, mask exactness."""
from __future__ import annotations

import hashlib
from pathlib import Path

import pytest

from anoclass import imgio
from anoclass.dataset import GOOD_CLASS, scan_dataset
from anoclass.synth import SynthConfig, generate_synthetic_benchmark, synthetic_taxonomy

CONFIG = SynthConfig(
    categories=2, train_samples=3, test_good=2, test_per_class=2, image_size=64, seed=5
)


def tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.png")):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_layout_scans_as_mvtec(tmp_path):
    root = generate_synthetic_benchmark(tmp_path / "bench", CONFIG)
    index = scan_dataset(root, "mvtec")
    assert index.categories == tuple(sorted(CONFIG.category_names()))
    for category in index.categories:
        assert index.class_sets[category] == tuple(sorted(CONFIG.anomaly_kinds))
        assert len(index.samples_for(category, "train")) == 3
        assert len(index.samples_for(category, "test")) == 2 + 3 * 2


def test_seeded_tree_is_byte_identical(tmp_path):
    first = generate_synthetic_benchmark(tmp_path / "a", CONFIG)
    second = generate_synthetic_benchmark(tmp_path / "b", CONFIG)
    assert tree_digest(first) == tree_digest(second)
    different = generate_synthetic_benchmark(
        tmp_path / "c", SynthConfig(**{**CONFIG.__dict__, "seed": 6})
    )
    assert tree_digest(first) != tree_digest(different)


def test_masks_match_injected_pixels(tmp_path):
    root = generate_synthetic_benchmark(tmp_path / "bench", CONFIG)
    index = scan_dataset(root, "mvtec")
    for sample in index.samples:
        if sample.split != "test" or sample.anomaly_class == GOOD_CLASS:
            continue
        mask = imgio.load_mask(sample.mask_path)
        assert mask.any()
        # anomalies sit away from the border (margin enforced for blob and
        # color_patch; scratches may clip, so only check blob/patch)
        if sample.anomaly_class in ("blob", "color_patch"):
            assert not mask[0, :].any() and not mask[-1, :].any()


def test_anomalous_images_differ_inside_mask_only(tmp_path):
    # regenerate the same texture without the defect via the good generator
    # seeded identically is not possible; instead check defect visibility:
    # masked pixels differ strongly from the local texture statistics
    root = generate_synthetic_benchmark(tmp_path / "bench", CONFIG)
    index = scan_dataset(root, "mvtec")
    sample = next(
        s for s in index.samples if s.anomaly_class == "blob" and s.split == "test"
    )
    image = imgio.load_rgb(sample.image_path).astype(float)
    mask = imgio.load_mask(sample.mask_path)
    assert abs(image[mask].mean() - image[~mask].mean()) > 30


def test_good_images_have_no_masks(tmp_path):
    root = generate_synthetic_benchmark(tmp_path / "bench", CONFIG)
    index = scan_dataset(root, "mvtec")
    for sample in index.samples:
        if sample.anomaly_class == GOOD_CLASS:
            assert sample.mask_path is None


def test_unknown_kind_rejected(tmp_path):
    config = SynthConfig(categories=1, train_samples=1, test_good=1,
                         test_per_class=1, anomaly_kinds=("wormhole",), seed=0)
    with pytest.raises(ValueError, match="unknown anomaly kind"):
        generate_synthetic_benchmark(tmp_path / "bench", config)


def test_taxonomy_covers_kinds():
    taxonomy = synthetic_taxonomy(CONFIG.category_names(), CONFIG.anomaly_kinds)
    for category in CONFIG.category_names():
        assert set(taxonomy[category].class_descriptions) == set(CONFIG.anomaly_kinds)
        assert taxonomy[category].normal_description
