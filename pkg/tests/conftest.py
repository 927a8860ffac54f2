"""Shared fixtures: dataset skeleton builders and the synthetic benchmark."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from anoclass.dataset import scan_dataset
from anoclass.synth import SynthConfig, generate_synthetic_benchmark, synthetic_taxonomy

DATA_DIR = Path(__file__).parent / "data"


def load_json(name: str):
    return json.loads((DATA_DIR / name).read_text(encoding="utf-8"))


def build_mvtec_skeleton(root: Path, spec: dict) -> Path:
    """Create an empty-file directory tree mirroring an mvtec-layout dataset."""
    for category, entry in spec.items():
        cat = root / category
        for i in range(entry["train_good"]):
            path = cat / "train" / "good" / f"{i:03d}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch()
        for i in range(entry["test_good"]):
            path = cat / "test" / "good" / f"{i:03d}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch()
        for cls, count in entry["test"].items():
            for i in range(count):
                img = cat / "test" / cls / f"{i:03d}.png"
                img.parent.mkdir(parents=True, exist_ok=True)
                img.touch()
                mask = cat / "ground_truth" / cls / f"{i:03d}_mask.png"
                mask.parent.mkdir(parents=True, exist_ok=True)
                mask.touch()
    return root


def build_visa_skeleton(root: Path, spec: dict) -> Path:
    """Create an image tree plus annotation CSV for the visa_csv layout."""
    rows = []
    for category, entry in spec.items():
        for i in range(entry["train_good"]):
            rel = f"{category}/train/good/{i:03d}.png"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            (root / rel).touch()
            rows.append((category, "train", "good", rel, ""))
        for i in range(entry["test_good"]):
            rel = f"{category}/test/good/{i:03d}.png"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            (root / rel).touch()
            rows.append((category, "test", "normal", rel, ""))
        for cls, count in entry["test"].items():
            for i in range(count):
                rel = f"{category}/test/{cls}/{i:03d}.png"
                mask_rel = f"{category}/ground_truth/{cls}/{i:03d}_mask.png"
                for r in (rel, mask_rel):
                    (root / r).parent.mkdir(parents=True, exist_ok=True)
                    (root / r).touch()
                rows.append((category, "test", cls, rel, mask_rel))
    with open(root / "annotations.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["object", "split", "label", "image", "mask"])
        writer.writerows(rows)
    return root


@pytest.fixture(scope="session")
def mvtec_skeleton_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("mvtec_skel")
    build_mvtec_skeleton(root, load_json("mvtec_skeleton.json"))
    return scan_dataset(root, "mvtec")


@pytest.fixture(scope="session")
def visa_skeleton_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("visa_skel")
    build_visa_skeleton(root, load_json("visa_skeleton.json"))
    return scan_dataset(root, "visa_csv")


SMALL_SYNTH = SynthConfig(
    categories=2, train_samples=8, test_good=4, test_per_class=3, image_size=64, seed=11
)

FULL_SYNTH = SynthConfig(
    categories=3, train_samples=30, test_good=20, test_per_class=20, image_size=64, seed=0
)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """Tiny benchmark for fast pipeline tests: (root, index, taxonomy)."""
    root = tmp_path_factory.mktemp("synth_small")
    generate_synthetic_benchmark(root, SMALL_SYNTH)
    index = scan_dataset(root, "mvtec")
    taxonomy = synthetic_taxonomy(SMALL_SYNTH.category_names(), SMALL_SYNTH.anomaly_kinds)
    return root, index, taxonomy


@pytest.fixture(scope="session")
def full_synth(tmp_path_factory):
    """Acceptance-sized benchmark: 3 categories x 3 kinds x 20 test samples."""
    root = tmp_path_factory.mktemp("synth_full")
    generate_synthetic_benchmark(root, FULL_SYNTH)
    index = scan_dataset(root, "mvtec")
    taxonomy = synthetic_taxonomy(FULL_SYNTH.category_names(), FULL_SYNTH.anomaly_kinds)
    return root, index, taxonomy


def replay_eval_config(backend, cache_dir, parallelism: int = 1):
    """The canonical run configuration behind the shipped replay corpus and
    golden report; the corpus generator and the determinism acceptance test
    must build the exact same requests."""
    from anoclass.experts import OracleExpert
    from anoclass.gateway import BackendConfig
    from anoclass.harness import EvalConfig

    return EvalConfig(
        expert=OracleExpert(),
        backend=backend,
        backend_config=BackendConfig(kind="echo", model="mock-echo"),
        reference_seed=0,
        cache_dir=cache_dir,
        parallelism=parallelism,
    )
