"""Dataset indexing, declarative refinement, and reference-image selection.

Supports two on-disk layouts:

* ``mvtec``: ``<category>/train/good/*.png``, ``<category>/test/<class>/*.png``
  and ``<category>/ground_truth/<class>/<stem>_mask.png``.
* ``visa_csv``: an image tree described by an annotation CSV with columns
  ``object``, ``split``, ``label``, ``image``, ``mask``.

Refinement specs relabel individual samples, merge classes, drop categories
or classes, and filter classes by minimum test-sample count. Two specs ship
with the package (``mvtec_ac`` and ``visa_ac``) and can be loaded with
:func:`builtin_refinement_spec`.
"""
from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import DatasetError, RefinementError

GOOD_CLASS = "good"
TRAIN = "train"
TEST = "test"

_LAYOUTS = ("mvtec", "visa_csv")
_IMAGE_SUFFIXES = (".png", ".PNG")


@dataclass(frozen=True)
class SampleRecord:
    """One labeled image. ``id`` is the root-relative image path."""

    id: str
    category: str
    split: str
    anomaly_class: str
    image_path: Path
    mask_path: Path | None = None


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable indexed corpus: samples plus per-category anomaly class sets."""

    categories: tuple[str, ...]
    samples: tuple[SampleRecord, ...]
    class_sets: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def samples_for(self, category: str, split: str | None = None) -> list[SampleRecord]:
        return [
            s
            for s in self.samples
            if s.category == category and (split is None or s.split == split)
        ]


def build_index(samples: list[SampleRecord] | tuple[SampleRecord, ...]) -> DatasetIndex:
    """Validate samples and assemble a canonical index (sorted by sample id)."""
    ordered = sorted(samples, key=lambda s: s.id)
    seen: set[str] = set()
    for s in ordered:
        if s.id in seen:
            raise DatasetError(f"duplicate sample id: {s.id}")
        seen.add(s.id)
        if s.split not in (TRAIN, TEST):
            raise DatasetError(f"invalid split {s.split!r} for sample {s.id}")
        if s.split == TRAIN and s.anomaly_class != GOOD_CLASS:
            raise DatasetError(
                f"train sample {s.id} has anomaly class {s.anomaly_class!r}; "
                f"training sets may contain only {GOOD_CLASS!r} samples"
            )
    categories = tuple(sorted({s.category for s in ordered}))
    class_sets = {
        cat: tuple(
            sorted(
                {
                    s.anomaly_class
                    for s in ordered
                    if s.category == cat and s.anomaly_class != GOOD_CLASS
                }
            )
        )
        for cat in categories
    }
    return DatasetIndex(categories=categories, samples=tuple(ordered), class_sets=class_sets)


def _iter_pngs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix in _IMAGE_SUFFIXES and p.is_file())


def _scan_mvtec(root: Path) -> list[SampleRecord]:
    samples: list[SampleRecord] = []
    categories = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not categories:
        raise DatasetError(f"no categories found under {root}")
    for cat in categories:
        cat_dir = root / cat
        count_before = len(samples)
        train_dir = cat_dir / TRAIN
        if train_dir.is_dir():
            for class_dir in sorted(d for d in train_dir.iterdir() if d.is_dir()):
                if class_dir.name != GOOD_CLASS:
                    raise DatasetError(
                        f"unexpected train class directory: {class_dir} "
                        f"(train splits may contain only {GOOD_CLASS!r})"
                    )
                for img in _iter_pngs(class_dir):
                    rel = img.relative_to(root).as_posix()
                    samples.append(
                        SampleRecord(rel, cat, TRAIN, GOOD_CLASS, image_path=img)
                    )
        test_dir = cat_dir / TEST
        if test_dir.is_dir():
            for class_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
                cls = class_dir.name
                images = _iter_pngs(class_dir)
                if not images:
                    raise DatasetError(f"test class directory has no images: {class_dir}")
                gt_dir = cat_dir / "ground_truth" / cls
                for img in images:
                    rel = img.relative_to(root).as_posix()
                    mask_path = None
                    if cls != GOOD_CLASS and gt_dir.is_dir():
                        mask_path = gt_dir / f"{img.stem}_mask.png"
                        if not mask_path.is_file():
                            raise DatasetError(
                                f"mask not found for {img}: expected {mask_path}"
                            )
                    label = GOOD_CLASS if cls == GOOD_CLASS else cls
                    samples.append(
                        SampleRecord(rel, cat, TEST, label, image_path=img, mask_path=mask_path)
                    )
        if len(samples) == count_before:
            raise DatasetError(f"category directory has no samples: {cat_dir}")
    return samples


_VISA_COLUMNS = ("object", "split", "label", "image", "mask")


def _scan_visa_csv(root: Path, csv_path: Path | None) -> list[SampleRecord]:
    csv_path = csv_path or root / "annotations.csv"
    if not csv_path.is_file():
        raise DatasetError(f"annotation CSV not found: {csv_path}")
    samples: list[SampleRecord] = []
    with open(csv_path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in _VISA_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(
                f"annotation CSV {csv_path} is missing required columns: {missing}"
            )
        for row_no, row in enumerate(reader, start=2):
            cat = row["object"].strip()
            split = row["split"].strip()
            label = row["label"].strip()
            image_rel = row["image"].strip()
            mask_rel = (row["mask"] or "").strip()
            if not cat or not split or not label or not image_rel:
                raise DatasetError(f"{csv_path}:{row_no}: empty required field")
            if label.lower() in (GOOD_CLASS, "normal"):
                label = GOOD_CLASS
            image_path = root / image_rel
            if not image_path.is_file():
                raise DatasetError(f"{csv_path}:{row_no}: image not found: {image_path}")
            mask_path = None
            if mask_rel:
                mask_path = root / mask_rel
                if not mask_path.is_file():
                    raise DatasetError(f"{csv_path}:{row_no}: mask not found: {mask_path}")
            samples.append(
                SampleRecord(
                    Path(image_rel).as_posix(), cat, split, label,
                    image_path=image_path, mask_path=mask_path,
                )
            )
    if not samples:
        raise DatasetError(f"no categories found under {root} ({csv_path} has no rows)")
    return samples


def scan_dataset(root: str | Path, layout: str, csv_path: str | Path | None = None) -> DatasetIndex:
    """Index an image tree. ``layout`` is one of ``mvtec`` or ``visa_csv``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    if layout not in _LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {_LAYOUTS}")
    if layout == "mvtec":
        samples = _scan_mvtec(root)
    else:
        samples = _scan_visa_csv(root, Path(csv_path) if csv_path else None)
    return build_index(samples)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelabelEntry:
    id: str
    new_class: str


@dataclass(frozen=True)
class MergeEntry:
    category: str
    sources: tuple[str, ...]
    merged_name: str


@dataclass(frozen=True)
class RefinementSpec:
    """Declarative dataset transformation, applied in a fixed order:
    relabels, merges, category drops, class drops, minimum-sample filter."""

    relabel: tuple[RelabelEntry, ...] = ()
    merges: tuple[MergeEntry, ...] = ()
    drop_categories: tuple[str, ...] = ()
    drop_classes: tuple[tuple[str, str], ...] = ()
    min_samples: int = 0


@dataclass(frozen=True)
class RefinementStats:
    """What a refinement actually changed; useful for audits and fixtures."""

    relabels_applied: int
    merges_applied: int
    categories_dropped: tuple[str, ...]
    classes_dropped: tuple[tuple[str, str], ...]
    classes_dropped_min_samples: tuple[tuple[str, str], ...]
    samples_removed: int


def merged_class_name(sources) -> str:
    """Canonical merged-class name: sources joined with '+' in sorted order."""
    return "+".join(sorted(sources))


def load_refinement_spec(path: str | Path) -> RefinementSpec:
    with open(path, encoding="utf-8") as handle:
        return refinement_spec_from_dict(json.load(handle), source=str(path))


def refinement_spec_from_dict(data: dict, source: str = "<dict>") -> RefinementSpec:
    try:
        relabel = tuple(
            RelabelEntry(id=e["id"], new_class=e["new_class"]) for e in data.get("relabel", [])
        )
        merges = tuple(
            MergeEntry(
                category=e["category"],
                sources=tuple(e["sources"]),
                merged_name=e["merged_name"],
            )
            for e in data.get("merges", [])
        )
        drop_categories = tuple(data.get("drop_categories", []))
        drop_classes = tuple(
            (e["category"], e["class"]) for e in data.get("drop_classes", [])
        )
        min_samples = int(data.get("min_samples", 0))
    except (KeyError, TypeError) as exc:
        raise RefinementError(f"malformed refinement spec {source}: {exc}") from exc
    if min_samples < 0:
        raise RefinementError(f"{source}: min_samples must be non-negative")
    return RefinementSpec(relabel, merges, drop_categories, drop_classes, min_samples)


def builtin_refinement_spec(name: str) -> RefinementSpec:
    """Load one of the shipped specs: ``mvtec_ac`` or ``visa_ac``."""
    ref = resources.files("anoclass.fixtures") / f"{name}.json"
    if not ref.is_file():
        raise RefinementError(f"no builtin refinement spec named {name!r}")
    return refinement_spec_from_dict(json.loads(ref.read_text(encoding="utf-8")), source=name)


def _refine(index: DatasetIndex, spec: RefinementSpec) -> tuple[DatasetIndex, RefinementStats]:
    by_id = {s.id: s for s in index.samples}
    class_sets = {cat: set(classes) for cat, classes in index.class_sets.items()}

    relabels_applied = 0
    for entry in spec.relabel:
        rec = by_id.get(entry.id)
        if rec is None:
            raise RefinementError(f"relabel references unknown sample id: {entry.id}")
        available = class_sets.get(rec.category, set())
        if entry.new_class not in available:
            raise RefinementError(
                f"relabel target class {entry.new_class!r} not present in "
                f"category {rec.category!r}"
            )
        if rec.anomaly_class != entry.new_class:
            by_id[entry.id] = replace(rec, anomaly_class=entry.new_class)
            relabels_applied += 1

    merges_applied = 0
    for merge in spec.merges:
        if merge.category not in class_sets:
            raise RefinementError(f"merge references unknown category: {merge.category!r}")
        if len(set(merge.sources)) != len(merge.sources):
            raise RefinementError(
                f"merge sources for {merge.category!r} contain duplicates: {merge.sources}"
            )
        available = class_sets[merge.category]
        present = [s for s in merge.sources if s in available]
        if not present:
            if merge.merged_name in available:
                continue  # already applied on a previous pass
            raise RefinementError(
                f"merge sources {merge.sources} not found in category {merge.category!r}"
            )
        if merge.merged_name in available and merge.merged_name not in merge.sources:
            raise RefinementError(
                f"merged name {merge.merged_name!r} collides with an existing class "
                f"in category {merge.category!r}"
            )
        missing = [s for s in merge.sources if s not in available]
        if missing:
            raise RefinementError(
                f"merge sources {missing} not found in category {merge.category!r}"
            )
        source_set = set(merge.sources)
        for sid, rec in by_id.items():
            if rec.category == merge.category and rec.anomaly_class in source_set:
                by_id[sid] = replace(rec, anomaly_class=merge.merged_name)
        available.difference_update(source_set)
        available.add(merge.merged_name)
        merges_applied += 1

    categories_dropped = tuple(
        sorted(c for c in set(spec.drop_categories) if c in class_sets)
    )
    if categories_dropped:
        dropset = set(categories_dropped)
        by_id = {sid: rec for sid, rec in by_id.items() if rec.category not in dropset}
        for cat in categories_dropped:
            class_sets.pop(cat)

    classes_dropped = []
    for cat, cls in spec.drop_classes:
        if cat in class_sets and cls in class_sets[cat]:
            classes_dropped.append((cat, cls))
            class_sets[cat].discard(cls)
            by_id = {
                sid: rec
                for sid, rec in by_id.items()
                if not (rec.category == cat and rec.anomaly_class == cls)
            }
    classes_dropped = tuple(sorted(classes_dropped))

    dropped_min = []
    if spec.min_samples > 0:
        counts: dict[tuple[str, str], int] = {}
        for rec in by_id.values():
            if rec.split == TEST and rec.anomaly_class != GOOD_CLASS:
                key = (rec.category, rec.anomaly_class)
                counts[key] = counts.get(key, 0) + 1
        for cat, classes in class_sets.items():
            for cls in list(classes):
                if counts.get((cat, cls), 0) < spec.min_samples:
                    dropped_min.append((cat, cls))
        for cat, cls in dropped_min:
            class_sets[cat].discard(cls)
            by_id = {
                sid: rec
                for sid, rec in by_id.items()
                if not (rec.category == cat and rec.anomaly_class == cls)
            }
    dropped_min = tuple(sorted(dropped_min))

    for cat, classes in class_sets.items():
        if not classes:
            raise RefinementError(
                f"refinement empties the anomaly class set of category {cat!r}"
            )

    refined = build_index(list(by_id.values()))
    stats = RefinementStats(
        relabels_applied=relabels_applied,
        merges_applied=merges_applied,
        categories_dropped=categories_dropped,
        classes_dropped=classes_dropped,
        classes_dropped_min_samples=dropped_min,
        samples_removed=len(index.samples) - len(refined.samples),
    )
    return refined, stats


def apply_refinement(index: DatasetIndex, spec: RefinementSpec) -> DatasetIndex:
    """Apply a refinement spec and return a new index; the input is unmodified."""
    return _refine(index, spec)[0]


def refinement_stats(index: DatasetIndex, spec: RefinementSpec) -> RefinementStats:
    """Report what :func:`apply_refinement` would change, without keeping the result."""
    return _refine(index, spec)[1]


def select_reference(index: DatasetIndex, category: str, seed: int) -> SampleRecord:
    """Deterministically pick a uniform random training (normal) sample."""
    if category not in index.categories:
        raise DatasetError(f"category not in index: {category!r}")
    pool = index.samples_for(category, TRAIN)
    if not pool:
        raise DatasetError(f"category {category!r} has no training samples")
    rng = random.Random(f"{seed}:{category}")
    return pool[rng.randrange(len(pool))]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _sample_to_dict(s: SampleRecord) -> dict:
    return {
        "id": s.id,
        "category": s.category,
        "split": s.split,
        "anomaly_class": s.anomaly_class,
        "image_path": s.image_path.as_posix(),
        "mask_path": s.mask_path.as_posix() if s.mask_path else None,
    }


def index_to_json(index: DatasetIndex) -> str:
    """Serialize an index as a JSON array of samples (byte-deterministic)."""
    return json.dumps(
        [_sample_to_dict(s) for s in index.samples],
        indent=2,
        sort_keys=True,
    ) + "\n"


def save_index(index: DatasetIndex, path: str | Path) -> None:
    Path(path).write_text(index_to_json(index), encoding="utf-8")


def load_index(path: str | Path) -> DatasetIndex:
    with open(path, encoding="utf-8") as handle:
        entries = json.load(handle)
    samples = [
        SampleRecord(
            id=e["id"],
            category=e["category"],
            split=e["split"],
            anomaly_class=e["anomaly_class"],
            image_path=Path(e["image_path"]),
            mask_path=Path(e["mask_path"]) if e.get("mask_path") else None,
        )
        for e in entries
    ]
    return build_index(samples)
