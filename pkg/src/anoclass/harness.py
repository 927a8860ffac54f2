"""End-to-end evaluation runs: classification, triage, and prompt ablations.

The pipeline per sample: the vision expert screens the image; a normal
verdict terminates the run for that sample (recorded as the reserved ``Good``
prediction, no backend call); otherwise the detection mask is traced into red
contours, the multimodal request is assembled, and the backend classifies.
All randomness is derived from named seeds, and reports are deterministic
reductions over the completed record set, so parallel and sequential runs
emit byte-identical reports.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
import random
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import imgio
from .dataset import GOOD_CLASS, TEST, DatasetIndex, SampleRecord, select_reference
from .errors import ConfigError, GatewayError
from .gateway import (
    BackendConfig,
    MockBackend,
    Prediction,
    ResponseCache,
    classify,
    resize_and_encode,
)
from .metrics import (
    PREDICTED_GOOD,
    UNPARSED,
    MetricsReport,
    aggregate_report,
    category_metrics,
    confusion_matrix,
)
from .overlay import OverlayStyle, extract_contours, render_overlay
from .prompting import (
    AblationFlags,
    CategoryTaxonomy,
    assemble_request,
    validate_taxonomy,
)

TRIAGE_NORMAL = "Normal"
TRIAGE_ANOMALY = "Anomaly"
TRIAGE_DEFECT = "Defect"
TRIAGE_CLASSES = (TRIAGE_NORMAL, TRIAGE_ANOMALY, TRIAGE_DEFECT)
TRIAGE_TOTAL = "Total"


@dataclass(frozen=True)
class EvalConfig:
    """One evaluation run: expert, backend, prompt flags, and plumbing."""

    expert: object
    backend: object
    backend_config: BackendConfig
    flags: AblationFlags = AblationFlags()
    reference_seed: int = 0
    cache_dir: Path | None = None
    overlay_dir: Path | None = None
    strict: bool = False
    parallelism: int = 1
    overlay_style: OverlayStyle = OverlayStyle()

    def __post_init__(self):
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")


@dataclass(frozen=True)
class PredictionRecord:
    """One evaluated sample, joinable back to the dataset and the cache."""

    sample_id: str
    category: str
    true_class: str
    predicted_class: str
    expert_verdict: bool
    flags_label: str
    raw_text: str
    cache_key: str | None
    cached: bool
    latency_ms: float

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "category": self.category,
            "true_class": self.true_class,
            "predicted_class": self.predicted_class,
            "expert_verdict": self.expert_verdict,
            "flags": self.flags_label,
            "raw_text": self.raw_text,
            "cache_key": self.cache_key,
            "cached": self.cached,
            "latency_ms": self.latency_ms,
        }


def config_digest(cfg: EvalConfig) -> str:
    """Digest of the result-affecting configuration only, so runs that differ
    merely in parallelism or caching produce identical reports."""
    payload = {
        "expert": type(cfg.expert).__name__,
        "model": cfg.backend_config.model,
        "temperature": cfg.backend_config.temperature,
        "max_tokens": cfg.backend_config.max_tokens,
        "flags": cfg.flags.label(),
        "reference_seed": cfg.reference_seed,
        "overlay": [list(cfg.overlay_style.color), cfg.overlay_style.line_width],
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()


def effective_overlay_style(style: OverlayStyle, image_shape) -> OverlayStyle:
    """Contours are drawn at native resolution before the gateway resize, so
    the line width scales with the resize factor to stay >= 2 px afterwards."""
    factor = max(image_shape[0], image_shape[1]) / 448.0
    if factor <= 1.0:
        return style
    return replace(style, line_width=max(style.line_width, math.ceil(2.0 * factor)))


def _overlay_cache_path(overlay_dir: Path, sample_id: str) -> Path:
    base = overlay_dir / sample_id
    return base.with_name(base.name + "_vp.png")


def _classify_sample(
    sample: SampleRecord,
    entry: CategoryTaxonomy,
    class_names,
    reference_image: np.ndarray | None,
    cfg: EvalConfig,
    cache: ResponseCache | None,
    good_label: str,
) -> PredictionRecord:
    image = imgio.load_rgb(sample.image_path)
    detection = cfg.expert.detect(image, sample)
    flags_label = cfg.flags.label()
    if not detection.is_anomalous:
        return PredictionRecord(
            sample_id=sample.id,
            category=sample.category,
            true_class=sample.anomaly_class,
            predicted_class=good_label,
            expert_verdict=False,
            flags_label=flags_label,
            raw_text="",
            cache_key=None,
            cached=False,
            latency_ms=0.0,
        )

    overlay_image = None
    if cfg.flags.visual_prompt:
        style = effective_overlay_style(cfg.overlay_style, image.shape)
        contours = extract_contours(detection.mask)
        overlay_image = render_overlay(image, contours, style)
        if cfg.overlay_dir is not None:
            imgio.save_rgb(_overlay_cache_path(cfg.overlay_dir, sample.id), overlay_image)

    request = assemble_request(
        reference_image if cfg.flags.reference_image else None,
        image,
        overlay_image,
        entry,
        cfg.flags,
        class_names=class_names,
    )
    try:
        prediction = classify(
            request, cfg.backend, cfg.backend_config, cache, sample_id=sample.id
        )
    except GatewayError:
        if cfg.strict:
            raise
        prediction = Prediction(
            sample_id=sample.id,
            predicted_class=UNPARSED,
            raw_text="",
            cached=False,
            latency_ms=0.0,
        )
    return PredictionRecord(
        sample_id=sample.id,
        category=sample.category,
        true_class=sample.anomaly_class,
        predicted_class=prediction.predicted_class,
        expert_verdict=True,
        flags_label=flags_label,
        raw_text=prediction.raw_text,
        cache_key=prediction.cache_key,
        cached=prediction.cached,
        latency_ms=prediction.latency_ms,
    )


def _run_tasks(tasks, parallelism: int):
    if parallelism == 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


def run_classification_eval(
    index: DatasetIndex,
    taxonomy: dict[str, CategoryTaxonomy],
    cfg: EvalConfig,
) -> tuple[MetricsReport, list[PredictionRecord]]:
    """Evaluate anomaly classification over all anomalous test samples.

    Samples the expert judges normal are recorded as ``Good`` (an error
    against their true class) without any backend call.
    """
    validate_taxonomy(taxonomy, index)
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None

    references: dict[str, np.ndarray | None] = {}
    for category in index.categories:
        if cfg.flags.reference_image:
            ref_sample = select_reference(index, category, cfg.reference_seed)
            references[category] = imgio.load_rgb(ref_sample.image_path)
        else:
            references[category] = None

    eval_samples = [
        s for s in index.samples if s.split == TEST and s.anomaly_class != GOOD_CLASS
    ]
    tasks = [
        (
            lambda s=sample: _classify_sample(
                s,
                taxonomy[s.category],
                index.class_sets[s.category],
                references[s.category],
                cfg,
                cache,
                PREDICTED_GOOD,
            )
        )
        for sample in eval_samples
    ]
    records = sorted(_run_tasks(tasks, cfg.parallelism), key=lambda r: r.sample_id)

    per_category = []
    for category in index.categories:
        cat_records = [
            (r.true_class, r.predicted_class) for r in records if r.category == category
        ]
        if not cat_records:
            continue
        matrix = confusion_matrix(cat_records, index.class_sets[category])
        per_category.append(category_metrics(category, matrix))
    report = aggregate_report(per_category)
    return report, records


def write_records(records, path: str | Path) -> None:
    """Newline-delimited JSON prediction log, ordered by sample id."""
    lines = [
        json.dumps(r.to_dict(), sort_keys=True)
        for r in sorted(records, key=lambda r: r.sample_id)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def classification_report_json(report: MetricsReport, cfg: EvalConfig) -> str:
    from .metrics import report_to_dict

    return json.dumps(
        report_to_dict(report, config_digest(cfg)), indent=2, sort_keys=True
    ) + "\n"


# ---------------------------------------------------------------------------
# Anomaly-vs-defect triage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriageConfig:
    negligible_fraction: float = 0.30
    num_seeds: int = 5
    seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0 < self.negligible_fraction < 1:
            raise ConfigError(
                f"negligible_fraction must be in (0, 1), got {self.negligible_fraction}"
            )
        if self.num_seeds < 1:
            raise ConfigError(f"num_seeds must be >= 1, got {self.num_seeds}")
        if self.seeds is not None and not self.seeds:
            raise ConfigError("explicit seed list must be non-empty")

    def resolved_seeds(self) -> tuple[int, ...]:
        return tuple(self.seeds) if self.seeds is not None else tuple(range(self.num_seeds))


def triage_partition(class_set, fraction: float, seed: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Deterministically split a class set into (negligible, defect) groups.

    Picks ceil(fraction * n) classes, clamped to [1, n - 1], via an RNG seeded
    from the seed and the ordered class set.
    """
    classes = tuple(class_set)
    if len(classes) < 2:
        raise ValueError("triage partition needs at least two anomaly classes")
    count = math.ceil(fraction * len(classes))
    count = min(max(count, 1), len(classes) - 1)
    rng = random.Random(f"{seed}|{','.join(classes)}")
    negligible = tuple(sorted(rng.sample(list(classes), count)))
    defect = tuple(c for c in classes if c not in negligible)
    return negligible, defect


def build_triage_taxonomy(
    entry: CategoryTaxonomy, negligible, defect
) -> CategoryTaxonomy:
    """Rewrite a category's target set to the three triage superclasses."""
    return CategoryTaxonomy(
        category=entry.category,
        normal_description=entry.normal_description,
        classification_strategy=(
            "Decide whether the highlighted deviation is acceptable for "
            "production or requires intervention. Choose Normal only if there "
            "is no deviation at all."
        ),
        class_descriptions={
            TRIAGE_NORMAL: "No anomaly is present; the object matches the reference.",
            TRIAGE_ANOMALY: (
                "A negligible anomaly that does not affect function. "
                "Applies to: " + ", ".join(negligible) + "."
            ),
            TRIAGE_DEFECT: (
                "A critical defect requiring intervention. "
                "Applies to: " + ", ".join(defect) + "."
            ),
        },
    )


@dataclass(frozen=True)
class TriageReport:
    """Seed-averaged one-vs-rest accuracies per category plus the grand mean."""

    seeds: tuple[int, ...]
    per_category: tuple[tuple[str, dict[str, float]], ...]
    column_means: dict[str, float]
    grand_mean: float
    skipped_categories: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "per_category": {cat: dict(vals) for cat, vals in self.per_category},
            "column_means": dict(self.column_means),
            "grand_mean": self.grand_mean,
            "skipped_categories": list(self.skipped_categories),
        }


def _triage_superclass(true_class: str, negligible: set[str]) -> str:
    if true_class == GOOD_CLASS:
        return TRIAGE_NORMAL
    return TRIAGE_ANOMALY if true_class in negligible else TRIAGE_DEFECT


def run_triage_eval(
    index: DatasetIndex,
    taxonomy: dict[str, CategoryTaxonomy],
    triage_cfg: TriageConfig,
    cfg: EvalConfig,
) -> TriageReport:
    """Three-way normal / negligible-anomaly / defect evaluation over the full
    test split, repeated over seeds with reshuffled class partitions."""
    validate_taxonomy(taxonomy, index)
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None
    seeds = triage_cfg.resolved_seeds()

    categories = [c for c in index.categories if len(index.class_sets[c]) >= 2]
    skipped = tuple(c for c in index.categories if c not in categories)
    for category in skipped:
        warnings.warn(
            f"skipping category {category!r} in triage: fewer than two anomaly classes",
            stacklevel=2,
        )
    if not categories:
        raise ConfigError("no category has at least two anomaly classes")

    references: dict[str, np.ndarray | None] = {}
    for category in categories:
        if cfg.flags.reference_image:
            ref_sample = select_reference(index, category, cfg.reference_seed)
            references[category] = imgio.load_rgb(ref_sample.image_path)
        else:
            references[category] = None

    test_samples = [
        s for s in index.samples if s.split == TEST and s.category in categories
    ]

    accumulator: dict[str, dict[str, list[float]]] = {
        c: {name: [] for name in (*TRIAGE_CLASSES, TRIAGE_TOTAL)} for c in categories
    }
    for seed in seeds:
        partitions = {
            c: triage_partition(index.class_sets[c], triage_cfg.negligible_fraction, seed)
            for c in categories
        }
        triage_entries = {
            c: build_triage_taxonomy(taxonomy[c], *partitions[c]) for c in categories
        }

        tasks = []
        for sample in test_samples:
            negligible = set(partitions[sample.category][0])
            truth = _triage_superclass(sample.anomaly_class, negligible)
            tasks.append(
                (
                    lambda s=sample, t=truth: (
                        s.category,
                        t,
                        _classify_sample(
                            s,
                            triage_entries[s.category],
                            TRIAGE_CLASSES,
                            references[s.category],
                            cfg,
                            cache,
                            TRIAGE_NORMAL,
                        ).predicted_class,
                    )
                )
            )
        results = _run_tasks(tasks, cfg.parallelism)

        per_cat: dict[str, list[tuple[str, str]]] = {c: [] for c in categories}
        for category, truth, predicted in results:
            per_cat[category].append((truth, predicted))
        for category, pairs in per_cat.items():
            truths = np.array([t for t, _ in pairs])
            preds = np.array([p for _, p in pairs])
            for name in TRIAGE_CLASSES:
                accumulator[category][name].append(
                    float(((truths == name) == (preds == name)).mean())
                )
            accumulator[category][TRIAGE_TOTAL].append(float((truths == preds).mean()))

    per_category = tuple(
        (c, {name: float(np.mean(vals)) for name, vals in accumulator[c].items()})
        for c in sorted(categories)
    )
    column_means = {
        name: float(np.mean([vals[name] for _, vals in per_category]))
        for name in (*TRIAGE_CLASSES, TRIAGE_TOTAL)
    }
    return TriageReport(
        seeds=seeds,
        per_category=per_category,
        column_means=column_means,
        grand_mean=column_means[TRIAGE_TOTAL],
        skipped_categories=skipped,
    )


# ---------------------------------------------------------------------------
# Prompt ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationResult:
    """Per-category accuracies, one column per flag set, plus the mean row."""

    columns: tuple[str, ...]
    rows: tuple[tuple[str, tuple[float, ...]], ...]
    means: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "rows": {cat: list(vals) for cat, vals in self.rows},
            "means": list(self.means),
        }


def run_ablation(
    index: DatasetIndex,
    taxonomy: dict[str, CategoryTaxonomy],
    cfg: EvalConfig,
    flag_sets,
) -> AblationResult:
    """One classification run per flag set, sharing the response cache."""
    flag_sets = list(flag_sets)
    if not flag_sets:
        raise ConfigError("flag_sets must be non-empty")
    if len(set(flag_sets)) != len(flag_sets):
        raise ConfigError("duplicate flag sets submitted to the ablation run")

    columns = []
    per_column_acc = []
    for flags in flag_sets:
        run_cfg = replace(cfg, flags=flags)
        report, _ = run_classification_eval(index, taxonomy, run_cfg)
        columns.append(flags.label())
        per_column_acc.append(
            {m.category: m.acc for m in report.per_category}
        )

    categories = sorted(per_column_acc[0])
    rows = tuple(
        (cat, tuple(acc[cat] for acc in per_column_acc)) for cat in categories
    )
    means = tuple(
        float(np.mean([acc[cat] for cat in categories])) for acc in per_column_acc
    )
    return AblationResult(columns=tuple(columns), rows=rows, means=means)


# ---------------------------------------------------------------------------
# Benchmark utilities
# ---------------------------------------------------------------------------

def image_auroc(scores, labels) -> float:
    """Rank-based AUROC of anomaly scores against binary anomaly labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both anomalous and normal samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _image_part_hashes(body: dict) -> list[str]:
    hashes = []
    for message in body.get("messages", []):
        for part in message.get("content", []):
            if part.get("type") == "image_url":
                url = part["image_url"]["url"]
                blob = base64.b64decode(url.split(",", 1)[1])
                hashes.append(hashlib.sha256(blob).hexdigest())
    return hashes


def make_echo_backend(index: DatasetIndex, label_fn=None) -> MockBackend:
    """Mock backend that recognizes the query image and answers its label.

    The lookup is keyed on the post-resize PNG bytes of each test image, so
    requests stay self-contained and no ground truth leaks into the prompt.
    ``label_fn`` maps a sample to the answer text (default: the true class).
    """
    label_fn = label_fn or (lambda sample: sample.anomaly_class)
    lookup = {}
    for sample in index.samples:
        if sample.split != TEST:
            continue
        png = resize_and_encode(imgio.load_rgb(sample.image_path))
        lookup[hashlib.sha256(png).hexdigest()] = label_fn(sample)

    def responder(body: dict) -> str:
        for digest in _image_part_hashes(body):
            answer = lookup.get(digest)
            if answer is not None:
                return answer
        return ""

    return MockBackend(responder)


def make_triage_echo_backend(index: DatasetIndex) -> MockBackend:
    """Echo backend for triage runs: recognizes the query image, reads the
    negligible/defect class lists out of the prompt text, and answers the
    correct superclass."""
    truth = {}
    for sample in index.samples:
        if sample.split != TEST:
            continue
        png = resize_and_encode(imgio.load_rgb(sample.image_path))
        truth[hashlib.sha256(png).hexdigest()] = sample.anomaly_class

    def responder(body: dict) -> str:
        text = body["messages"][0]["content"][0]["text"]
        negligible: set[str] = set()
        for line in text.splitlines():
            if line.startswith(f"- {TRIAGE_ANOMALY}:") and "Applies to:" in line:
                listing = line.split("Applies to:", 1)[1].strip().rstrip(".")
                negligible = {c.strip() for c in listing.split(",") if c.strip()}
        for digest in _image_part_hashes(body):
            true_class = truth.get(digest)
            if true_class is not None:
                return _triage_superclass(true_class, negligible)
        return ""

    return MockBackend(responder)
