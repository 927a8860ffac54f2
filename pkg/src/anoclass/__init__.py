"""Anomaly classification pipeline.

A pluggable vision expert screens images and localizes anomalies, detected
regions are outlined in red as a visual prompt, a structured multimodal
request drives a chat-completions backend to name the anomaly class, and an
evaluation harness computes per-category macro accuracy, macro F1, and
Cohen's kappa plus triage and prompt-ablation protocols.
"""

from .dataset import (
    GOOD_CLASS,
    DatasetIndex,
    RefinementSpec,
    SampleRecord,
    apply_refinement,
    builtin_refinement_spec,
    load_index,
    load_refinement_spec,
    refinement_stats,
    save_index,
    scan_dataset,
    select_reference,
)
from .experts import (
    DetectionResult,
    ExternalMapExpert,
    MemoryBankDetector,
    MemoryBankExpertSet,
    OracleExpert,
    load_external_maps,
)
from .features import coreset_subsample, extract_patch_features
from .gateway import (
    BackendConfig,
    HttpBackend,
    MockBackend,
    Prediction,
    ResponseCache,
    classify,
    parse_class_label,
    resize_and_encode,
)
from .harness import (
    EvalConfig,
    PredictionRecord,
    TriageConfig,
    TriageReport,
    image_auroc,
    make_echo_backend,
    run_ablation,
    run_classification_eval,
    run_triage_eval,
    triage_partition,
)
from .metrics import (
    PREDICTED_GOOD,
    UNPARSED,
    CategoryMetrics,
    ConfusionMatrix,
    MetricsReport,
    aggregate_report,
    category_accuracy,
    category_f1,
    category_metrics,
    cohens_kappa,
    confusion_matrix,
)
from .overlay import Contour, OverlayStyle, extract_contours, render_overlay
from .prompting import (
    AblationFlags,
    CategoryTaxonomy,
    ClassificationRequest,
    assemble_request,
    build_text_prompt,
    builtin_taxonomy,
    load_taxonomy,
    validate_taxonomy,
)
from .synth import SynthConfig, generate_synthetic_benchmark, synthetic_taxonomy

__version__ = "0.1.0"
