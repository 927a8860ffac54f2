"""Vision experts: anomaly detection and pixel-wise localization.

Three interchangeable implementations sit behind one ``detect`` interface:

* :class:`OracleExpert` returns ground-truth masks, isolating classifier
  quality from detection quality.
* :class:`ExternalMapExpert` replays precomputed anomaly maps written by any
  external detector (16-bit quantized PNG plus JSON sidecar per sample id).
* :class:`MemoryBankDetector` is a self-contained detector built on
  handcrafted patch descriptors, a greedy-coreset memory bank, and
  nearest-neighbor scoring. It follows the scikit-learn estimator API.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import imgio
from .dataset import GOOD_CLASS, SampleRecord
from .errors import ConfigError, ExpertError
from .features import coreset_subsample, extract_patch_features

MAP_QUANT_LEVELS = 65535


@dataclass(frozen=True)
class DetectionResult:
    """Expert verdict: image-level decision plus pixel-wise score map and mask."""

    is_anomalous: bool
    image_score: float
    score_map: np.ndarray  # float64 (H, W), finite and >= 0
    mask: np.ndarray  # bool (H, W)


class VisionExpert(Protocol):
    def detect(self, image: np.ndarray, sample: SampleRecord) -> DetectionResult:
        ...


class OracleExpert:
    """Passes ground-truth masks through as detections."""

    def detect(self, image: np.ndarray, sample: SampleRecord) -> DetectionResult:
        height, width = image.shape[:2]
        if sample.anomaly_class == GOOD_CLASS:
            empty = np.zeros((height, width), dtype=bool)
            return DetectionResult(False, 0.0, empty.astype(np.float64), empty)
        if sample.mask_path is None:
            raise ExpertError(
                f"oracle expert needs a ground-truth mask for sample {sample.id}"
            )
        mask = imgio.load_mask(sample.mask_path)
        if mask.shape != (height, width):
            raise ExpertError(
                f"mask shape {mask.shape} does not match image shape "
                f"{(height, width)} for sample {sample.id}"
            )
        return DetectionResult(bool(mask.any()), float(mask.any()), mask.astype(np.float64), mask)


# ---------------------------------------------------------------------------
# File-backed external maps
# ---------------------------------------------------------------------------

def save_external_map(maps_dir: str | Path, sample_id: str, score_map: np.ndarray) -> None:
    """Persist a score map as ``<id>.png`` (16-bit, linear quantization) plus
    a ``<id>.json`` sidecar recording dimensions and the score range."""
    arr = np.asarray(score_map, dtype=np.float64)
    if arr.ndim != 2:
        raise ExpertError(f"score map for {sample_id} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0:
        raise ExpertError(f"score map for {sample_id} must be finite and non-negative")
    score_min = float(arr.min())
    score_max = float(arr.max())
    if score_max > score_min:
        quantized = np.rint(
            (arr - score_min) / (score_max - score_min) * MAP_QUANT_LEVELS
        ).astype(np.uint16)
    else:
        quantized = np.zeros(arr.shape, dtype=np.uint16)
    base = Path(maps_dir) / sample_id
    imgio.save_gray16(base.with_name(base.name + ".png"), quantized)
    sidecar = {
        "width": int(arr.shape[1]),
        "height": int(arr.shape[0]),
        "score_min": score_min,
        "score_max": score_max,
    }
    base.with_name(base.name + ".json").write_text(
        json.dumps(sidecar, sort_keys=True), encoding="utf-8"
    )


def load_external_map(
    maps_dir: str | Path, sample_id: str, expected_shape: tuple[int, int] | None = None
) -> np.ndarray:
    base = Path(maps_dir) / sample_id
    png_path = base.with_name(base.name + ".png")
    sidecar_path = base.with_name(base.name + ".json")
    if not png_path.is_file() or not sidecar_path.is_file():
        raise ExpertError(f"no stored anomaly map for sample id {sample_id!r}")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        width = int(sidecar["width"])
        height = int(sidecar["height"])
        score_min = float(sidecar["score_min"])
        score_max = float(sidecar["score_max"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ExpertError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    quantized = imgio.load_gray16(png_path)
    if quantized.shape != (height, width):
        raise ExpertError(
            f"stored map {png_path} has shape {quantized.shape}, sidecar says "
            f"{(height, width)}"
        )
    if expected_shape is not None and quantized.shape != tuple(expected_shape):
        raise ExpertError(
            f"stored map for {sample_id!r} has shape {quantized.shape}, query "
            f"image has shape {tuple(expected_shape)}"
        )
    return score_min + quantized.astype(np.float64) / MAP_QUANT_LEVELS * (score_max - score_min)


class ExternalMapExpert:
    """Replays precomputed anomaly maps and thresholds them."""

    def __init__(self, maps_dir: str | Path, threshold: float | None = None):
        self.maps_dir = Path(maps_dir)
        if threshold is None:
            meta = self.maps_dir / "meta.json"
            if meta.is_file():
                threshold = float(json.loads(meta.read_text(encoding="utf-8"))["threshold"])
        if threshold is None:
            raise ConfigError(
                "external map expert needs a detection threshold: pass one "
                f"explicitly or provide {self.maps_dir / 'meta.json'}"
            )
        self.threshold = float(threshold)

    def detect(self, image: np.ndarray, sample: SampleRecord) -> DetectionResult:
        score_map = load_external_map(self.maps_dir, sample.id, image.shape[:2])
        image_score = float(score_map.max())
        mask = score_map > self.threshold
        return DetectionResult(image_score > self.threshold, image_score, score_map, mask)


def load_external_maps(maps_dir: str | Path, threshold: float | None = None) -> ExternalMapExpert:
    return ExternalMapExpert(maps_dir, threshold)


# ---------------------------------------------------------------------------
# Memory-bank detector
# ---------------------------------------------------------------------------

BANK_FORMAT = "anoclass-bank"
BANK_VERSION = 1


class MemoryBankDetector(BaseEstimator):
    """Nearest-neighbor detector over a coreset of normal patch descriptors.

    Fit on a list of normal RGB images; scoring compares each query patch to
    its nearest bank descriptor (z-scored Euclidean distance), splats patch
    scores to a full-resolution grid, smooths with a Gaussian kernel, and
    thresholds the maximum for the image-level verdict.
    """

    def __init__(
        self,
        patch_size: int = 16,
        stride: int = 8,
        scales: tuple[int, ...] = (1, 2),
        coreset_fraction: float = 0.10,
        smoothing_sigma: float = 4.0,
        target_fpr: float = 0.01,
        coreset_seed: int = 0,
    ):
        self.patch_size = patch_size
        self.stride = stride
        self.scales = scales
        self.coreset_fraction = coreset_fraction
        self.smoothing_sigma = smoothing_sigma
        self.target_fpr = target_fpr
        self.coreset_seed = coreset_seed

    # -- fitting -----------------------------------------------------------

    def fit(self, images, calibrate: bool = True) -> "MemoryBankDetector":
        """Build the memory bank from normal images and, by default, calibrate
        the detection threshold on those same images."""
        images = list(images)
        if not images:
            raise ValueError("fit needs at least one normal image")
        all_feats = [self._extract(img)[1] for img in images]
        stacked = np.concatenate(all_feats, axis=0)
        self.feature_mean_ = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        self.feature_std_ = np.where(std < 1e-12, 1.0, std)
        normalized = (stacked - self.feature_mean_) / self.feature_std_
        m = max(1, int(round(self.coreset_fraction * len(normalized))))
        m = min(m, len(normalized))
        picks = coreset_subsample(normalized, m, seed=self.coreset_seed)
        self.bank_ = normalized[picks]
        self.descriptor_dim_ = int(normalized.shape[1])
        self.threshold_ = None
        if calibrate:
            self.calibrate_threshold(images, self.target_fpr)
        return self

    def _extract(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return extract_patch_features(
            image, patch_size=self.patch_size, stride=self.stride, scales=tuple(self.scales)
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "bank_"):
            raise NotFittedError(
                "this MemoryBankDetector is not fitted yet; call fit() first"
            )

    # -- scoring -----------------------------------------------------------

    def patch_scores(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-bank-descriptor distance per patch location (pre-smoothing)."""
        self._check_fitted()
        locations, feats = self._extract(image)
        if feats.shape[1] != self.descriptor_dim_:
            raise ExpertError(
                f"descriptor size mismatch: bank has {self.descriptor_dim_} dims, "
                f"query produced {feats.shape[1]} (configuration drift between "
                "fit and score)"
            )
        normalized = (feats - self.feature_mean_) / self.feature_std_
        scores = np.empty(len(normalized))
        chunk = 2048
        for start in range(0, len(normalized), chunk):
            block = normalized[start : start + chunk]
            scores[start : start + chunk] = cdist(block, self.bank_).min(axis=1)
        return locations, scores

    def score_image(self, image: np.ndarray) -> tuple[np.ndarray, float]:
        """Smoothed full-resolution anomaly map and its maximum."""
        locations, scores = self.patch_scores(image)
        height, width = np.asarray(image).shape[:2]
        full = self._splat(locations, scores, height, width)
        smoothed = gaussian_filter(full, sigma=self.smoothing_sigma, mode="reflect")
        return smoothed, float(smoothed.max())

    def _splat(
        self, locations: np.ndarray, scores: np.ndarray, height: int, width: int
    ) -> np.ndarray:
        """Assign each pixel the score of its nearest patch (by patch center)."""
        ys = np.unique(locations[:, 0])
        xs = np.unique(locations[:, 1])
        grid = scores.reshape(len(ys), len(xs))
        half = self.patch_size / 2.0
        row_idx = np.clip(
            np.round((np.arange(height) - half) / self.stride), 0, len(ys) - 1
        ).astype(np.intp)
        col_idx = np.clip(
            np.round((np.arange(width) - half) / self.stride), 0, len(xs) - 1
        ).astype(np.intp)
        return grid[np.ix_(row_idx, col_idx)]

    def calibrate_threshold(self, normal_images, target_fpr: float | None = None) -> float:
        """Smallest observed normal image score whose exceedance fraction is
        at or below ``target_fpr``. Sets and returns ``threshold_``."""
        self._check_fitted()
        fpr = self.target_fpr if target_fpr is None else target_fpr
        if not 0 <= fpr <= 1:
            raise ValueError(f"target_fpr must be in [0, 1], got {fpr}")
        normal_images = list(normal_images)
        if not normal_images:
            raise ValueError("calibration needs at least one normal image")
        scores = np.array([self.score_image(img)[1] for img in normal_images])
        threshold = float(scores.max())
        for candidate in np.sort(np.unique(scores)):
            if (scores > candidate).mean() <= fpr:
                threshold = float(candidate)
                break
        self.threshold_ = threshold
        return threshold

    def detect(self, image: np.ndarray, sample: SampleRecord | None = None) -> DetectionResult:
        self._check_fitted()
        if self.threshold_ is None:
            raise ExpertError(
                "detection threshold not calibrated; call calibrate_threshold()"
            )
        smoothed, image_score = self.score_image(image)
        mask = smoothed > self.threshold_
        return DetectionResult(image_score > self.threshold_, image_score, smoothed, mask)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path, category: str | None = None) -> None:
        """Versioned binary file: one JSON header line, then the bank as
        little-endian float32."""
        self._check_fitted()
        header = {
            "format": BANK_FORMAT,
            "version": BANK_VERSION,
            "descriptor_dim": self.descriptor_dim_,
            "count": int(len(self.bank_)),
            "threshold": self.threshold_,
            "category": category,
            "feature_mean": self.feature_mean_.tolist(),
            "feature_std": self.feature_std_.tolist(),
            "config": {
                "patch_size": self.patch_size,
                "stride": self.stride,
                "scales": list(self.scales),
                "coreset_fraction": self.coreset_fraction,
                "smoothing_sigma": self.smoothing_sigma,
                "target_fpr": self.target_fpr,
                "coreset_seed": self.coreset_seed,
            },
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            handle.write(self.bank_.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["MemoryBankDetector", str | None]:
        """Load a saved bank; returns ``(detector, category)``."""
        path = Path(path)
        if not path.is_file():
            raise ExpertError(f"memory bank file not found: {path}")
        with open(path, "rb") as handle:
            header_line = handle.readline()
            blob = handle.read()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ExpertError(f"malformed bank header in {path}: {exc}") from exc
        if header.get("format") != BANK_FORMAT or header.get("version") != BANK_VERSION:
            raise ExpertError(f"unsupported bank format in {path}: {header.get('format')}")
        cfg = header["config"]
        detector = cls(
            patch_size=cfg["patch_size"],
            stride=cfg["stride"],
            scales=tuple(cfg["scales"]),
            coreset_fraction=cfg["coreset_fraction"],
            smoothing_sigma=cfg["smoothing_sigma"],
            target_fpr=cfg["target_fpr"],
            coreset_seed=cfg["coreset_seed"],
        )
        dim = int(header["descriptor_dim"])
        count = int(header["count"])
        bank = np.frombuffer(blob, dtype="<f4")
        if bank.size != dim * count:
            raise ExpertError(
                f"bank payload in {path} has {bank.size} floats, header says "
                f"{count} x {dim}"
            )
        detector.bank_ = bank.reshape(count, dim).astype(np.float64)
        detector.descriptor_dim_ = dim
        detector.feature_mean_ = np.asarray(header["feature_mean"], dtype=np.float64)
        detector.feature_std_ = np.asarray(header["feature_std"], dtype=np.float64)
        detector.threshold_ = header["threshold"]
        return detector, header.get("category")


class MemoryBankExpertSet:
    """Dispatches detection to one fitted :class:`MemoryBankDetector` per category."""

    def __init__(self, detectors: dict[str, MemoryBankDetector]):
        if not detectors:
            raise ConfigError("expert set needs at least one fitted detector")
        self.detectors = dict(detectors)

    def detect(self, image: np.ndarray, sample: SampleRecord) -> DetectionResult:
        detector = self.detectors.get(sample.category)
        if detector is None:
            raise ExpertError(
                f"no memory bank fitted for category {sample.category!r}"
            )
        return detector.detect(image, sample)
