"""Structured classification prompts and multimodal request assembly.

A prompt is a fixed-order template: a role preamble that enumerates the
attached images, an optional normal-object description, the anomaly class
list (with or without per-class descriptions), an optional classification
strategy, and a strict output-format instruction. Five ablation switches
remove individual parts; every switch changes observable text, so distinct
flag settings always produce distinct prompts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .dataset import DatasetIndex
from .errors import TaxonomyError

SECTION_NORMAL = "Normal object description:"
SECTION_CLASSES = "Anomaly classes:"
SECTION_STRATEGY = "Classification strategy:"
OUTPUT_INSTRUCTION = (
    "Answer with exactly one class name from the list above, and nothing else."
)

ROLE_REFERENCE = "reference"
ROLE_QUERY = "query"
ROLE_VISUAL_PROMPT = "visual_prompt"

_COUNT_WORDS = {1: "one image", 2: "two images", 3: "three images"}


@dataclass(frozen=True)
class AblationFlags:
    """Switches for the five ablatable prompt parts; the query image always ships."""

    reference_image: bool = True
    visual_prompt: bool = True
    normal_description: bool = True
    classification_strategy: bool = True
    anomaly_descriptions: bool = True

    def label(self) -> str:
        off = [
            short
            for short, enabled in (
                ("ri", self.reference_image),
                ("vp", self.visual_prompt),
                ("nd", self.normal_description),
                ("cs", self.classification_strategy),
                ("ad", self.anomaly_descriptions),
            )
            if not enabled
        ]
        return "full" if not off else "no_" + "+no_".join(off)


@dataclass(frozen=True)
class CategoryTaxonomy:
    """Per-category prompt content: what normal looks like, what each anomaly
    class means, and how to decide between them."""

    category: str
    normal_description: str
    classification_strategy: str
    class_descriptions: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(
            self, "class_descriptions", MappingProxyType(dict(self.class_descriptions))
        )


def load_taxonomy(path: str | Path) -> dict[str, CategoryTaxonomy]:
    with open(path, encoding="utf-8") as handle:
        return taxonomy_from_dict(json.load(handle), source=str(path))


def taxonomy_from_dict(data: dict, source: str = "<dict>") -> dict[str, CategoryTaxonomy]:
    taxonomy = {}
    for category, entry in data.items():
        try:
            taxonomy[category] = CategoryTaxonomy(
                category=category,
                normal_description=entry["normal_description"],
                classification_strategy=entry["classification_strategy"],
                class_descriptions=dict(entry["classes"]),
            )
        except (KeyError, TypeError) as exc:
            raise TaxonomyError(
                f"malformed taxonomy entry for {category!r} in {source}: {exc}"
            ) from exc
    return taxonomy


def taxonomy_to_dict(taxonomy: Mapping[str, CategoryTaxonomy]) -> dict:
    return {
        category: {
            "normal_description": entry.normal_description,
            "classification_strategy": entry.classification_strategy,
            "classes": dict(entry.class_descriptions),
        }
        for category, entry in taxonomy.items()
    }


def save_taxonomy(taxonomy: Mapping[str, CategoryTaxonomy], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(taxonomy_to_dict(taxonomy), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def builtin_taxonomy(name: str) -> dict[str, CategoryTaxonomy]:
    """Load one of the shipped taxonomies: ``mvtec_ac`` or ``visa_ac``."""
    ref = resources.files("anoclass.fixtures") / f"{name}_taxonomy.json"
    if not ref.is_file():
        raise TaxonomyError(f"no builtin taxonomy named {name!r}")
    return taxonomy_from_dict(json.loads(ref.read_text(encoding="utf-8")), source=name)


def validate_taxonomy(taxonomy: Mapping[str, CategoryTaxonomy], index: DatasetIndex) -> None:
    """Require one entry per index category whose class keys equal the class set."""
    for category in index.categories:
        entry = taxonomy.get(category)
        if entry is None:
            raise TaxonomyError(f"taxonomy has no entry for category {category!r}")
        expected = set(index.class_sets[category])
        actual = set(entry.class_descriptions)
        if expected != actual:
            missing = sorted(expected - actual)
            extra = sorted(actual - expected)
            raise TaxonomyError(
                f"taxonomy classes for {category!r} do not match the index "
                f"(missing: {missing}, unexpected: {extra})"
            )


def _preamble(category: str, flags: AblationFlags) -> str:
    items = []
    if flags.reference_image:
        items.append(f"a reference image of a normal, defect-free {category}")
    items.append("the query image under inspection")
    if flags.visual_prompt:
        items.append(
            "a copy of the query image with the detected anomaly outlined in red"
        )
    listing = "; ".join(f"({i}) {text}" for i, text in enumerate(items, start=1))
    return (
        f"You are an industrial quality inspector examining a {category}. "
        f"You are given {_COUNT_WORDS[len(items)]}: {listing}. "
        "The query image contains an anomaly. Classify it into exactly one of "
        "the anomaly classes listed below."
    )


def build_text_prompt(
    entry: CategoryTaxonomy,
    class_names,
    flags: AblationFlags = AblationFlags(),
) -> str:
    """Byte-deterministic prompt text for one category."""
    class_names = tuple(class_names)
    if not class_names:
        raise ValueError("class_names must be non-empty")

    sections = [_preamble(entry.category, flags)]

    if flags.normal_description:
        if not entry.normal_description.strip():
            raise TaxonomyError(
                f"empty normal description for category {entry.category!r}"
            )
        sections.append(f"{SECTION_NORMAL}\n{entry.normal_description}")

    lines = [SECTION_CLASSES]
    for name in class_names:
        if flags.anomaly_descriptions:
            description = entry.class_descriptions.get(name)
            if not description or not description.strip():
                raise TaxonomyError(
                    f"no description for class {name!r} in category {entry.category!r}"
                )
            lines.append(f"- {name}: {description}")
        else:
            lines.append(f"- {name}")
    sections.append("\n".join(lines))

    if flags.classification_strategy:
        if not entry.classification_strategy.strip():
            raise TaxonomyError(
                f"empty classification strategy for category {entry.category!r}"
            )
        sections.append(f"{SECTION_STRATEGY}\n{entry.classification_strategy}")

    sections.append(OUTPUT_INSTRUCTION)
    return "\n\n".join(sections)


@dataclass(frozen=True)
class ClassificationRequest:
    """Self-contained multimodal request: prompt text plus ordered images."""

    category: str
    class_names: tuple[str, ...]
    text_prompt: str
    images: tuple[tuple[str, np.ndarray], ...]
    flags: AblationFlags


def assemble_request(
    reference: np.ndarray | None,
    query: np.ndarray,
    overlay_image: np.ndarray | None,
    entry: CategoryTaxonomy,
    flags: AblationFlags = AblationFlags(),
    class_names=None,
) -> ClassificationRequest:
    """Bundle prompt text and images in the fixed order reference, query,
    visual prompt (subject to the ablation flags)."""
    if query is None:
        raise ValueError("query image is required")
    if flags.reference_image and reference is None:
        raise ValueError("reference image required when the reference flag is on")
    if flags.visual_prompt and overlay_image is None:
        raise ValueError("overlay image required when the visual prompt flag is on")

    names = tuple(class_names) if class_names is not None else tuple(
        sorted(entry.class_descriptions)
    )
    images = []
    if flags.reference_image:
        images.append((ROLE_REFERENCE, reference))
    images.append((ROLE_QUERY, query))
    if flags.visual_prompt:
        images.append((ROLE_VISUAL_PROMPT, overlay_image))
    return ClassificationRequest(
        category=entry.category,
        class_names=names,
        text_prompt=build_text_prompt(entry, names, flags),
        images=tuple(images),
        flags=flags,
    )
