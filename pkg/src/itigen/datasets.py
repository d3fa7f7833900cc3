"""Reference dataset manifests and biased-variant construction.

On disk a dataset is ``<root>/<attribute>/<category>/<image>``. A
``manifest.json`` next to it may list the files explicitly and attach
auxiliary per-image labels (for example the gender of every eyeglasses
image), which is what the variant filters operate on.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .core import AttributeSet, ImageRecord, ReferenceSet
from .errors import PreconditionError, SchemaError, ValidationError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".npy"}


@dataclass
class DatasetManifest:
    root: Path
    attributes: dict[str, dict[str, list[str]]]
    labels: dict[str, dict[str, str]] = field(default_factory=dict)
    variant: str = "original"
    metadata: dict = field(default_factory=dict)

    def paths(self) -> set[tuple[str, str, str]]:
        return {(a, c, p) for a, cats in self.attributes.items()
                for c, ps in cats.items() for p in ps}

    def to_dict(self) -> dict:
        return {"root": str(self.root), "attributes": self.attributes, "labels": self.labels,
                "variant": self.variant, "metadata": self.metadata}

    def save(self, path) -> None:
        path = Path(path)
        data = self.to_dict()
        try:
            data["root"] = str(Path(self.root).resolve().relative_to(path.parent.resolve()))
        except ValueError:
            data["root"] = str(Path(self.root).resolve())
        path.write_text(json.dumps(data, indent=1, sort_keys=True))

    def check(self, attr_set: AttributeSet | None = None) -> None:
        """Validate file existence, duplicates and (optionally) agreement with a schema."""
        problems = []
        if attr_set is not None:
            for attr in attr_set:
                cats = self.attributes.get(attr.name)
                if cats is None:
                    problems.append(f"missing attribute directory: {attr.name}")
                    continue
                for cat in attr.categories:
                    if cat not in cats:
                        problems.append(f"missing category directory: {attr.name}/{cat}")
                    elif not cats[cat]:
                        problems.append(f"empty category: {attr.name}/{cat}")
                for cat in cats:
                    if cat not in attr.categories:
                        problems.append(f"category not in schema: {attr.name}/{cat}")
        for a, cats in self.attributes.items():
            for c, ps in cats.items():
                if len(set(ps)) != len(ps):
                    problems.append(f"duplicate paths in {a}/{c}")
                missing = [p for p in ps if not (Path(self.root) / p).exists()]
                if missing:
                    problems.append(f"{len(missing)} missing file(s) in {a}/{c}, e.g. {missing[0]}")
        if problems:
            raise SchemaError("dataset does not match schema:\n  " + "\n  ".join(problems))

    def reference_set(self, attr_set: AttributeSet) -> ReferenceSet:
        self.check(attr_set)
        images = {}
        for attr in attr_set:
            images[attr.name] = [
                [ImageRecord(path=Path(self.root) / p, labels=dict(self.labels.get(p, {})))
                 for p in self.attributes[attr.name][cat]]
                for cat in attr.categories]
        return ReferenceSet(attr_set, images)


def load_dataset(location) -> DatasetManifest:
    """Load a manifest file, or a dataset root (with or without ``manifest.json``)."""
    location = Path(location)
    if location.is_dir() and (location / "manifest.json").exists():
        location = location / "manifest.json"
    if location.is_file():
        try:
            data = json.loads(location.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read manifest {location}: {exc}") from None
        root = Path(data.get("root", "."))
        if not root.is_absolute():
            root = location.parent / root
        return DatasetManifest(root, data["attributes"], data.get("labels", {}),
                               data.get("variant", "original"), data.get("metadata", {}))
    if not location.is_dir():
        raise ValidationError(f"dataset {location} does not exist")
    attributes: dict[str, dict[str, list[str]]] = {}
    for attr_dir in sorted(p for p in location.iterdir() if p.is_dir()):
        cats = {}
        for cat_dir in sorted(p for p in attr_dir.iterdir() if p.is_dir()):
            cats[cat_dir.name] = sorted(
                str(f.relative_to(location)) for f in cat_dir.iterdir()
                if f.suffix.lower() in IMAGE_SUFFIXES)
        attributes[attr_dir.name] = cats
    return DatasetManifest(location, attributes)


def variant_filters(name: str, label: str = "gender", male: str = "male",
                    female: str = "female") -> dict[int, dict[str, list[str]]]:
    """Per-category-index label filters of the built-in variants.

    Category 0 is the negative (attribute absent) side and category 1 the
    positive side of a binary attribute.
    """
    if name in ("original", "identity"):
        return {}
    if name == "gender-biased":
        return {0: {label: [female]}, 1: {label: [male]}}
    if name == "male-only":
        return {0: {label: [male]}, 1: {label: [male]}}
    if name == "female-only":
        return {0: {label: [female]}, 1: {label: [female]}}
    raise ValidationError(f"unknown variant {name!r}")


def make_variant(manifest: DatasetManifest, attribute: str, variant: str | Mapping = "original",
                 categories=None, **preset_options) -> DatasetManifest:
    """Filter the images of one attribute by auxiliary labels.

    ``variant`` is a preset name or a mapping ``{"name": ..., "filters":
    {category: {label: [allowed values]}}}`` where categories may be given by
    name or index. Category indices follow ``categories`` (e.g. the schema
    order) when given, else the manifest's listing order. Other attributes are
    copied unchanged.
    """
    if attribute not in manifest.attributes:
        raise SchemaError(f"dataset has no attribute {attribute!r}")
    cats = list(categories) if categories is not None else list(manifest.attributes[attribute])
    if set(cats) != set(manifest.attributes[attribute]):
        raise SchemaError(f"categories {cats} do not match dataset {attribute!r}")
    if isinstance(variant, str):
        name = variant
        if name not in ("original", "identity") and len(cats) != 2:
            raise ValidationError(f"preset {name!r} needs a binary attribute, {attribute} has {cats}")
        filters = {cats[i]: f for i, f in variant_filters(name, **preset_options).items()}
    else:
        name = str(variant.get("name", "custom"))
        filters = {}
        for key, f in (variant.get("filters") or {}).items():
            cat = cats[int(key)] if isinstance(key, int) or str(key).isdigit() else key
            if cat not in cats:
                raise ValidationError(f"variant filter for unknown category {key!r}")
            filters[cat] = f

    if not filters:
        return DatasetManifest(manifest.root, copy.deepcopy(manifest.attributes),
                               copy.deepcopy(manifest.labels), manifest.variant,
                               copy.deepcopy(manifest.metadata))
    out = copy.deepcopy(manifest.attributes)
    emptied = []
    for cat, rules in filters.items():
        kept = []
        for p in manifest.attributes[attribute][cat]:
            labels = manifest.labels.get(p, {})
            if all(labels.get(k) in set(v) for k, v in rules.items()):
                kept.append(p)
        out[attribute][cat] = kept
        if not kept:
            emptied.append(f"{attribute}/{cat}")
    if emptied:
        raise PreconditionError(f"variant {name!r} leaves no images in {', '.join(emptied)}")
    meta = dict(manifest.metadata)
    meta["variant_of"] = manifest.variant
    meta["variant_attribute"] = attribute
    meta["variant_filters"] = filters
    kept_paths = {p for cats_ in out.values() for ps in cats_.values() for p in ps}
    labels = {p: v for p, v in manifest.labels.items() if p in kept_paths}
    return DatasetManifest(manifest.root, out, labels, name, meta)
