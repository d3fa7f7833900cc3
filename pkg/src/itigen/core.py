"""Domain types: attribute schemas, category combinations, fair-token tables.

Attribute declaration order is the single source of truth for both the
order in which fair tokens are concatenated and the mixed-radix order in
which category combinations are enumerated (attribute 0 most significant).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import SchemaError, SequenceLengthError

DEFAULT_TOKENS_PER_CATEGORY = 3
DEFAULT_LABEL_TEMPLATE = "a headshot of a person with {phrase}"

Combination = tuple[int, ...]


@dataclass(frozen=True)
class HardPhrase:
    """How one category is spelled out in a hard (text-only) prompt.

    ``substitute`` rewrites a word of the base prompt (``person`` -> ``woman``),
    ``append`` is added after the base prompt, and ``negative`` is the text
    placed in the negative prompt when negative prompting is enabled.
    """

    append: str = ""
    substitute: tuple[str, str] | None = None
    negative: str = ""

    @classmethod
    def from_dict(cls, data: Mapping | str) -> "HardPhrase":
        if isinstance(data, str):
            return cls(append=data)
        sub = data.get("substitute")
        if sub is not None:
            if len(sub) != 2:
                raise SchemaError(f"substitute must be a [old, new] pair, got {sub!r}")
            sub = (str(sub[0]), str(sub[1]))
        return cls(append=str(data.get("append", "")), substitute=sub,
                   negative=str(data.get("negative", "")))

    def to_dict(self) -> dict:
        out: dict = {}
        if self.append:
            out["append"] = self.append
        if self.substitute:
            out["substitute"] = list(self.substitute)
        if self.negative:
            out["negative"] = self.negative
        return out


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    categories: tuple[str, ...]
    tokens_per_category: int = DEFAULT_TOKENS_PER_CATEGORY
    phrases: Mapping[str, HardPhrase] = field(default_factory=dict)
    label_prompts: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.name:
            raise SchemaError("attribute name must be non-empty")
        if len(self.categories) < 2:
            raise SchemaError(f"attribute {self.name!r} needs at least 2 categories")
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"attribute {self.name!r} has duplicate categories")
        if int(self.tokens_per_category) < 1:
            raise SchemaError(f"attribute {self.name!r}: tokens_per_category must be >= 1")
        for cat in list(self.phrases) + list(self.label_prompts):
            if cat not in self.categories:
                raise SchemaError(f"attribute {self.name!r} has no category {cat!r}")

    @property
    def size(self) -> int:
        return len(self.categories)

    def category_index(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise SchemaError(
                f"unknown category {category!r} for attribute {self.name!r}") from None

    def prompts_for(self, category: str, template: str = DEFAULT_LABEL_TEMPLATE) -> tuple[str, ...]:
        """Label prompts used for zero-shot classification of ``category``."""
        if category in self.label_prompts:
            return tuple(self.label_prompts[category])
        return (template.format(phrase=category.replace("_", " ")),)

    def to_dict(self) -> dict:
        out = {"name": self.name, "categories": list(self.categories),
               "tokens_per_category": self.tokens_per_category}
        if self.phrases:
            out["phrases"] = {k: v.to_dict() for k, v in self.phrases.items()}
        if self.label_prompts:
            out["label_prompts"] = {k: list(v) for k, v in self.label_prompts.items()}
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeSpec":
        try:
            name = data["name"]
            categories = data["categories"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"attribute entry missing field: {exc}") from None
        phrases = {k: HardPhrase.from_dict(v) for k, v in (data.get("phrases") or {}).items()}
        labels = {}
        for k, v in (data.get("label_prompts") or {}).items():
            labels[k] = (v,) if isinstance(v, str) else tuple(v)
        return cls(str(name), tuple(str(c) for c in categories),
                   int(data.get("tokens_per_category", DEFAULT_TOKENS_PER_CATEGORY)),
                   phrases, labels)


class AttributeSet:
    """Ordered, immutable collection of attributes defining the joint space."""

    def __init__(self, attributes: Iterable[AttributeSpec] = ()):
        self._attributes = tuple(attributes)
        names = [a.name for a in self._attributes]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")

    def __len__(self):
        return len(self._attributes)

    def __iter__(self):
        return iter(self._attributes)

    def __getitem__(self, m):
        return self._attributes[m]

    def __eq__(self, other):
        return isinstance(other, AttributeSet) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.schema_hash())

    def __repr__(self):
        return f"AttributeSet({[a.name for a in self._attributes]})"

    @property
    def names(self) -> list[str]:
        return [a.name for a in self._attributes]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(a.size for a in self._attributes)

    @property
    def joint_size(self) -> int:
        return math.prod(self.sizes)

    @property
    def total_tokens(self) -> int:
        return sum(a.tokens_per_category for a in self._attributes)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    def subset(self, names: Sequence[str]) -> "AttributeSet":
        return AttributeSet(self[self.index(n)] for n in names)

    def __add__(self, other: "AttributeSet") -> "AttributeSet":
        return AttributeSet(tuple(self) + tuple(other))

    def validate_combination(self, combination: Sequence[int]) -> Combination:
        combination = tuple(int(c) for c in combination)
        if len(combination) != len(self):
            raise SchemaError(
                f"combination {combination} has {len(combination)} entries, expected {len(self)}")
        for m, (c, k) in enumerate(zip(combination, self.sizes)):
            if not 0 <= c < k:
                raise SchemaError(
                    f"category index {c} out of range [0, {k}) for attribute {self[m].name!r}")
        return combination

    def combination_names(self, combination: Sequence[int]) -> dict[str, str]:
        combination = self.validate_combination(combination)
        return {a.name: a.categories[c] for a, c in zip(self, combination)}

    def to_dict(self) -> dict:
        return {"attributes": [a.to_dict() for a in self._attributes]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeSet":
        if not isinstance(data, Mapping) or "attributes" not in data:
            raise SchemaError("schema document must contain an 'attributes' list")
        return cls(AttributeSpec.from_dict(a) for a in data["attributes"] or [])

    def schema_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_schema(path) -> AttributeSet:
    """Read an attribute schema from a YAML (or JSON) document."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise SchemaError(f"cannot read schema {path}: {exc}") from None
    return AttributeSet.from_dict(data)


def save_schema(attr_set: AttributeSet, path) -> None:
    Path(path).write_text(yaml.safe_dump(attr_set.to_dict(), sort_keys=False))


def enumerate_combinations(attr_set: AttributeSet) -> list[Combination]:
    """All category combinations in mixed-radix order, attribute 0 most significant."""
    combos: list[Combination] = [()]
    for k in attr_set.sizes:
        combos = [c + (i,) for c in combos for i in range(k)]
    return combos


def combination_index(attr_set: AttributeSet, combination: Sequence[int]) -> int:
    combination = attr_set.validate_combination(combination)
    index = 0
    for c, k in zip(combination, attr_set.sizes):
        index = index * k + c
    return index


def combination_from_index(attr_set: AttributeSet, index: int) -> Combination:
    if not 0 <= index < attr_set.joint_size:
        raise SchemaError(f"combination index {index} out of range [0, {attr_set.joint_size})")
    out = []
    for k in reversed(attr_set.sizes):
        index, c = divmod(index, k)
        out.append(c)
    return tuple(reversed(out))


def combination_array(attr_set: AttributeSet) -> np.ndarray:
    """Enumerated combinations as an ``(joint_size, M)`` int64 array."""
    combos = enumerate_combinations(attr_set)
    return np.asarray(combos, dtype=np.int64).reshape(len(combos), len(attr_set))


class FairTokenTable:
    """Learnable token embeddings, one ``(q, d_tok)`` block per (attribute, category).

    ``entries[m]`` is an array of shape ``(K_m, q_m, d_tok)``.
    """

    def __init__(self, attr_set: AttributeSet, entries: Sequence[np.ndarray],
                 metadata: Mapping | None = None):
        self.attr_set = attr_set
        self.entries = [np.array(e, dtype=np.float64) for e in entries]
        self.metadata = dict(metadata or {})
        if len(self.entries) != len(attr_set):
            raise SchemaError(
                f"token table has {len(self.entries)} attributes, schema has {len(attr_set)}")
        widths = {e.shape[-1] for e in self.entries}
        if len(widths) > 1:
            raise SchemaError(f"inconsistent token widths {sorted(widths)}")
        for attr, e in zip(attr_set, self.entries):
            expected = (attr.size, attr.tokens_per_category)
            if e.ndim != 3 or e.shape[:2] != expected:
                raise SchemaError(
                    f"entry for {attr.name!r} has shape {e.shape}, expected {expected + ('d_tok',)}")
            if not np.all(np.isfinite(e)):
                raise SchemaError(f"entry for {attr.name!r} contains non-finite values")

    @property
    def d_tok(self) -> int | None:
        return self.entries[0].shape[-1] if self.entries else self.metadata.get("d_tok")

    def tokens(self, m: int, i: int) -> np.ndarray:
        return self.entries[m][i]

    def for_combination(self, combination: Sequence[int]) -> np.ndarray:
        """Fair tokens of ``combination`` concatenated in attribute order."""
        combination = self.attr_set.validate_combination(combination)
        width = self.d_tok or 0
        blocks = [self.entries[m][c] for m, c in enumerate(combination)]
        return np.concatenate(blocks, axis=0) if blocks else np.zeros((0, width))

    def copy(self) -> "FairTokenTable":
        return FairTokenTable(self.attr_set, [e.copy() for e in self.entries], self.metadata)

    def merge(self, other: "FairTokenTable") -> "FairTokenTable":
        """Concatenate two tables trained on disjoint attributes."""
        overlap = set(self.attr_set.names) & set(other.attr_set.names)
        if overlap:
            raise SchemaError(f"cannot merge token tables sharing attributes {sorted(overlap)}")
        meta = dict(self.metadata)
        meta["merged_from"] = [self.metadata.get("schema_hash"), other.metadata.get("schema_hash")]
        return FairTokenTable(self.attr_set + other.attr_set, self.entries + other.entries, meta)

    def subset(self, names: Sequence[str]) -> "FairTokenTable":
        idx = [self.attr_set.index(n) for n in names]
        return FairTokenTable(self.attr_set.subset(names), [self.entries[i] for i in idx],
                              self.metadata)

    def save(self, path) -> None:
        """Write a one-line JSON header followed by a raw little-endian float64 blob."""
        header = {
            "format": "itigen-tokens/1",
            "schema": self.attr_set.to_dict(),
            "schema_hash": self.attr_set.schema_hash(),
            "d_tok": self.d_tok,
            "shapes": [list(e.shape) for e in self.entries],
            "dtype": "<f8",
            "metadata": self.metadata,
        }
        blob = b"".join(np.ascontiguousarray(e, dtype="<f8").tobytes() for e in self.entries)
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(blob)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "FairTokenTable":
        raw = Path(path).read_bytes()
        head, _, blob = raw.partition(b"\n")
        try:
            header = json.loads(head)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: bad token-table header ({exc})") from None
        if header.get("format") != "itigen-tokens/1":
            raise SchemaError(f"{path}: not a token-table file")
        attr_set = AttributeSet.from_dict(header["schema"])
        entries, offset = [], 0
        for shape in header["shapes"]:
            n = math.prod(shape)
            entries.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset * 8)
                           .reshape(shape).astype(np.float64))
            offset += n
        if offset * 8 != len(blob):
            raise SchemaError(f"{path}: blob size does not match header shapes")
        return cls(attr_set, entries, header.get("metadata"))


@dataclass
class ImageRecord:
    """One reference or generated image.

    ``latent`` is set for synthetic in-memory images; ``feature`` is the cached
    unit-norm joint embedding once computed.
    """

    path: Path | None = None
    latent: np.ndarray | None = None
    feature: np.ndarray | None = None
    labels: dict[str, str] = field(default_factory=dict)

    def describe(self) -> str:
        return str(self.path) if self.path is not None else "<in-memory image>"


class ReferenceSet:
    """Reference images grouped by attribute and category index."""

    def __init__(self, attr_set: AttributeSet,
                 images: Mapping[str, Sequence[Sequence[ImageRecord]]] | None = None):
        self.attr_set = attr_set
        self.images: dict[str, list[list[ImageRecord]]] = {}
        images = images or {}
        for attr in attr_set:
            groups = images.get(attr.name, [[] for _ in attr.categories])
            if len(groups) != attr.size:
                raise SchemaError(
                    f"reference set for {attr.name!r} has {len(groups)} groups, expected {attr.size}")
            self.images[attr.name] = [list(g) for g in groups]

    def records(self, m: int, i: int) -> list[ImageRecord]:
        return self.images[self.attr_set[m].name][i]

    def all_records(self) -> list[ImageRecord]:
        return [r for groups in self.images.values() for g in groups for r in g]

    def __len__(self):
        return len(self.all_records())

    def empty_categories(self) -> list[tuple[str, str]]:
        return [(a.name, a.categories[i]) for m, a in enumerate(self.attr_set)
                for i in range(a.size) if not self.records(m, i)]

    def features(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked cached features and category indices for attribute ``m``."""
        feats, cats = [], []
        for i in range(self.attr_set[m].size):
            for r in self.records(m, i):
                if r.feature is None:
                    raise SchemaError(f"feature not cached for {r.describe()}")
                feats.append(r.feature)
                cats.append(i)
        if not feats:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.vstack(feats), np.asarray(cats, dtype=np.int64)


@dataclass(frozen=True)
class InclusivePrompt:
    base_tokens: np.ndarray
    combination: Combination
    assembled_tokens: np.ndarray

    def __len__(self):
        return len(self.assembled_tokens)


def check_sequence_length(length: int, limit: int) -> None:
    if length > limit:
        raise SequenceLengthError(
            f"token sequence of length {length} exceeds the encoder maximum of {limit}")
