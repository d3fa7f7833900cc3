"""Fairness and quality metrics for generated image sets.

Fairness is the KL divergence, in nats, from the empirical distribution of
(classified or hand-labelled) category combinations to the uniform
distribution. Quality is the Frechet distance between Gaussian fits of image
features.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import AttributeSet, Combination, combination_from_index, combination_index
from .encoders import Encoder
from .errors import IngestionError, NumericError, PreconditionError, SchemaError, ValidationError

EIG_FLOOR = 1e-10


@dataclass
class EmpiricalDistribution:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValidationError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def marginal(self, attr_set: AttributeSet, m: int) -> "EmpiricalDistribution":
        shaped = self.counts.reshape(attr_set.sizes)
        axes = tuple(a for a in range(len(attr_set)) if a != m)
        return EmpiricalDistribution(shaped.sum(axis=axes))


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if self.covariance.shape != (self.mean.size, self.mean.size):
            raise ValidationError("covariance shape does not match mean width")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8, rtol=0):
            raise ValidationError("covariance is not symmetric")
        if self.sample_count < 2:
            raise PreconditionError("Gaussian stats need at least 2 samples")

    def save(self, path) -> None:
        np.savez(path, mu=self.mean, sigma=self.covariance, n=self.sample_count)

    @classmethod
    def load(cls, path) -> "GaussianStats":
        with np.load(path) as data:
            return cls(data["mu"], data["sigma"], int(data["n"]))


@dataclass
class LabelRecord:
    image: str
    combination: Combination
    source: str = "classifier"


def label_embeddings(attr_set: AttributeSet, encoder: Encoder, label_prompts=None,
                     template: str | None = None) -> list[np.ndarray]:
    """Per attribute, a ``(K_m, d_emb)`` matrix of mean label-prompt embeddings.

    ``label_prompts`` maps attribute name -> category -> prompt list and
    overrides the schema; otherwise the schema's prompts (or ``template``)
    are used.
    """
    out = []
    for attr in attr_set:
        override = (label_prompts or {}).get(attr.name, {})
        rows = []
        for cat in attr.categories:
            if cat in override:
                prompts = [override[cat]] if isinstance(override[cat], str) else override[cat]
            elif template:
                prompts = attr.prompts_for(cat, template)
            else:
                prompts = attr.prompts_for(cat)
            if not prompts:
                raise SchemaError(f"no label prompt for {attr.name}={cat}")
            rows.append(np.mean([encoder.embed_text(p) for p in prompts], axis=0))
        out.append(np.array(rows))
    return out


def classify(image, attr_set: AttributeSet, encoder: Encoder, label_prompts=None,
             embeddings: list[np.ndarray] | None = None) -> Combination:
    """Zero-shot category per attribute: argmax similarity to the label prompts.

    Ties go to the lowest category index. Pass precomputed ``embeddings``
    (from :func:`label_embeddings`) when classifying many images.
    """
    if embeddings is None:
        embeddings = label_embeddings(attr_set, encoder, label_prompts)
    feat = encoder.encode_image(image)
    return tuple(int(np.argmax(L @ feat)) for L in embeddings)


def classify_many(images: Iterable, attr_set: AttributeSet, encoder: Encoder,
                  label_prompts=None, template: str | None = None) -> list[Combination]:
    embeddings = label_embeddings(attr_set, encoder, label_prompts, template)
    return [classify(img, attr_set, encoder, embeddings=embeddings) for img in images]


def empirical_distribution(labels: Sequence, attr_set: AttributeSet) -> EmpiricalDistribution:
    if len(labels) == 0:
        raise PreconditionError("need at least one label")
    counts = np.zeros(attr_set.joint_size, dtype=np.int64)
    for label in labels:
        combo = label.combination if isinstance(label, LabelRecord) else label
        counts[combination_index(attr_set, combo)] += 1
    return EmpiricalDistribution(counts)


def kl_to_uniform(dist: EmpiricalDistribution | Sequence[int]) -> float:
    """KL(empirical || uniform) in nats, with ``0 * ln 0 = 0``."""
    counts = dist.counts if isinstance(dist, EmpiricalDistribution) else np.asarray(dist)
    total = counts.sum()
    if total <= 0:
        raise PreconditionError("KL divergence needs at least one observation")
    p = counts[counts > 0] / total
    return float(max(0.0, np.sum(p * np.log(p * counts.size))))


def kl_report(dist: EmpiricalDistribution, attr_set: AttributeSet) -> dict:
    """Joint KL plus the KL of each attribute's marginal."""
    return {"joint": kl_to_uniform(dist),
            "marginals": {a.name: kl_to_uniform(dist.marginal(attr_set, m))
                          for m, a in enumerate(attr_set)},
            "counts": dist.counts.tolist(), "total": dist.total}


def fit_gaussian(features) -> GaussianStats:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] < 2:
        raise PreconditionError(f"need at least 2 feature vectors, got {feats.shape[0]}")
    # shifting by the first sample keeps identical inputs exact and reduces cancellation
    shifted = feats - feats[0]
    mean = feats[0] + shifted.mean(axis=0)
    centered = shifted - shifted.mean(axis=0)
    cov = centered.T @ centered / (feats.shape[0] - 1)
    return GaussianStats(mean, (cov + cov.T) / 2.0, feats.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.where(vals < EIG_FLOOR, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats, warn_on_count_mismatch: bool = True) -> float:
    """Frechet distance ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product's square root is computed as the trace of
    ``(sqrt(S_a) S_b sqrt(S_a))^(1/2)``, which is symmetric PSD, via
    eigendecompositions with eigenvalues below ``1e-10`` clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValidationError(f"feature widths differ: {a.mean.size} vs {b.mean.size}")
    if warn_on_count_mismatch and a.sample_count != b.sample_count:
        warnings.warn(f"FID over unequal sample counts ({a.sample_count} vs {b.sample_count})",
                      stacklevel=2)
    root_a = _psd_sqrt(a.covariance)
    inner = root_a @ b.covariance @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if not np.all(np.isfinite(vals)):
        raise NumericError(
            f"non-finite eigenvalues in FID square root (cond(S_a)={np.linalg.cond(a.covariance):.3g},"
            f" cond(S_b)={np.linalg.cond(b.covariance):.3g})")
    tr_sqrt = float(np.sum(np.sqrt(np.where(vals < EIG_FLOOR, 0.0, vals))))
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    if not math.isfinite(value):
        raise NumericError("FID evaluated to a non-finite value")
    return max(value, 0.0)


def preference_tally(choices: Iterable[Sequence[str]]) -> dict[tuple[str, str], float]:
    """Share of comparisons between two methods won by each of them.

    Each choice is ``(method_a, method_b, winner)``; an empty winner is an
    abstention, which counts as a comparison won by neither side.
    """
    wins: Counter = Counter()
    totals: Counter = Counter()
    for n, row in enumerate(choices, 1):
        a, b, winner = (str(x).strip() for x in row)
        if winner and winner not in (a, b):
            raise ValidationError(f"record {n}: winner {winner!r} is neither {a!r} nor {b!r}")
        pair = frozenset((a, b))
        totals[pair] += 1
        if winner:
            wins[(winner, b if winner == a else a)] += 1
    out = {}
    for pair, total in totals.items():
        names = sorted(pair)
        if len(names) == 1:
            names = names * 2
        x, y = names
        out[(x, y)] = wins[(x, y)] / total
        out[(y, x)] = wins[(y, x)] / total
    return out


def read_preferences(path) -> dict[tuple[str, str], float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"image_a_method", "image_b_method", "winner"}
        if not need <= set(reader.fieldnames or ()):
            raise ValidationError(f"{path}: header must contain {sorted(need)}")
        return preference_tally((r["image_a_method"], r["image_b_method"], r["winner"] or "")
                                for r in reader)


def ingest_manual_labels(path, attr_set: AttributeSet) -> list[LabelRecord]:
    """Read ``path,<attr_1>,...,<attr_M>`` rows; every bad row is reported at once."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"cannot open label file {path}: {exc}", [path]) from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty label file", [path])
        header = [h.strip() for h in header]
        if header[0] != "path" or sorted(header[1:]) != sorted(attr_set.names):
            raise SchemaError(
                f"{path}: header {header} does not match path + attributes {attr_set.names}")
        columns = [header.index(name) for name in attr_set.names]
        records, bad = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                bad.append(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
                continue
            try:
                combo = tuple(attr.category_index(row[col].strip())
                              for attr, col in zip(attr_set, columns))
            except SchemaError as exc:
                bad.append(f"line {line_no}: {exc}")
                continue
            records.append(LabelRecord(row[0].strip(), combo, "manual"))
    if bad:
        raise IngestionError(f"{path}: {len(bad)} malformed row(s):\n  " + "\n  ".join(bad), [path])
    return records


@dataclass
class MetricReport:
    method: str
    schema_hash: str
    label_source: str
    sample_count: int
    kl: dict
    fid: float | None = None
    reference_count: int | None = None
    extractor: str | None = None
    label_prompts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": self.method, "schema_hash": self.schema_hash,
                "label_source": self.label_source, "sample_count": self.sample_count,
                "kl_nats": self.kl, "fid": self.fid, "fid_reference_count": self.reference_count,
                "extractor": self.extractor, "label_prompts": self.label_prompts}


def write_reports(reports: Sequence[MetricReport], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))


def label_prompt_table(attr_set: AttributeSet) -> dict:
    return {a.name: {c: list(a.prompts_for(c)) for c in a.categories} for a in attr_set}


def combination_names(attr_set: AttributeSet, index: int) -> str:
    names = attr_set.combination_names(combination_from_index(attr_set, index))
    return ", ".join(f"{k}={v}" for k, v in names.items())
