"""Fair-token learning: directional, cosine-fallback and semantic losses.

The optimization variable is a :class:`~itigen.core.FairTokenTable`. Every
step encodes the full inclusive prompt set (one prompt per category
combination), so the per-step encoder work is ``prod(K_m)`` sequences.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .core import (AttributeSet, FairTokenTable, ReferenceSet, check_sequence_length,
                   combination_array)
from .encoders import Encoder, cache_reference_features
from .errors import NumericError, PreconditionError, ValidationError

SEM_READINGS = {"max": _kernels.SEM_MAX, "sum": _kernels.SEM_SUM}


@dataclass
class TrainingConfig:
    """Optimization settings.

    ``batch_size`` counts reference images per attribute per step.
    ``sem_reading`` selects how the semantic hinge is aggregated over a
    category pair's prompts: ``"max"`` (one hinge at the worst prompt) or
    ``"sum"`` (one hinge per prompt).
    """

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    lambda_sem: float = 0.8
    seed: int = 0
    delta_normalization: bool = True
    sem_reading: str = "max"
    per_attribute: bool = False
    init_scale: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kernel: str = "auto"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if int(self.epochs) < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 2:
            raise ValidationError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.lambda_sem <= 1:
            raise ValidationError(f"lambda_sem must lie in (0, 1], got {self.lambda_sem}")
        if self.sem_reading not in SEM_READINGS:
            raise ValidationError(f"sem_reading must be one of {sorted(SEM_READINGS)}")
        if self.init_scale < 0:
            raise ValidationError("init_scale must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict | None) -> "TrainingConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training options {sorted(unknown)}")
        return cls(**data)


@dataclass
class Batch:
    """Per-attribute image features and category indices for one step."""

    feats: list[np.ndarray]
    cats: list[np.ndarray]
    sizes: tuple[int, ...]

    def counts(self, m: int) -> np.ndarray:
        return np.bincount(self.cats[m], minlength=self.sizes[m])

    @property
    def dir_defined(self) -> bool:
        return all(np.all(self.counts(m) > 0) for m in range(len(self.sizes)))

    def composition(self) -> dict[int, list[int]]:
        return {m: self.counts(m).tolist() for m in range(len(self.sizes))}

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All images stacked, with attribute and category index per row."""
        feats = [f for f in self.feats if len(f)]
        if not feats:
            return np.zeros((0, 0)), np.zeros(0, np.int64), np.zeros(0, np.int64)
        attr = np.concatenate([np.full(len(c), m, np.int64) for m, c in enumerate(self.cats)])
        return np.vstack(feats), attr, np.concatenate(self.cats).astype(np.int64)


@dataclass
class LossReport:
    l_dir: float | None
    l_cos: float
    l_sem: float
    l_total: float
    dir_defined: bool


def _attribute_pairs(sizes: Sequence[int]) -> list[tuple[int, int, int]]:
    return [(m, i, j) for m, k in enumerate(sizes) for i in range(k) for j in range(i + 1, k)]


def _direction(v: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return v
    norm = np.linalg.norm(v)
    return v / norm if norm >= 1e-12 else np.zeros_like(v)


def delta_image(batch: Batch, m: int, i: int, j: int, normalize: bool = True) -> np.ndarray | None:
    """Mean image feature of category ``i`` minus that of ``j`` (``None`` if either is absent)."""
    if not 0 <= i < j < batch.sizes[m]:
        raise ValidationError(f"need 0 <= i < j < {batch.sizes[m]}, got i={i}, j={j}")
    fi = batch.feats[m][batch.cats[m] == i]
    fj = batch.feats[m][batch.cats[m] == j]
    if len(fi) == 0 or len(fj) == 0:
        return None
    return _direction(fi.mean(axis=0) - fj.mean(axis=0), normalize)


def inclusive_sequences(base_tokens: np.ndarray, table: FairTokenTable) -> np.ndarray:
    """Token sequences of every inclusive prompt, shape ``(P, L + sum q, d_tok)``."""
    combos = combination_array(table.attr_set)
    base = np.asarray(base_tokens, dtype=np.float64)
    blocks = [np.broadcast_to(base, (len(combos),) + base.shape)]
    for m, e in enumerate(table.entries):
        blocks.append(e[combos[:, m]])
    return np.concatenate(blocks, axis=1)


def encode_prompt_set(table: FairTokenTable, T: str, encoder: Encoder) -> np.ndarray:
    base = encoder.tokenize(T)
    seqs = inclusive_sequences(base, table)
    check_sequence_length(seqs.shape[1], encoder.max_sequence_length)
    return encoder.encode_text_batch(seqs)


def delta_prompt(table: FairTokenTable, T: str, m: int, i: int, j: int, encoder: Encoder,
                 normalize: bool = True) -> np.ndarray:
    """Mean embedding of prompts with category ``i`` at attribute ``m`` minus those with ``j``."""
    combos = combination_array(table.attr_set)
    E = encode_prompt_set(table, T, encoder)
    diff = E[combos[:, m] == i].mean(axis=0) - E[combos[:, m] == j].mean(axis=0)
    return _direction(diff, normalize)


def directional_loss(batch: Batch, table: FairTokenTable, T: str, encoder: Encoder,
                     normalize: bool = True) -> float | None:
    """Sum over attribute pairs of ``1 - <image direction, prompt direction>``; ``None`` if undefined."""
    total = 0.0
    for m, i, j in _attribute_pairs(table.attr_set.sizes):
        d_img = delta_image(batch, m, i, j, normalize)
        if d_img is None:
            return None
        total += 1.0 - float(d_img @ delta_prompt(table, T, m, i, j, encoder, normalize))
    return total


def cosine_fallback_loss(batch: Batch, table: FairTokenTable, T: str, encoder: Encoder) -> float:
    """Mean over batch images of the mean ``1 - cos`` to every prompt sharing the image's category."""
    combos = combination_array(table.attr_set)
    E = encode_prompt_set(table, T, encoder)
    terms = []
    for m, (feats, cats) in enumerate(zip(batch.feats, batch.cats)):
        for f, i in zip(feats, cats):
            terms.append(np.mean(1.0 - E[combos[:, m] == i] @ f))
    if not terms:
        raise ValidationError("cosine fallback loss needs a non-empty batch")
    return float(np.mean(terms))


def semantic_loss(table: FairTokenTable, T: str, encoder: Encoder, lambda_sem: float,
                  reading: str = "max") -> float:
    """Hinge keeping inclusive prompts within ``lambda_sem`` similarity of the base prompt."""
    combos = combination_array(table.attr_set)
    E = encode_prompt_set(table, T, encoder)
    sims = E @ encoder.embed_text(T)
    total = 0.0
    for m, i, j in _attribute_pairs(table.attr_set.sizes):
        hinges = np.maximum(0.0, lambda_sem - sims[np.isin(combos[:, m], (i, j))])
        total += hinges.max() if reading == "max" else hinges.sum()
    return float(total)


class _Objective:
    """Everything about one training problem that stays fixed across steps."""

    def __init__(self, table: FairTokenTable, T: str, encoder: Encoder, config: TrainingConfig):
        self.attr_set = table.attr_set
        self.encoder = encoder
        self.config = config
        self.base = encoder.tokenize(T)
        self.e_T = encoder.encode_text(self.base)
        self.combos = combination_array(self.attr_set)
        self.sizes = np.asarray(self.attr_set.sizes, dtype=np.int64)
        self.pairs = _attribute_pairs(self.attr_set.sizes)
        check_sequence_length(len(self.base) + self.attr_set.total_tokens,
                              encoder.max_sequence_length)

    def __call__(self, table: FairTokenTable, batch: Batch, with_grad: bool = True):
        cfg = self.config
        seqs = inclusive_sequences(self.base, table)
        E = self.encoder.encode_text_batch(seqs)
        defined = batch.dir_defined
        delta_I = None
        if defined:
            delta_I = np.array([delta_image(batch, m, i, j, cfg.delta_normalization)
                                for m, i, j in self.pairs]).reshape(len(self.pairs), -1)
        feats, fa, fc = batch.flat()
        l_dir, l_cos, l_sem, grad_E = _kernels.prompt_losses(
            E, self.e_T, self.combos, self.sizes, delta_I, feats, fa, fc,
            cfg.lambda_sem, SEM_READINGS[cfg.sem_reading], defined,
            cfg.delta_normalization, backend=cfg.kernel)
        l_total = (l_dir if defined else l_cos) + l_sem
        report = LossReport(l_dir if defined else None, l_cos, l_sem, l_total, defined)
        if not with_grad:
            return report, None
        g_seq = self.encoder.text_vjp(seqs, grad_E)
        grads, start = [], len(self.base)
        for m, e in enumerate(table.entries):
            q = e.shape[1]
            g = np.zeros_like(e)
            np.add.at(g, self.combos[:, m], g_seq[:, start:start + q, :])
            grads.append(g)
            start += q
        return report, grads


def total_loss(batch: Batch, table: FairTokenTable, T: str, encoder: Encoder,
               config: TrainingConfig | None = None) -> LossReport:
    """Directional plus semantic loss, or cosine plus semantic when directions are undefined."""
    report, _ = _Objective(table, T, encoder, config or TrainingConfig())(table, batch, False)
    return report


def loss_and_grad(batch: Batch, table: FairTokenTable, T: str, encoder: Encoder,
                  config: TrainingConfig | None = None) -> tuple[LossReport, list[np.ndarray]]:
    """:func:`total_loss` plus its gradient with respect to every fair-token entry."""
    return _Objective(table, T, encoder, config or TrainingConfig())(table, batch, True)


def make_batches(feats: Sequence[np.ndarray], cats: Sequence[np.ndarray], sizes: Sequence[int],
                 batch_size: int, rng: np.random.Generator) -> list[Batch]:
    """Split one epoch of reference images into batches, each image used exactly once.

    The number of steps is set by the largest attribute. When ``batch_size``
    covers an attribute's categories, each category is split evenly across
    steps so every batch sees every category; otherwise images are shuffled
    plainly and some batches may miss a category.
    """
    steps = max(int(np.ceil(len(c) / batch_size)) for c in cats) if cats else 0
    per_attr = []
    for m, (c, k) in enumerate(zip(cats, sizes)):
        if batch_size >= k:
            parts = [np.array_split(rng.permutation(np.flatnonzero(c == i)), steps)
                     for i in range(k)]
            chunks = [np.concatenate([p[s] for p in parts]) for s in range(steps)]
        else:
            chunks = np.array_split(rng.permutation(len(c)), steps)
        per_attr.append(chunks)
    batches = []
    for s in range(steps):
        idx = [per_attr[m][s].astype(np.int64) for m in range(len(sizes))]
        batches.append(Batch([feats[m][ix] for m, ix in enumerate(idx)],
                             [cats[m][ix] for m, ix in enumerate(idx)], tuple(sizes)))
    return batches


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def init_table(attr_set: AttributeSet, encoder: Encoder, T: str, config: TrainingConfig,
               rng: np.random.Generator) -> FairTokenTable:
    base = encoder.tokenize(T)
    scale = config.init_scale * float(np.mean(np.linalg.norm(base, axis=1)))
    entries = [rng.standard_normal((a.size, a.tokens_per_category, encoder.d_tok))
               * scale / np.sqrt(encoder.d_tok) for a in attr_set]
    meta = {"prompt": T, "encoder": encoder.identifier, "schema_hash": attr_set.schema_hash(),
            "config_hash": config.config_hash(), "config": config.to_dict(),
            "d_tok": encoder.d_tok}
    return FairTokenTable(attr_set, entries, meta)


@dataclass
class TrainResult:
    table: FairTokenTable
    trace: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    steps_per_epoch: int = 0
    text_encodings_per_step: int = 0
    epoch_text_calls: list[int] = field(default_factory=list)

    def final(self, key: str = "l_total") -> float | None:
        return self.trace[-1][key] if self.trace else None

    def epoch_means(self, key: str = "l_total") -> list[float]:
        out: dict[int, list[float]] = {}
        for row in self.trace:
            if row[key] is not None:
                out.setdefault(row["epoch"], []).append(row[key])
        return [float(np.mean(v)) for _, v in sorted(out.items())]


def _check_reference(attr_set: AttributeSet, reference_set: ReferenceSet) -> None:
    empty = reference_set.empty_categories()
    if empty:
        names = ", ".join(f"{a}/{c}" for a, c in empty)
        raise PreconditionError(f"reference set has no images for: {names}")


def train(attr_set: AttributeSet, reference_set: ReferenceSet, T: str, encoder: Encoder,
          config: TrainingConfig | None = None, log=None) -> TrainResult:
    """Learn fair tokens for ``attr_set`` from ``reference_set``.

    With ``config.per_attribute`` each attribute is trained on its own and the
    tables are concatenated afterwards; otherwise all attributes share one
    run over the full combination space.
    """
    config = config or TrainingConfig()
    config.validate()
    if len(attr_set) == 0:
        raise ValidationError("cannot train on an empty attribute set")
    _check_reference(attr_set, reference_set)
    if any(r.feature is None for r in reference_set.all_records()):
        reference_set = cache_reference_features(encoder, reference_set)

    if config.per_attribute and len(attr_set) > 1:
        start = time.perf_counter()
        merged, trace = None, []
        for m, attr in enumerate(attr_set):
            sub = attr_set.subset([attr.name])
            sub_ref = ReferenceSet(sub, {attr.name: reference_set.images[attr.name]})
            sub_cfg = TrainingConfig(**{**config.to_dict(), "per_attribute": False,
                                        "seed": config.seed + m})
            res = _train_joint(sub, sub_ref, T, encoder, sub_cfg, log)
            trace += [dict(row, attribute=attr.name) for row in res.trace]
            merged = res.table if merged is None else merged.merge(res.table)
        merged.metadata.update(config_hash=config.config_hash(), config=config.to_dict(),
                               schema_hash=attr_set.schema_hash())
        return TrainResult(merged, trace, time.perf_counter() - start)
    return _train_joint(attr_set, reference_set, T, encoder, config, log)


def _train_joint(attr_set, reference_set, T, encoder, config, log) -> TrainResult:
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    table = init_table(attr_set, encoder, T, config, rng)
    objective = _Objective(table, T, encoder, config)
    opt = Adam(table.entries, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    data = [reference_set.features(m) for m in range(len(attr_set))]
    feats = [d[0] for d in data]
    cats = [d[1] for d in data]
    trace: list[dict] = []
    steps = 0
    calls = []
    for epoch in range(config.epochs):
        before = getattr(encoder, "text_calls", None)
        batches = make_batches(feats, cats, attr_set.sizes, config.batch_size, rng)
        steps = len(batches)
        for step, batch in enumerate(batches):
            report, grads = objective(table, batch)
            finite = np.isfinite(report.l_total) and all(np.all(np.isfinite(g)) for g in grads)
            if not finite:
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}; batch composition "
                    f"(images per category, by attribute): {batch.composition()}; "
                    f"losses: {asdict(report)}")
            opt.step(grads)
            trace.append({"epoch": epoch, "step": step, "l_dir": report.l_dir,
                          "l_cos": report.l_cos, "l_sem": report.l_sem,
                          "l_total": report.l_total, "dir_defined": report.dir_defined})
        if before is not None:
            calls.append(encoder.text_calls - before)
        if log is not None:
            last = trace[-1]
            log(f"epoch {epoch + 1}/{config.epochs}: l_total={last['l_total']:.6f} "
                f"l_sem={last['l_sem']:.6f}")
    table = FairTokenTable(attr_set, table.entries, table.metadata)
    return TrainResult(table, trace, time.perf_counter() - start, steps, attr_set.joint_size,
                       calls)


TRACE_FIELDS = ["epoch", "step", "l_dir", "l_cos", "l_sem", "l_total", "dir_defined"]


def write_trace(trace: list[dict], path) -> None:
    fields = TRACE_FIELDS + (["attribute"] if trace and "attribute" in trace[0] else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})


def read_trace(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {"epoch": int(row["epoch"]), "step": int(row["step"]),
                      "dir_defined": row["dir_defined"] == "True"}
            for k in ("l_dir", "l_cos", "l_sem", "l_total"):
                parsed[k] = float(row[k]) if row[k] != "" else None
            if "attribute" in row:
                parsed["attribute"] = row["attribute"]
            rows.append(parsed)
    return rows


def load_training_config(path: Path | None, overrides: dict | None = None) -> TrainingConfig:
    import yaml

    data = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        data = dict(doc.get("training", doc))
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainingConfig.from_dict(data)
