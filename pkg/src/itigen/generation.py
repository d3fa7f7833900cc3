"""Prompt assembly, guided sampling and batch generation.

SD, HPS and HPSn share one sampling path: plain HPS is HPSn with an empty
negative prompt, and vanilla generation is HPS without category phrases.
ITI-Gen swaps the positive conditioning for an inclusive prompt, and the
hybrid mode appends fair tokens after an HPSn positive prompt.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (AttributeSet, Combination, FairTokenTable, InclusivePrompt,
                   check_sequence_length, combination_index, enumerate_combinations)
from .encoders import Encoder
from .errors import BackendUnavailable, SchemaError, ValidationError
from .images import save_latent_png

METHODS = ("SD", "HPS", "HPSn", "ITI-GEN", "HYBRID")
DEFAULT_GUIDANCE_SCALE = 7.5
DEFAULT_BATCH_SIZE = 8


class DiffusionBackend(ABC):
    """Denoiser ``f(x, t, c)`` plus schedule, initial noise and decoder.

    ``c`` is a token-embedding sequence of shape ``(L, d_tok)`` or ``None``
    for the unconditional (empty-prompt) branch. ``spatial`` is an opaque
    extra condition (depth map, pose, ...) that backends may ignore.
    """

    identifier: str
    latent_dim: int

    @abstractmethod
    def timesteps(self) -> list[int]: ...

    @abstractmethod
    def initial_latent(self, seed: int) -> np.ndarray: ...

    @abstractmethod
    def denoise(self, x: np.ndarray, t: int, c: np.ndarray | None, spatial=None) -> np.ndarray: ...

    def decode(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)


class StubBackend(DiffusionBackend):
    """Deterministic weight-free backend.

    ``f(x, t, c) = (1 - mix) * x + mix * E_text(c) + jitter * n(c, t)`` where
    ``n`` is Gaussian noise seeded by a hash of ``(c, t)``. The fixed point of
    guided sampling is ``scale * (E(c) - E(c_neg)) + E(c_neg)``, so decoded
    latents carry the conditioning semantics. Outputs are rounded to a
    ``2**-24`` grid, which makes guidance arithmetic with dyadic scales exact.
    """

    GRID = 2.0 ** 24

    def __init__(self, encoder: Encoder, steps: int = 20, mix: float = 0.25,
                 jitter: float = 1e-3, init_scale: float = 1.0):
        if steps < 1:
            raise ValidationError("stub backend needs at least one step")
        self.encoder = encoder
        self.steps = int(steps)
        self.mix = float(mix)
        self.jitter = float(jitter)
        self.init_scale = float(init_scale)
        self.latent_dim = encoder.d_emb
        self.identifier = f"stub-n{self.steps}"
        self.calls = 0
        self._embed_cache: dict[bytes, np.ndarray] = {}

    def timesteps(self) -> list[int]:
        return list(range(self.steps - 1, -1, -1))

    def _q(self, v: np.ndarray) -> np.ndarray:
        return np.round(v * self.GRID) / self.GRID

    def initial_latent(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(int(seed))
        return self._q(self.init_scale * rng.standard_normal(self.latent_dim))

    def _conditioning(self, c: np.ndarray | None) -> tuple[np.ndarray, bytes]:
        if c is None or len(c) == 0:
            return np.zeros(self.latent_dim), b"<null>"
        key = np.ascontiguousarray(c, dtype=np.float64).tobytes()
        if key not in self._embed_cache:
            self._embed_cache[key] = self.encoder.encode_text(c)
        return self._embed_cache[key], key

    def denoise(self, x, t, c, spatial=None):
        self.calls += 1
        h, key = self._conditioning(c)
        digest = hashlib.sha256(key + int(t).to_bytes(8, "little")).digest()
        noise = np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(
            self.latent_dim)
        return self._q((1.0 - self.mix) * np.asarray(x) + self.mix * h + self.jitter * noise)


def make_backend(spec: str | None, encoder: Encoder) -> DiffusionBackend:
    """``stub`` or ``stub:steps=20,mix=0.25``; anything else is unavailable here."""
    spec = spec or "stub"
    name, _, rest = spec.partition(":")
    if name != "stub":
        raise BackendUnavailable(f"diffusion backend {spec!r} is not installed")
    kwargs = {}
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        if key not in ("steps", "mix", "jitter", "init_scale"):
            raise ValidationError(f"unknown stub backend option {key!r}")
        kwargs[key] = int(value) if key == "steps" else float(value)
    return StubBackend(encoder, **kwargs)


def guided_step(backend: DiffusionBackend, x, t, c_pos, c_neg, scale: float, spatial=None):
    """``scale * (f(x,t,c_pos) - f(x,t,c_neg)) + f(x,t,c_neg)``."""
    if not scale > 0:
        raise ValidationError(f"guidance scale must be positive, got {scale}")
    try:
        f_pos = backend.denoise(x, t, c_pos, spatial)
        if scale == 1:
            return f_pos
        f_neg = backend.denoise(x, t, c_neg, spatial)
    except (BackendUnavailable, ValidationError):
        raise
    except Exception as exc:
        raise RuntimeError(f"backend {backend.identifier} failed at timestep {t}: {exc}") from exc
    return scale * (f_pos - f_neg) + f_neg


def assemble_prompt(T: str, table: FairTokenTable | None, combination: Sequence[int],
                    encoder: Encoder) -> InclusivePrompt:
    """Base tokens of ``T`` followed by the fair tokens of ``combination``."""
    base = encoder.tokenize(T)
    if table is None or len(table.attr_set) == 0:
        if len(combination):
            raise SchemaError("combination given for an empty token table")
        return InclusivePrompt(base, (), base)
    combination = table.attr_set.validate_combination(combination)
    if table.d_tok != encoder.d_tok:
        raise SchemaError(f"token width {table.d_tok} does not match encoder width {encoder.d_tok}")
    fair = table.for_combination(combination)
    check_sequence_length(len(base) + len(fair), encoder.max_sequence_length)
    return InclusivePrompt(base, combination, np.concatenate([base, fair], axis=0))


def build_hard_prompt(T: str, attr_set: AttributeSet, combination: Sequence[int],
                      negative_prompting: bool = True) -> tuple[str, str]:
    """Positive and negative text for hard prompt search.

    A category with a ``negative`` phrase is moved to the negative prompt when
    ``negative_prompting`` is on; otherwise its ``append``/``substitute``
    phrase is written into the positive prompt.
    """
    combination = attr_set.validate_combination(combination)
    positive, appends, negatives = T, [], []
    for attr, c in zip(attr_set, combination):
        cat = attr.categories[c]
        phrase = attr.phrases.get(cat)
        if phrase is None:
            raise SchemaError(f"no hard-prompt phrase for {attr.name}={cat}")
        if negative_prompting and phrase.negative:
            negatives.append(phrase.negative)
            continue
        if phrase.substitute is None and not phrase.append:
            raise SchemaError(f"no positive phrase for {attr.name}={cat}")
        if phrase.substitute is not None:
            old, new = phrase.substitute
            pattern = rf"\b{re.escape(old)}\b"
            if re.search(pattern, positive):
                positive = re.sub(pattern, new, positive, count=1)
            elif not phrase.append:
                raise SchemaError(f"{attr.name}={cat}: {old!r} does not occur in {T!r}")
        if phrase.append:
            appends.append(phrase.append)
    if appends:
        positive = f"{positive} {', '.join(appends)}"
    return positive, ", ".join(negatives)


def hybrid_conditioning(T: str, table: FairTokenTable | None, itigen_combination: Sequence[int],
                        hpsn_attrs: AttributeSet, hpsn_combination: Sequence[int],
                        encoder: Encoder) -> tuple[np.ndarray, str]:
    """HPSn positive prompt with the ITI-Gen fair tokens appended, plus the negative text."""
    itigen_attrs = table.attr_set if table is not None else AttributeSet()
    overlap = set(itigen_attrs.names) & set(hpsn_attrs.names)
    if overlap:
        raise ValidationError(f"attributes {sorted(overlap)} assigned to both ITI-Gen and HPSn")
    positive, negative = build_hard_prompt(T, hpsn_attrs, hpsn_combination, True)
    prompt = assemble_prompt(positive, table, itigen_combination, encoder)
    return prompt.assembled_tokens, negative


def _join_negative(*parts: str) -> str:
    return ", ".join(p for p in parts if p)


@dataclass
class GenerationJob:
    method: str
    prompt: str
    count: int = 104
    negative_prompt: str = ""
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE
    seed: int = 0
    batch_size: int = DEFAULT_BATCH_SIZE
    backend: str = "stub"
    encoder: str = "toy"
    schema: AttributeSet | None = None
    token_table: FairTokenTable | None = None
    hpsn_attributes: list[str] = field(default_factory=list)
    spatial_condition: object = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.guidance_scale > 0:
            raise ValidationError("guidance_scale must be positive")
        if self.batch_size < 1 or self.count < 1:
            raise ValidationError("batch_size and count must be >= 1")
        if self.method in ("ITI-GEN", "HYBRID") and self.token_table is None:
            raise ValidationError(f"{self.method} needs a token table")
        if self.method in ("HPS", "HPSn") and self.schema is None:
            raise ValidationError(f"{self.method} needs an attribute schema")

    def attribute_space(self) -> tuple[AttributeSet, AttributeSet]:
        """(ITI-Gen attributes, hard-prompt attributes) for this job."""
        if self.method == "ITI-GEN":
            return self.token_table.attr_set, AttributeSet()
        if self.method == "HYBRID":
            hpsn = (self.schema.subset(self.hpsn_attributes) if self.hpsn_attributes
                    else AttributeSet())
            return self.token_table.attr_set, hpsn
        return AttributeSet(), self.schema or AttributeSet()

    @property
    def joint_attributes(self) -> AttributeSet:
        a, b = self.attribute_space()
        return a + b

    def job_id(self) -> str:
        desc = {"method": self.method, "prompt": self.prompt, "count": self.count,
                "negative": self.negative_prompt, "scale": self.guidance_scale,
                "seed": self.seed, "backend": self.backend, "encoder": self.encoder,
                "schema": self.joint_attributes.schema_hash(),
                "tokens": hashlib.sha256(b"".join(e.tobytes() for e in self.token_table.entries)
                                         ).hexdigest()[:12] if self.token_table else None,
                "hpsn": self.hpsn_attributes}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class GenerationRecord:
    combination: Combination
    combination_index: int
    seed: int
    seed_offset: int
    method: str
    job_id: str
    path: Path | None = None
    latent: np.ndarray | None = field(default=None, repr=False)

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.method}|{self.combination}|{self.seed}".encode())
        if self.latent is not None:
            h.update(np.ascontiguousarray(self.latent).tobytes())
        elif self.path is not None and Path(self.path).exists():
            h.update(Path(self.path).read_bytes())
        return h.hexdigest()


def conditioning_for(job: GenerationJob, combination: Combination,
                     encoder: Encoder) -> tuple[np.ndarray, np.ndarray | None]:
    """Positive and negative token sequences for one combination of ``job``."""
    itigen, hard = job.attribute_space()
    n_it = len(itigen)
    c_it, c_hard = combination[:n_it], combination[n_it:]
    if job.method == "SD":
        pos, neg = job.prompt, job.negative_prompt
    elif job.method in ("HPS", "HPSn"):
        pos, neg = build_hard_prompt(job.prompt, hard, c_hard, job.method == "HPSn")
        neg = _join_negative(neg, job.negative_prompt)
    elif job.method == "ITI-GEN":
        tokens = assemble_prompt(job.prompt, job.token_table, c_it, encoder).assembled_tokens
        neg = job.negative_prompt
        return tokens, (encoder.tokenize(neg) if neg else None)
    else:
        tokens, neg = hybrid_conditioning(job.prompt, job.token_table, c_it, hard, c_hard, encoder)
        neg = _join_negative(neg, job.negative_prompt)
        return tokens, (encoder.tokenize(neg) if neg else None)
    return encoder.tokenize(pos), (encoder.tokenize(neg) if neg else None)


MANIFEST_FIELDS = ["method", "combination", "combination_index", "seed", "seed_offset",
                   "path", "job_id"]


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


class ManifestWriter:
    """Single serialized appender for ``manifest.tsv``."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=MANIFEST_FIELDS, delimiter="\t")
        if new:
            self._writer.writeheader()

    def write(self, rec: GenerationRecord, run_dir: Path) -> None:
        self._writer.writerow({
            "method": rec.method, "combination": "-".join(map(str, rec.combination)),
            "combination_index": rec.combination_index, "seed": rec.seed,
            "seed_offset": rec.seed_offset,
            "path": str(Path(rec.path).relative_to(run_dir)) if rec.path else "",
            "job_id": rec.job_id})
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def generate(job: GenerationJob, encoder: Encoder, backend: DiffusionBackend | None = None,
             out_dir=None, progress=None) -> list[GenerationRecord]:
    """Sample ``job.count`` images for every combination of the job's attribute space.

    Image ``r`` of combination ``k`` uses seed offset ``k * count + r``. With
    ``out_dir`` the images go to ``<out>/<method>/<k>/<offset>.png`` and every
    finished batch is appended to ``<out>/manifest.tsv``; a rerun skips images
    already listed there. Without ``out_dir`` records keep their latents in
    memory.
    """
    backend = backend or make_backend(job.backend, encoder)
    attrs = job.joint_attributes
    combos = enumerate_combinations(attrs)
    jid = job.job_id()
    run_dir = Path(out_dir) if out_dir is not None else None
    done: dict[int, dict] = {}
    writer = None
    if run_dir is not None:
        for row in read_manifest(run_dir / "manifest.tsv"):
            if row["method"] == job.method and row["job_id"] == jid and (run_dir / row["path"]).exists():
                done[int(row["seed_offset"])] = row
        writer = ManifestWriter(run_dir / "manifest.tsv")
    records: list[GenerationRecord] = []
    try:
        for combo in combos:
            k = combination_index(attrs, combo)
            c_pos, c_neg = conditioning_for(job, combo, encoder)
            offsets = [k * job.count + r for r in range(job.count)]
            for start in range(0, len(offsets), job.batch_size):
                chunk = offsets[start:start + job.batch_size]
                todo = [o for o in chunk if o not in done]
                for o in chunk:
                    if o in done:
                        records.append(GenerationRecord(
                            combo, k, job.seed + o, o, job.method, jid,
                            run_dir / done[o]["path"]))
                if not todo:
                    continue
                x = np.stack([backend.initial_latent(job.seed + o) for o in todo])
                for t in backend.timesteps():
                    x = guided_step(backend, x, t, c_pos, c_neg, job.guidance_scale,
                                    job.spatial_condition)
                for o, latent in zip(todo, x):
                    rec = GenerationRecord(combo, k, job.seed + o, o, job.method, jid,
                                           latent=backend.decode(latent))
                    if run_dir is not None:
                        rec.path = save_latent_png(
                            run_dir / job.method / str(k) / f"{o}.png", rec.latent)
                        writer.write(rec, run_dir)
                    records.append(rec)
                if progress is not None:
                    progress(len(records), len(combos) * job.count)
    finally:
        if writer is not None:
            writer.close()
    return records


def load_job(path, overrides: dict | None = None) -> GenerationJob:
    """Read a YAML job file; ``schema`` and ``tokens`` paths are relative to it."""
    import yaml

    from .core import load_schema

    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ValidationError(f"cannot read job file {path}: {exc}") from None
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = path.parent
    schema = load_schema(base / doc["schema"]) if doc.get("schema") else None
    table = FairTokenTable.load(base / doc["tokens"]) if doc.get("tokens") else None
    known = {f for f in GenerationJob.__dataclass_fields__} - {"schema", "token_table"}
    extra = set(doc) - known - {"schema", "tokens", "steps"}
    if extra:
        raise ValidationError(f"unknown job fields {sorted(extra)}")
    kwargs = {k: v for k, v in doc.items() if k in known}
    if "steps" in doc:
        kwargs["backend"] = f"{kwargs.get('backend', 'stub')}:steps={int(doc['steps'])}"
    return GenerationJob(schema=schema, token_table=table, **kwargs)


def job_to_dict(job: GenerationJob) -> dict:
    out = asdict(job)
    out.pop("schema")
    out.pop("token_table")
    out.pop("spatial_condition")
    return out
