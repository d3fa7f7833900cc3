"""Joint vision-language encoders and reference-feature caching.

The training code only needs an encoder that maps token-embedding sequences
and images into one unit-norm embedding space, plus a vector-Jacobian product
for the text path. :class:`ToyEncoder` provides all of that deterministically
from a seed, which is what the test-suite and the benchmarks run on.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import ImageRecord, ReferenceSet, check_sequence_length
from .errors import BackendUnavailable, IngestionError, NumericError, ValidationError
from .images import read_image

_EPS = 1e-12


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm < _EPS:
        raise NumericError(f"cannot normalize vector with norm {norm}")
    return v / norm


def _derived_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Encoder(ABC):
    """Interface shared by every text/image encoder backend."""

    identifier: str
    d_tok: int
    d_emb: int
    max_sequence_length: int

    @abstractmethod
    def tokenize(self, text: str) -> np.ndarray:
        """Token-embedding sequence of shape ``(L, d_tok)`` for ``text``."""

    @abstractmethod
    def encode_text_batch(self, sequences: np.ndarray) -> np.ndarray:
        """Encode ``(P, L, d_tok)`` sequences into ``(P, d_emb)`` unit vectors."""

    def text_vjp(self, sequences: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Pull ``grad`` (``(P, d_emb)``) back to the input token vectors."""
        raise NotImplementedError(f"{self.identifier} is not differentiable")

    @abstractmethod
    def encode_image(self, image) -> np.ndarray:
        """Unit-norm ``(d_emb,)`` embedding of an image record, path or latent."""

    def encode_text(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        return self.encode_text_batch(tokens[None])[0]

    def embed_text(self, text: str) -> np.ndarray:
        return self.encode_text(self.tokenize(text))

    def _check_sequences(self, sequences: np.ndarray) -> np.ndarray:
        sequences = np.asarray(sequences, dtype=np.float64)
        if sequences.ndim != 3 or sequences.shape[2] != self.d_tok:
            raise ValidationError(
                f"expected (P, L, {self.d_tok}) token sequences, got shape {sequences.shape}")
        if sequences.shape[1] == 0:
            raise ValidationError("cannot encode an empty token sequence")
        check_sequence_length(sequences.shape[1], self.max_sequence_length)
        return sequences


class ToyEncoder(Encoder):
    """Deterministic, differentiable stand-in for a CLIP-style encoder.

    Text: the token vectors are averaged, passed through one fixed seeded
    linear map and L2-normalized. Words are whitespace tokens; each word's
    vector comes from ``vocabulary`` if planted there, otherwise from a
    generator seeded by ``(seed, word)``.

    Images: a latent attached to the record (or stored in the PNG) is
    normalized directly; plain pixel images go through a fixed seeded
    projection of a 16x16 RGB thumbnail.

    ``text_calls`` counts encoded sequences and ``image_calls`` encoded
    images, so tests and benchmarks can measure encoder work exactly.
    """

    def __init__(self, seed: int = 0, d_tok: int = 64, d_emb: int = 32,
                 max_sequence_length: int = 77,
                 vocabulary: Mapping[str, np.ndarray] | None = None):
        if min(d_tok, d_emb, max_sequence_length) < 1:
            raise ValidationError("encoder dimensions must be positive")
        self.seed = int(seed)
        self.d_tok = int(d_tok)
        self.d_emb = int(d_emb)
        self.max_sequence_length = int(max_sequence_length)
        self.vocabulary = {}
        for word, vec in (vocabulary or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.d_tok,):
                raise ValidationError(f"vocabulary vector for {word!r} has shape {vec.shape}")
            self.vocabulary[word.lower()] = vec
        rng = np.random.default_rng(_derived_seed(self.seed, "text-map"))
        self.text_map = rng.standard_normal((self.d_emb, self.d_tok)) / np.sqrt(self.d_tok)
        rng = np.random.default_rng(_derived_seed(self.seed, "pixel-map"))
        self.pixel_map = rng.standard_normal((self.d_emb, 16 * 16 * 3)) / np.sqrt(768.0)
        self.text_calls = 0
        self.image_calls = 0
        self.identifier = self._make_identifier()

    def _make_identifier(self) -> str:
        ident = f"toy-s{self.seed}-t{self.d_tok}-e{self.d_emb}"
        if self.vocabulary:
            h = hashlib.sha256()
            for word in sorted(self.vocabulary):
                h.update(word.encode())
                h.update(self.vocabulary[word].tobytes())
            ident += "-v" + h.hexdigest()[:10]
        return ident

    def to_dict(self) -> dict:
        return {"kind": "toy", "seed": self.seed, "d_tok": self.d_tok, "d_emb": self.d_emb,
                "max_sequence_length": self.max_sequence_length,
                "vocabulary": {w: v.tolist() for w, v in sorted(self.vocabulary.items())}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ToyEncoder":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read encoder file {path}: {exc}") from None
        if data.get("kind") != "toy":
            raise ValidationError(f"{path} does not describe a toy encoder")
        return cls(data["seed"], data["d_tok"], data["d_emb"],
                   data.get("max_sequence_length", 77), data.get("vocabulary"))

    def reset_counters(self) -> None:
        self.text_calls = 0
        self.image_calls = 0

    @staticmethod
    def words(text: str) -> list[str]:
        return re.sub(r"[,.;:!?]", " ", text.lower()).split()

    def word_vector(self, word: str) -> np.ndarray:
        word = word.lower()
        if word in self.vocabulary:
            return self.vocabulary[word]
        rng = np.random.default_rng(_derived_seed(self.seed, "word", word))
        return rng.standard_normal(self.d_tok)

    def tokenize(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("cannot tokenize empty text")
        words = self.words(text)
        if not words:
            raise ValidationError(f"no tokens in {text!r}")
        check_sequence_length(len(words), self.max_sequence_length)
        return np.vstack([self.word_vector(w) for w in words])

    def encode_text_batch(self, sequences: np.ndarray) -> np.ndarray:
        sequences = self._check_sequences(sequences)
        self.text_calls += sequences.shape[0]
        z = sequences.mean(axis=1) @ self.text_map.T
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(norms < _EPS) or not np.all(np.isfinite(norms)):
            raise NumericError("text embedding collapsed to zero or non-finite norm")
        return z / norms

    def text_vjp(self, sequences: np.ndarray, grad: np.ndarray) -> np.ndarray:
        sequences = self._check_sequences(sequences)
        z = sequences.mean(axis=1) @ self.text_map.T
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        e = z / norms
        g_z = (grad - e * np.sum(e * grad, axis=1, keepdims=True)) / norms
        g_u = g_z @ self.text_map
        length = sequences.shape[1]
        return np.broadcast_to((g_u / length)[:, None, :], sequences.shape).copy()

    def encode_image(self, image) -> np.ndarray:
        self.image_calls += 1
        if isinstance(image, ImageRecord):
            if image.latent is not None:
                return self._from_latent(image.latent, image.describe())
            if image.path is None:
                raise IngestionError("image record has neither a path nor a latent")
            image = image.path
        if isinstance(image, np.ndarray):
            return self._from_latent(image, "<array>")
        latent, pixels = read_image(image)
        if latent is not None:
            return self._from_latent(latent, str(image))
        return _normalize(self.pixel_map @ (pixels.astype(np.float64).ravel() / 255.0 - 0.5))

    def _from_latent(self, latent, where: str) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64).ravel()
        if latent.shape != (self.d_emb,):
            raise IngestionError(
                f"latent of {where} has width {latent.size}, encoder expects {self.d_emb}", [where])
        return _normalize(latent)


class UnavailableEncoder(Encoder):
    """Placeholder for real backends whose weights are not installed."""

    def __init__(self, identifier: str, reason: str):
        self.identifier = identifier
        self.reason = reason

    def _fail(self, *args, **kwargs):
        raise BackendUnavailable(f"encoder {self.identifier!r} is unavailable: {self.reason}")

    tokenize = encode_text_batch = encode_image = _fail

    @property
    def d_tok(self):
        self._fail()

    d_emb = max_sequence_length = d_tok


def make_encoder(spec: str | None = None, **overrides) -> Encoder:
    """Build an encoder from an id such as ``toy``, ``toy:seed=3,d_tok=128``.

    A path to a ``.json`` file saved by :meth:`ToyEncoder.save` is also accepted.

    Any other id names a real backend adapter; none ship with the package, so
    those raise :class:`BackendUnavailable` when used.
    """
    spec = str(spec or "toy")
    if spec.endswith(".json"):
        if not Path(spec).exists():
            raise ValidationError(f"encoder file {spec} does not exist")
        return ToyEncoder.load(spec)
    name, _, rest = spec.partition(":")
    if name != "toy":
        return UnavailableEncoder(spec, "no adapter installed for this backend")
    kwargs: dict = {}
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        if key not in ("seed", "d_tok", "d_emb", "max_sequence_length"):
            raise ValidationError(f"unknown toy encoder option {key!r}")
        kwargs[key] = int(value)
    kwargs.update(overrides)
    return ToyEncoder(**kwargs)


def content_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class FeatureCache:
    """On-disk feature store: ``<root>/<encoder_id>/<hash>.feat`` plus ``index.tsv``."""

    def __init__(self, root, encoder: Encoder):
        self.dir = Path(root) / encoder.identifier
        self.d_emb = encoder.d_emb
        self.index_path = self.dir / "index.tsv"

    def feature_path(self, digest: str) -> Path:
        return self.dir / f"{digest}.feat"

    def get(self, digest: str) -> np.ndarray | None:
        path = self.feature_path(digest)
        if not path.exists():
            return None
        feat = np.fromfile(path, dtype="<f8")
        return feat if feat.shape == (self.d_emb,) else None

    def put(self, digest: str, feature: np.ndarray) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.feature_path(digest)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
        np.ascontiguousarray(feature, dtype="<f8").tofile(tmp)
        os.replace(tmp, path)

    def indexed(self) -> set[str]:
        if not self.index_path.exists():
            return set()
        return {line.split("\t", 1)[0] for line in self.index_path.read_text().splitlines()
                if line and not line.startswith("hash\t")}

    def append_index(self, rows: list[tuple[str, str]]) -> None:
        if not rows:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        known = self.indexed()
        new = not self.index_path.exists()
        with open(self.index_path, "a") as fh:
            if new:
                fh.write("hash\tpath\td_emb\n")
            for digest, rel in rows:
                if digest not in known:
                    fh.write(f"{digest}\t{rel}\t{self.d_emb}\n")
                    known.add(digest)


def cache_reference_features(encoder: Encoder, reference_set: ReferenceSet,
                             cache_root=None, base_dir=None, workers: int = 1) -> ReferenceSet:
    """Return a copy of ``reference_set`` whose records all carry features.

    Files are keyed by content hash, so renaming or reordering a dataset still
    hits the cache. Unreadable files are collected and reported together after
    every readable one has been cached.
    """
    cache = FeatureCache(cache_root, encoder) if cache_root is not None else None
    records = reference_set.all_records()
    todo = [r for r in records if r.feature is None]

    def work(record: ImageRecord):
        if record.path is None or cache is None:
            return record, encoder.encode_image(record), None
        digest = content_hash(record.path)
        feat = cache.get(digest)
        if feat is None:
            feat = encoder.encode_image(record)
            cache.put(digest, feat)
        return record, feat, digest

    def safe(record):
        try:
            return work(record)
        except (IngestionError, OSError) as exc:
            return record, exc, None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(safe, todo))
    else:
        results = [safe(r) for r in todo]

    computed: dict[int, np.ndarray] = {}
    bad, index_rows = [], []
    for record, feat, digest in results:
        if isinstance(feat, Exception):
            bad.append(record.describe())
            continue
        computed[id(record)] = feat
        if digest is not None:
            rel = record.path
            if base_dir is not None:
                try:
                    rel = Path(record.path).resolve().relative_to(Path(base_dir).resolve())
                except ValueError:
                    pass
            index_rows.append((digest, str(rel)))
    if cache is not None:
        cache.append_index(index_rows)
    if bad:
        raise IngestionError(f"{len(bad)} unreadable image(s): {', '.join(bad)}", bad)

    out = {}
    for attr in reference_set.attr_set:
        groups = []
        for group in reference_set.images[attr.name]:
            groups.append([ImageRecord(r.path, r.latent, computed.get(id(r), r.feature),
                                       dict(r.labels)) for r in group])
        out[attr.name] = groups
    return ReferenceSet(reference_set.attr_set, out)
