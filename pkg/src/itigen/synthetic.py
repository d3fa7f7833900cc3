"""Synthetic attribute worlds for the toy encoder.

Each attribute gets a planted unit direction in embedding space, orthogonal
to the base prompt's embedding and to every other attribute. Reference images
are latents ``base_weight * e_T + sum_m level(c_m) * u_m + noise``, so image
directions between categories are known in closed form. Planted vocabulary
words make label prompts and hard prompts point along the same directions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import AttributeSet, AttributeSpec, HardPhrase, ImageRecord, ReferenceSet
from .encoders import ToyEncoder
from .images import save_latent_png

DEFAULT_PROMPT = "a headshot of a person"


def category_levels(k: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, k)


@dataclass
class SyntheticWorld:
    attr_set: AttributeSet
    encoder: ToyEncoder
    prompt: str
    directions: np.ndarray
    base_weight: float = 2.0
    noise: float = 0.1

    def latent(self, combination, rng: np.random.Generator) -> np.ndarray:
        e_T = self.encoder.embed_text(self.prompt)
        v = self.base_weight * e_T
        for m, c in enumerate(combination):
            v = v + category_levels(self.attr_set[m].size)[c] * self.directions[m]
        return v + self.noise * rng.standard_normal(self.encoder.d_emb) / np.sqrt(self.encoder.d_emb)

    def reference_set(self, per_category: int, seed: int = 0) -> ReferenceSet:
        """In-memory reference images; other attributes are drawn uniformly and kept as labels."""
        rng = np.random.default_rng(seed)
        images = {}
        for m, attr in enumerate(self.attr_set):
            groups = []
            for i in range(attr.size):
                group = []
                for _ in range(per_category):
                    combo = [int(rng.integers(a.size)) for a in self.attr_set]
                    combo[m] = i
                    labels = self.attr_set.combination_names(combo)
                    group.append(ImageRecord(latent=self.latent(combo, rng), labels=labels))
                groups.append(group)
            images[attr.name] = groups
        return ReferenceSet(self.attr_set, images)

    def write_dataset(self, root, per_category: int, seed: int = 0,
                      aux: dict[str, tuple[str, ...]] | None = None) -> Path:
        """Write PNG reference images in ``<root>/<attr>/<category>/`` plus ``manifest.json``.

        ``aux`` adds extra label-only attributes (e.g. a gender label on every
        eyeglasses image) drawn uniformly at random, for variant building.
        """
        root = Path(root)
        rng = np.random.default_rng(seed)
        ref = self.reference_set(per_category, seed)
        manifest = {"root": ".", "attributes": {}, "labels": {}, "variant": "original"}
        for attr in self.attr_set:
            manifest["attributes"][attr.name] = {}
            for i, cat in enumerate(attr.categories):
                rels = []
                for n, rec in enumerate(ref.images[attr.name][i]):
                    rel = f"{attr.name}/{cat}/{n:05d}.png"
                    save_latent_png(root / rel, rec.latent)
                    labels = dict(rec.labels)
                    for name, values in (aux or {}).items():
                        labels[name] = values[int(rng.integers(len(values)))]
                    manifest["labels"][rel] = labels
                    rels.append(rel)
                manifest["attributes"][attr.name][cat] = rels
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return root


def word_for(attr: str, category: str) -> str:
    return f"{attr}_{category}".lower().replace(" ", "_")


def make_world(sizes=(2, 2), names=None, categories=None, seed: int = 0, d_tok: int = 64,
               d_emb: int = 32, tokens_per_category: int = 3, prompt: str = DEFAULT_PROMPT,
               label_strength: float = 1.0, noise: float = 0.1) -> SyntheticWorld:
    """Build a world with one planted orthogonal direction per attribute."""
    names = list(names or [f"attr{m}" for m in range(len(sizes))])
    categories = list(categories or [[f"c{i}" for i in range(k)] for k in sizes])
    base = ToyEncoder(seed=seed, d_tok=d_tok, d_emb=d_emb)
    e_T = base.embed_text(prompt)
    if len(sizes) + 1 > d_emb:
        raise ValueError("not enough embedding dimensions for the planted directions")
    rng = np.random.default_rng(seed + 7919)
    basis = [e_T]
    for _ in sizes:
        v = rng.standard_normal(d_emb)
        for b in basis:
            v -= (v @ b) * b
        basis.append(v / np.linalg.norm(v))
    directions = np.array(basis[1:])

    # planted words: a single word encodes to +/- the attribute direction
    pinv = np.linalg.pinv(base.text_map)
    vocab = {}
    attrs = []
    for m, (name, cats) in enumerate(zip(names, categories)):
        levels = category_levels(len(cats))
        phrases, labels = {}, {}
        for i, cat in enumerate(cats):
            word = word_for(name, cat)
            vocab[word] = pinv @ (label_strength * levels[i] * directions[m]) * np.sqrt(d_tok)
            labels[cat] = (f"{prompt} {word}",)
            if len(cats) == 2 and i == 0:
                phrases[cat] = HardPhrase(append=word, negative=word_for(name, cats[1]))
            else:
                phrases[cat] = HardPhrase(append=word)
        attrs.append(AttributeSpec(name, tuple(cats), tokens_per_category, phrases, labels))
    encoder = ToyEncoder(seed=seed, d_tok=d_tok, d_emb=d_emb, vocabulary=vocab)
    return SyntheticWorld(AttributeSet(attrs), encoder, prompt, directions, noise=noise)
