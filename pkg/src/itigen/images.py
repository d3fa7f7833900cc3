"""PNG helpers for synthetic images that carry their latent vector.

Synthetic reference images and stub-backend outputs are ordinary PNG files
whose pixels are a rendering of a latent vector; the exact float64 latent is
stored in a ``tEXt`` chunk so the toy encoder can recover it bit-for-bit.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .errors import IngestionError

LATENT_KEY = "itigen_latent"


def render_latent(latent: np.ndarray, size: int = 32) -> np.ndarray:
    """Deterministic RGB rendering of a latent, shape ``(size, size, 3)`` uint8."""
    v = np.tanh(np.asarray(latent, dtype=np.float64))
    n = size * size * 3
    tiled = np.resize(v, n).reshape(size, size, 3)
    return np.round((tiled + 1.0) * 127.5).astype(np.uint8)


def save_latent_png(path, latent: np.ndarray, size: int = 32) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngImagePlugin.PngInfo()
    info.add_text(LATENT_KEY, json.dumps([float(x) for x in np.ravel(latent)]))
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(render_latent(latent, size)).save(tmp, format="PNG", pnginfo=info)
    os.replace(tmp, path)
    return path


def read_image(path) -> tuple[np.ndarray | None, np.ndarray]:
    """Load ``(latent or None, pixels)`` from an image file.

    ``.npy`` files are treated as raw latents. Anything PIL cannot decode
    raises :class:`IngestionError` naming the file.
    """
    path = Path(path)
    try:
        if path.suffix == ".npy":
            arr = np.load(path, allow_pickle=False)
            return np.asarray(arr, dtype=np.float64).ravel(), np.zeros((0, 0, 3), np.uint8)
        with Image.open(path) as img:
            img.load()
            text = getattr(img, "text", {}) or {}
            pixels = np.asarray(img.convert("RGB").resize((16, 16), Image.BILINEAR))
    except (OSError, ValueError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}", [path]) from None
    latent = None
    if LATENT_KEY in text:
        try:
            latent = np.asarray(json.loads(text[LATENT_KEY]), dtype=np.float64)
        except (ValueError, TypeError) as exc:
            raise IngestionError(f"corrupt latent chunk in {path}: {exc}", [path]) from None
    return latent, pixels
