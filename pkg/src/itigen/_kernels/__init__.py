"""Hot loss kernel with a compiled implementation and a numpy fallback.

The Cython extension is used when it was built; set ``ITIGEN_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the implementation in use.
"""

import os

import numpy as np

from . import _pykernels
from ._pykernels import SEM_MAX, SEM_SUM  # noqa: F401

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

AVAILABLE = {"python": _pykernels.prompt_losses}
if _ckernels is not None:
    AVAILABLE["compiled"] = _ckernels.prompt_losses

if os.environ.get("ITIGEN_PURE_PYTHON") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def get_kernel(name=None):
    name = name or BACKEND
    if name == "auto":
        name = BACKEND
    try:
        return AVAILABLE[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(AVAILABLE)}") from None


def prompt_losses(E, e_T, combos, sizes, delta_I, feats, feat_attr, feat_cat,
                  lam, sem_mode=SEM_MAX, use_dir=True, normalize=True, backend=None):
    """Dispatch to the selected kernel after coercing array layouts."""
    d = E.shape[1]
    f64 = lambda a, shape: np.ascontiguousarray(a, dtype=np.float64).reshape(shape)
    i64 = lambda a: np.ascontiguousarray(a, dtype=np.int64)
    delta_I = f64(delta_I if delta_I is not None else np.zeros((0, d)), (-1, d))
    feats = f64(feats if feats is not None else np.zeros((0, d)), (-1, d))
    combos = i64(combos).reshape(E.shape[0], -1)
    return get_kernel(backend)(
        f64(E, E.shape), f64(e_T, (d,)), combos, i64(sizes), delta_I, feats,
        i64(feat_attr).reshape(-1), i64(feat_cat).reshape(-1),
        float(lam), int(sem_mode), bool(use_dir), bool(normalize))
