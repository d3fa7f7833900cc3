"""Training-cost benchmark over a growing number of binary attributes.

Each run trains on a synthetic world with N binary attributes and times one
or more epochs. Besides wall time, the toy encoder's call counter gives a
machine-independent cost measure: every step encodes the full prompt set of
``2**N`` combinations, and the number of steps per epoch does not depend on N.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .encoders import cache_reference_features
from .errors import ValidationError
from .synthetic import make_world
from .training import TrainingConfig, train

MAX_N_WITHOUT_FORCE = 8
CSV_FIELDS = ["n_attributes", "repetitions", "mean_seconds", "std_seconds",
              "calls_per_epoch", "analytic_calls_per_epoch", "steps_per_epoch",
              "prompt_set_size"]


@dataclass
class BenchmarkRow:
    n_attributes: int
    repetitions: int
    mean_seconds: float
    std_seconds: float
    calls_per_epoch: int
    analytic_calls_per_epoch: int
    steps_per_epoch: int
    prompt_set_size: int
    times: list[float] = field(default_factory=list, repr=False)


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    slope: float
    intercept: float
    r_squared: float
    settings: dict

    @property
    def calls_double(self) -> bool:
        calls = [r.calls_per_epoch for r in self.rows]
        return all(b == 2 * a for a, b in zip(calls, calls[1:]))

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "slope": self.slope,
                "intercept": self.intercept, "r_squared": self.r_squared,
                "growth_per_attribute": math.exp(self.slope), "calls_double": self.calls_double,
                "settings": self.settings}


def fit_log_linear(ns, times) -> tuple[float, float, float]:
    """Least-squares fit of ``ln(time) = slope * N + intercept``; returns (slope, intercept, R^2)."""
    x = np.asarray(ns, dtype=np.float64)
    y = np.log(np.asarray(times, dtype=np.float64))
    if x.size < 2:
        return float("nan"), float(y[0]) if y.size else float("nan"), float("nan")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else float("nan")
    return float(slope), float(intercept), r2


def run_benchmark(max_n: int = 5, images_per_attribute: int = 400, repetitions: int = 3,
                  epochs: int = 1, kernel: str = "auto", d_tok: int = 768, d_emb: int = 512,
                  seed: int = 0, batch_size: int = 8, force: bool = False,
                  log=None) -> BenchmarkReport:
    """Time training for N = 1..max_n binary attributes.

    Reference features are cached before the clock starts, so timings cover
    only the optimization loop.
    """
    if max_n < 1:
        raise ValidationError("max_n must be at least 1")
    if max_n > MAX_N_WITHOUT_FORCE and not force:
        raise ValidationError(
            f"max_n={max_n} exceeds {MAX_N_WITHOUT_FORCE}; cost grows as 2^N, pass force to run")
    if repetitions < 1:
        raise ValidationError("repetitions must be at least 1")
    if images_per_attribute < 2 or images_per_attribute % 2:
        raise ValidationError("images_per_attribute must be an even number >= 2")
    per_category = images_per_attribute // 2
    config = TrainingConfig(epochs=epochs, batch_size=batch_size, seed=seed, kernel=kernel)

    rows = []
    for n in range(1, max_n + 1):
        world = make_world((2,) * n, seed=seed, d_tok=d_tok, d_emb=d_emb)
        ref = cache_reference_features(world.encoder, world.reference_set(per_category, seed))
        times, calls, steps = [], None, 0
        for _ in range(repetitions):
            world.encoder.reset_counters()
            start = time.perf_counter()
            result = train(world.attr_set, ref, world.prompt, world.encoder, config)
            times.append(time.perf_counter() - start)
            per_epoch = set(result.epoch_text_calls)
            if len(per_epoch) != 1:
                raise RuntimeError(f"encoder calls vary across epochs: {result.epoch_text_calls}")
            calls = per_epoch.pop()
            steps = result.steps_per_epoch
        size = world.attr_set.joint_size
        row = BenchmarkRow(n, repetitions, float(np.mean(times)), float(np.std(times)),
                           int(calls), steps * size, steps, size, times)
        rows.append(row)
        if log is not None:
            log(f"N={n}: {row.mean_seconds:.4f}s mean over {repetitions}, "
                f"{row.calls_per_epoch} text encodings/epoch")
    slope, intercept, r2 = fit_log_linear([r.n_attributes for r in rows],
                                          [r.mean_seconds for r in rows])
    settings = {"max_n": max_n, "images_per_attribute": images_per_attribute,
                "repetitions": repetitions, "epochs": epochs, "batch_size": batch_size,
                "d_tok": d_tok, "d_emb": d_emb, "seed": seed,
                "kernel": _kernels.BACKEND if kernel == "auto" else kernel}
    return BenchmarkReport(rows, slope, intercept, r2, settings)


def write_csv(report: BenchmarkReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: getattr(row, k) for k in CSV_FIELDS})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = ("n_attributes", "repetitions", "calls_per_epoch", "analytic_calls_per_epoch",
            "steps_per_epoch", "prompt_set_size")
    return [{k: (int(v) if k in ints else float(v)) for k, v in r.items()} for r in rows]


def plot(rows: list[dict], path, fit: tuple[float, float] | None = None) -> Path:
    """Mean wall time against N on a log axis, with the fitted exponential if given."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ns = np.array([r["n_attributes"] for r in rows], dtype=float)
    means = np.array([r["mean_seconds"] for r in rows])
    stds = np.array([r.get("std_seconds", 0.0) for r in rows])
    if fit is None and len(rows) >= 2:
        fit = fit_log_linear(ns, means)[:2]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(ns, means, yerr=stds, fmt="o", capsize=3, label="mean wall time")
    if fit is not None:
        grid = np.linspace(ns.min(), ns.max(), 100)
        ax.plot(grid, np.exp(fit[0] * grid + fit[1]), "--",
                label=f"exp fit, x{math.exp(fit[0]):.2f} per attribute")
    ax.set_yscale("log")
    ax.set_xlabel("number of binary attributes")
    ax.set_ylabel("seconds per run")
    ax.set_xticks(ns)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def compare_kernels(sizes=(2, 2, 2), batch_size: int = 8, repeats: int = 200,
                    d_emb: int = 512, seed: int = 0) -> dict[str, float]:
    """Mean seconds per call of each available loss kernel on one synthetic step."""
    rng = np.random.default_rng(seed)
    sizes = np.asarray(sizes, dtype=np.int64)
    combos = np.array(np.meshgrid(*[np.arange(k) for k in sizes], indexing="ij"))
    combos = combos.reshape(len(sizes), -1).T.copy()
    E = rng.standard_normal((combos.shape[0], d_emb))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    e_T = E.mean(axis=0) / np.linalg.norm(E.mean(axis=0))
    n_pairs = int(sum(k * (k - 1) // 2 for k in sizes))
    delta_I = rng.standard_normal((n_pairs, d_emb))
    delta_I /= np.linalg.norm(delta_I, axis=1, keepdims=True)
    fa = np.repeat(np.arange(len(sizes)), batch_size)
    fc = np.concatenate([np.arange(batch_size) % k for k in sizes])
    feats = rng.standard_normal((fa.size, d_emb))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    out = {}
    for name in _kernels.AVAILABLE:
        args = (E, e_T, combos, sizes, delta_I, feats, fa, fc, 0.8)
        _kernels.prompt_losses(*args, backend=name)
        start = time.perf_counter()
        for _ in range(repeats):
            _kernels.prompt_losses(*args, backend=name)
        out[name] = (time.perf_counter() - start) / repeats
    return out
