"""Command-line entry point: ``itigen <command> [options]``.

Exit codes: 0 success, 2 invalid input, 3 backend unavailable, 4 numeric
failure. A YAML ``--config`` may hold a root ``seed``, ``encoder``,
``backend`` and per-command sections (``training``, ``generate``,
``benchmark``); command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import benchmark as bench
from . import report as reporting
from .core import load_schema, save_schema
from .datasets import load_dataset, make_variant
from .encoders import cache_reference_features, make_encoder
from .errors import ItiGenError, ValidationError
from .evaluation import (GaussianStats, MetricReport, classify, empirical_distribution, fid,
                         fit_gaussian, ingest_manual_labels, kl_report, label_embeddings,
                         label_prompt_table, write_reports)
from .generation import generate, job_to_dict, load_job, make_backend, read_manifest
from .synthetic import make_world
from .training import load_training_config, train, write_trace


def derive_seed(root: int, label: str) -> int:
    """Child seed for one pipeline stage, so stages never share a random stream."""
    digest = hashlib.sha256(f"{int(root)}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must be a mapping")
    return data


class Context:
    def __init__(self, args):
        self.args = args
        self.config = _read_config(args.config)
        seed = args.seed if args.seed is not None else self.config.get("seed")
        self.root_seed = None if seed is None else int(seed)
        self.encoder_spec = args.encoder or self.config.get("encoder")
        self.backend_spec = args.backend or self.config.get("backend")
        self.out = Path(args.out) if args.out else None

    def seed_for(self, label: str, fallback: int = 0) -> int:
        return fallback if self.root_seed is None else derive_seed(self.root_seed, label)

    def section(self, name: str) -> dict:
        return dict(self.config.get(name) or {})

    def out_dir(self, default: str) -> Path:
        path = self.out or Path(default)
        path.mkdir(parents=True, exist_ok=True)
        return path


def _print(*parts):
    print(*parts, flush=True)


def cmd_synth(ctx: Context) -> int:
    a = ctx.args
    sizes = tuple(int(k) for k in a.sizes.split(","))
    names = a.names.split(",") if a.names else None
    if names is not None and len(names) != len(sizes):
        raise ValidationError("--names must list one name per size")
    categories = None
    if a.categories:
        categories = [c.split("/") for c in a.categories.split(",")]
        if [len(c) for c in categories] != list(sizes):
            raise ValidationError("--categories must match --sizes")
    aux = {}
    for item in a.aux or []:
        key, _, values = item.partition("=")
        aux[key] = tuple(values.split(","))
    seed = ctx.seed_for("synth", a.world_seed)
    world = make_world(sizes, names, categories, seed=seed, d_tok=a.d_tok, d_emb=a.d_emb)
    out = ctx.out_dir("synthetic")
    world.write_dataset(out / "data", a.per_category, seed=seed, aux=aux)
    save_schema(world.attr_set, out / "schema.yaml")
    world.encoder.save(out / "encoder.json")
    (out / "prompt.txt").write_text(world.prompt + "\n")
    _print(f"wrote {out / 'data'} ({a.per_category} images per category), "
           f"{out / 'schema.yaml'}, {out / 'encoder.json'}")
    return 0


def cmd_train(ctx: Context) -> int:
    a = ctx.args
    attr_set = load_schema(a.schema)
    manifest = load_dataset(a.data)
    reference = manifest.reference_set(attr_set)
    section = ctx.section("training")
    prompt = a.prompt or section.pop("prompt", None)
    overrides = {"epochs": a.epochs, "batch_size": a.batch_size, "learning_rate": a.lr,
                 "lambda_sem": a.lambda_sem, "sem_reading": a.sem_reading, "kernel": a.kernel}
    if a.per_attribute:
        overrides["per_attribute"] = True
    if ctx.root_seed is not None:
        overrides["seed"] = ctx.seed_for("train")
    config = load_training_config(None, {**section, **{k: v for k, v in overrides.items()
                                                         if v is not None}})
    if not prompt:
        raise ValidationError("a base prompt is required (--prompt)")
    encoder = make_encoder(ctx.encoder_spec)
    reference = cache_reference_features(encoder, reference, cache_root=a.feature_cache,
                                         base_dir=manifest.root)
    result = train(attr_set, reference, prompt, encoder, config,
                   log=None if a.quiet else lambda msg: _print(msg))
    out = ctx.out_dir("train_out")
    result.table.save(out / "tokens.itt")
    write_trace(result.trace, out / "trace.csv")
    summary = {"epochs": config.epochs, "steps_per_epoch": result.steps_per_epoch,
               "final": {k: result.final(k) for k in ("l_dir", "l_cos", "l_sem", "l_total")},
               "config": config.to_dict(), "schema_hash": attr_set.schema_hash(),
               "encoder": encoder.identifier}
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    final = summary["final"]
    _print(f"trained {attr_set.names} for {config.epochs} epochs in {result.wall_time:.2f}s; "
           f"final l_total={final['l_total']:.6f} l_sem={final['l_sem']:.6f}; "
           f"tokens -> {out / 'tokens.itt'}")
    return 0


def _job_encoder(ctx: Context, job, job_path: Path) -> str:
    spec = ctx.encoder_spec or job.encoder
    if spec.endswith(".json") and not Path(spec).is_absolute() and ctx.encoder_spec is None:
        spec = str(job_path.parent / spec)
    return spec


def cmd_generate(ctx: Context) -> int:
    a = ctx.args
    overrides = {**ctx.section("generate"), "count": a.count, "method": a.method,
                 "backend": ctx.backend_spec}
    if ctx.root_seed is not None:
        overrides["seed"] = ctx.seed_for("generate")
    job_path = Path(a.job)
    job = load_job(job_path, overrides)
    job.encoder = _job_encoder(ctx, job, job_path)
    encoder = make_encoder(job.encoder)
    backend = make_backend(job.backend, encoder)
    out = ctx.out_dir("generate_out")
    before = len([r for r in read_manifest(out / "manifest.tsv") if r["method"] == job.method])
    records = generate(job, encoder, backend, out)
    save_schema(job.joint_attributes, out / "schema.yaml")
    (out / f"job_{job.method}.json").write_text(json.dumps(job_to_dict(job), indent=2,
                                                           sort_keys=True))
    after = len([r for r in read_manifest(out / "manifest.tsv") if r["method"] == job.method])
    _print(f"{job.method}: {len(records)} images over {job.joint_attributes.joint_size} "
           f"combination(s), {after - before} newly generated -> {out}")
    return 0


def _reference_stats(spec: str, encoder) -> GaussianStats:
    path = Path(spec)
    if path.is_file():
        return GaussianStats.load(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".npy"))
        return fit_gaussian([encoder.encode_image(p) for p in files])
    raise ValidationError(f"reference stats {spec} is neither a stats file nor an image directory")


def cmd_evaluate(ctx: Context) -> int:
    a = ctx.args
    run = Path(a.run)
    rows = read_manifest(run / "manifest.tsv")
    if not rows:
        raise ValidationError(f"{run} has no generated images (manifest.tsv missing or empty)")
    attr_set = load_schema(a.schema or run / "schema.yaml")
    encoder = make_encoder(ctx.encoder_spec)
    ref_stats = _reference_stats(a.reference_stats, encoder) if a.reference_stats else None
    if ref_stats is not None and a.save_stats:
        ref_stats.save(a.save_stats)
    manual = None
    if a.labels != "classifier":
        manual = {r.image: r.combination for r in ingest_manual_labels(a.labels, attr_set)}
    embeddings = label_embeddings(attr_set, encoder, template=a.label_template) if manual is None else None

    methods = list(dict.fromkeys(r["method"] for r in rows))
    if a.method:
        methods = [m for m in methods if m in a.method]
    reports = []
    for method in methods:
        mrows = [r for r in rows if r["method"] == method]
        if manual is not None:
            gaps = [r["path"] for r in mrows if r["path"] not in manual]
            if gaps:
                raise ValidationError(f"label file has no row for {len(gaps)} image(s):\n  "
                                      + "\n  ".join(gaps))
            combos = [manual[r["path"]] for r in mrows]
        else:
            combos = [classify(run / r["path"], attr_set, encoder, embeddings=embeddings)
                      for r in mrows]
        kl = kl_report(empirical_distribution(combos, attr_set), attr_set)
        fid_value = None
        if ref_stats is not None:
            feats = [encoder.encode_image(run / r["path"]) for r in mrows]
            fid_value = fid(fit_gaussian(feats), ref_stats)
        prompts = label_prompt_table(attr_set) if a.label_template is None else {
            attr.name: {c: list(attr.prompts_for(c, a.label_template)) for c in attr.categories}
            for attr in attr_set}
        reports.append(MetricReport(
            method, attr_set.schema_hash(), "manual" if manual is not None else "classifier",
            len(mrows), kl, fid_value, ref_stats.sample_count if ref_stats else None,
            encoder.identifier, prompts))
    out = ctx.out or run
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "metrics.json")
    text = format_reports(reports)
    (out / "metrics.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def format_reports(reports) -> str:
    lines = []
    for r in reports:
        lines += [f"method: {r.method}", f"  schema: {r.schema_hash}",
                  f"  labels: {r.label_source} ({r.sample_count} images)",
                  f"  D joint (nats): {r.kl['joint']:.6f}"]
        lines += [f"  D {name} (nats): {v:.6f}" for name, v in r.kl["marginals"].items()]
        if r.fid is not None:
            lines.append(f"  FID: {r.fid:.4f} ({r.sample_count} vs {r.reference_count} images)")
        lines.append(f"  extractor: {r.extractor}")
    return "\n".join(lines) + "\n"


def cmd_benchmark(ctx: Context) -> int:
    a = ctx.args
    spec = ctx.encoder_spec
    if spec and not str(spec).startswith("toy"):
        raise ValidationError("the benchmark runs on the toy encoder only")
    section = ctx.section("benchmark")
    pick = lambda key, value, default: value if value is not None else section.get(key, default)
    report = bench.run_benchmark(
        max_n=pick("max_n", a.max_n, 5),
        images_per_attribute=pick("images_per_attribute", a.images_per_attribute, 400),
        repetitions=pick("repetitions", a.repetitions, 3), epochs=pick("epochs", a.epochs, 1),
        kernel=pick("kernel", a.kernel, "auto"), d_tok=pick("d_tok", a.d_tok, 768),
        d_emb=pick("d_emb", a.d_emb, 512), seed=ctx.seed_for("benchmark"),
        force=a.force, log=None if a.quiet else _print)
    out = ctx.out_dir("benchmark_out")
    bench.write_csv(report, out / "benchmark.csv")
    (out / "benchmark.json").write_text(json.dumps(report.to_dict(), indent=2))
    bench.plot([{"n_attributes": r.n_attributes, "mean_seconds": r.mean_seconds,
                 "std_seconds": r.std_seconds} for r in report.rows],
               out / "benchmark.png", (report.slope, report.intercept))
    _print(f"repetitions: {report.rows[0].repetitions}; ln(time) slope {report.slope:.4f} "
           f"(x{np.exp(report.slope):.3f} per attribute), R^2 {report.r_squared:.4f}; "
           f"calls double per attribute: {report.calls_double}")
    return 0


def cmd_make_variant(ctx: Context) -> int:
    a = ctx.args
    manifest = load_dataset(a.data)
    variant = a.variant
    if Path(variant).suffix in (".yaml", ".yml", ".json") and Path(variant).exists():
        variant = yaml.safe_load(Path(variant).read_text())
    categories = None
    if a.schema:
        schema = load_schema(a.schema)
        categories = schema[schema.index(a.attribute)].categories
    options = {k: v for k, v in (("label", a.label), ("male", a.male), ("female", a.female))
               if v is not None}
    out_manifest = make_variant(manifest, a.attribute, variant, categories,
                                **(options if isinstance(variant, str) else {}))
    target = ctx.out or Path(f"manifest_{out_manifest.variant}.json")
    if target.suffix != ".json":
        target.mkdir(parents=True, exist_ok=True)
        target = target / "manifest.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    out_manifest.save(target)
    counts = {c: len(ps) for c, ps in out_manifest.attributes[a.attribute].items()}
    _print(f"variant {out_manifest.variant!r} of {a.attribute}: {counts} -> {target}")
    return 0


def cmd_report(ctx: Context) -> int:
    a = ctx.args
    out = ctx.out_dir("report_out")
    summary = reporting.build_report(a.runs, out, a.benchmark, a.per_combination)
    sys.stdout.write(summary["text"])
    _print(f"report -> {out / 'report.html'}")
    return 0


def _global_flags(default) -> argparse.ArgumentParser:
    # separate instances: parents share action objects, so defaults must not leak
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--seed", type=int, default=default,
                       help="root seed; each command derives its own child seed")
    flags.add_argument("--config", default=default, help="YAML config file")
    flags.add_argument("--encoder", default=default,
                       help="encoder id (toy, toy:seed=1,d_tok=64) or encoder .json")
    flags.add_argument("--backend", default=default, help="diffusion backend id")
    flags.add_argument("--out", default=default, help="output directory or file")
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="itigen", parents=[_global_flags(None)],
                                description="Inclusive prompt tokens, negative-prompt guidance "
                                            "and fairness evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="learn fair tokens")
    s.add_argument("--schema", required=True)
    s.add_argument("--data", required=True, help="dataset root or manifest.json")
    s.add_argument("--prompt")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lambda-sem", type=float)
    s.add_argument("--sem-reading", choices=("max", "sum"))
    s.add_argument("--per-attribute", action="store_true")
    s.add_argument("--kernel", choices=("auto", "python", "compiled"))
    s.add_argument("--feature-cache")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="run a generation job file")
    s.add_argument("job")
    s.add_argument("--count", type=int)
    s.add_argument("--method")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="KL and FID for a generated run")
    s.add_argument("run", help="run directory containing manifest.tsv")
    s.add_argument("--schema", help="defaults to <run>/schema.yaml")
    s.add_argument("--labels", default="classifier", help="'classifier' or a label CSV")
    s.add_argument("--label-template")
    s.add_argument("--reference-stats", help="stats .npz or an image directory")
    s.add_argument("--save-stats", help="write reference stats computed from a directory")
    s.add_argument("--method", action="append")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", parents=[common], help="training cost vs attribute count")
    s.add_argument("--max-n", type=int)
    s.add_argument("--images-per-attribute", type=int)
    s.add_argument("--repetitions", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--kernel", choices=("auto", "python", "compiled"))
    s.add_argument("--d-tok", type=int)
    s.add_argument("--d-emb", type=int)
    s.add_argument("--force", action="store_true")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("make-variant", parents=[common], help="filter a dataset by labels")
    s.add_argument("--data", required=True)
    s.add_argument("--attribute", required=True)
    s.add_argument("--variant", default="original",
                   help="original, gender-biased, male-only, female-only or a YAML/JSON spec")
    s.add_argument("--schema", help="fixes category order (index 0 = negative)")
    s.add_argument("--label")
    s.add_argument("--male")
    s.add_argument("--female")
    s.set_defaults(func=cmd_make_variant)

    s = sub.add_parser("report", parents=[common], help="comparison tables and image grids")
    s.add_argument("runs", nargs="+")
    s.add_argument("--benchmark", help="benchmark.csv to plot")
    s.add_argument("--per-combination", type=int, default=8)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic toy dataset")
    s.add_argument("--sizes", default="2,2")
    s.add_argument("--names")
    s.add_argument("--categories", help="per attribute, '/'-separated, e.g. no/yes,female/male")
    s.add_argument("--per-category", type=int, default=20)
    s.add_argument("--aux", action="append", help="extra label, e.g. gender=male,female")
    s.add_argument("--d-tok", type=int, default=64)
    s.add_argument("--d-emb", type=int, default=32)
    s.add_argument("--world-seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(Context(args))
    except ItiGenError as exc:
        print(f"itigen: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"itigen: error: {exc}", file=sys.stderr)
        return ValidationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
