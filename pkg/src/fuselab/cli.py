"""Operator-facing command line: data generation, training, teacher
extraction, fusion, merging, evaluation, gradient checking, and ablation
sweeps.

Every command validates its config up front, writes artifacts plus a
manifest into a fresh timestamped subdirectory of the output dir (or a
fixed one with --overwrite), and reports failures as one machine-readable
JSON line on stderr with a nonzero exit code. Set IFF_LOG=error|info|debug
to control logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .config import Experiment, build_manifest, load_config, write_manifest
from .errors import ConfigError
from .gradcheck import all_passed, run_gradcheck
from .merging import apply_merge
from .pipeline import (
    FusionConfig,
    fuse_pairwise,
    fuse_unified,
    layer_blocks,
    train_sft,
)
from .teachercache import CacheReader, extract_cache
from .toylab import (
    Corpus,
    evaluate,
    gen_corpus,
    get_tokenizer,
    init_model,
    load_model,
    load_samples,
    mixed_corpus,
    save_model,
    save_samples,
    vocabularies_mismatch,
    zero_model,
)

log = logging.getLogger("fuselab")

K_SWEEP = (5, 10, 15, 20, 25)
LAMBDA_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


def _setup_logging() -> None:
    level = os.environ.get("IFF_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _resolve_out_dir(args, doc: dict, command: str) -> Path:
    base = Path(args.out) if args.out else Path(doc["output_dir"])
    if args.overwrite:
        run_dir = base / command
        if run_dir.exists():
            shutil.rmtree(run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        run_dir = base / f"{command}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def _experiment(args) -> tuple[dict, Experiment, dict[str, Path]]:
    doc = load_config(args.config)
    inputs: dict[str, Path] = {}
    if args.config:
        inputs["config"] = Path(args.config)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
        doc["training"]["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        doc["fusion"]["lambda"] = args.lam
    if getattr(args, "topk", None) is not None:
        doc["fusion"]["topk"] = args.topk
    if getattr(args, "merge", None):
        doc["merge"]["method"] = args.merge
    return doc, Experiment(doc), inputs


def _write_table(
    rows: list[dict], columns: list[str], out_dir: Path, name: str, mark: int | None = None
) -> None:
    """Emit one result table as CSV and as aligned text."""
    with open(out_dir / f"{name}.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    rendered = [[_fmt_cell(r[c]) for c in columns] for r in rows]
    widths = [
        max(len(col), *(len(row[i]) for row in rendered)) for i, col in enumerate(columns)
    ]
    with open(out_dir / f"{name}.txt", "w", encoding="utf-8") as fh:
        fh.write("  ".join(col.ljust(w) for col, w in zip(columns, widths)).rstrip() + "\n")
        for i, row in enumerate(rendered):
            line = "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            fh.write(line + (" *" if mark is not None and i == mark else "") + "\n")


def _fmt_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _load_data(args, exp: Experiment, task: str | None = None) -> Corpus:
    """One task's corpus, or the mixed corpus when task is None.

    With --data the TSVs produced by gen-data are read back; otherwise the
    corpus is regenerated from config (same seeds, identical content).
    """
    data_dir = getattr(args, "data", None)
    if data_dir is None:
        return exp.corpus_for(task) if task else exp.mixed()
    data = Path(data_dir)
    tasks = [task] if task else exp.tasks
    parts = []
    for t in tasks:
        parts.append(
            Corpus(t, load_samples(data / f"{t}.train.tsv"), load_samples(data / f"{t}.test.tsv"))
        )
    return parts[0] if task else mixed_corpus(parts)


def _check_mismatch(exp: Experiment, pivot_tokenizer: str, source_tokenizers: list[str]) -> None:
    pivot = get_tokenizer(pivot_tokenizer)
    for name in source_tokenizers:
        if not vocabularies_mismatch(pivot, get_tokenizer(name)):
            raise ConfigError(
                f"source tokenizer {name!r} matches the pivot vocabulary; "
                "fusion experiments require mismatched vocabularies"
            )


def cmd_gen_data(args) -> int:
    doc, exp, inputs = _experiment(args)
    out = _resolve_out_dir(args, doc, "gen-data")
    for task in exp.tasks:
        corpus = exp.corpus_for(task)
        save_samples(corpus.train, out / f"{task}.train.tsv")
        save_samples(corpus.test, out / f"{task}.test.tsv")
        log.info("%s: %d train / %d test", task, len(corpus.train), len(corpus.test))
    write_manifest(build_manifest("gen-data", doc, exp.seed, inputs), out)
    print(f"wrote corpora for {len(exp.tasks)} tasks to {out}")
    return 0


def _role_entry(exp: Experiment, args) -> dict:
    if args.role == "pivot":
        return dict(exp.doc["pivot"], id="pivot")
    if not args.id:
        raise ConfigError("--role source requires --id")
    return exp.source_entries([args.id])[0]


def cmd_train_sft(args) -> int:
    doc, exp, inputs = _experiment(args)
    entry = _role_entry(exp, args)
    out = _resolve_out_dir(args, doc, f"train-sft-{entry['id']}")
    corpus = _load_data(args, exp, entry["task"])
    model = init_model(exp.shapes_for(entry["tokenizer"]), entry["tokenizer"], entry["init_seed"])
    result = train_sft(model, corpus, exp.fusion_config(), out_dir=out)
    write_manifest(build_manifest("train-sft", doc, exp.seed, inputs), out)
    last = result.history[-1]
    print(
        f"trained {entry['id']} on {entry['task']}: final train loss "
        f"{last.train_loss:.4f}, artifacts in {out}"
    )
    return 0


def cmd_extract_teacher(args) -> int:
    doc, exp, inputs = _experiment(args)
    out = _resolve_out_dir(args, doc, f"extract-teacher-{args.id}")
    model = load_model(args.model)
    inputs["model"] = Path(args.model)
    corpus = _load_data(args, exp)
    mode = doc["cache"]["mode"]
    k = doc["cache"]["topk"]
    summary = extract_cache(
        model, corpus.train, out / f"{args.id}.iftc", model_id=args.id, mode=mode, k=k
    )
    write_manifest(build_manifest("extract-teacher", doc, exp.seed, inputs), out)
    print(f"extracted {summary.records} records ({summary.bytes_written} bytes) to {out}")
    return 0


def _load_teachers(args, exp: Experiment, inputs: dict[str, Path]):
    if args.live_teachers:
        if not args.teachers:
            raise ConfigError("--live-teachers requires --teachers ckpt,ckpt")
        paths = [Path(p) for p in args.teachers.split(",")]
        teachers = [load_model(p) for p in paths]
        names = [p.stem for p in paths]
        tokenizer_names = [t.tokenizer_id for t in teachers]
    elif args.caches:
        paths = [Path(p) for p in args.caches.split(",")]
        teachers = [CacheReader(p) for p in paths]
        names = [r.model_id for r in teachers]
        tokenizer_names = []
    else:
        raise ConfigError("provide teacher inputs via --caches or --live-teachers/--teachers")
    for name, path in zip(names, paths):
        inputs[f"teacher:{name}"] = path
    return teachers, names, tokenizer_names


def cmd_fuse(args, unified: bool) -> int:
    doc, exp, inputs = _experiment(args)
    command = "fuse-unified" if unified else "fuse-pairwise"
    out = _resolve_out_dir(args, doc, command)
    pivot = load_model(args.pivot)
    inputs["pivot"] = Path(args.pivot)
    teachers, names, tokenizer_names = _load_teachers(args, exp, inputs)
    if tokenizer_names:
        _check_mismatch(exp, pivot.tokenizer_id, tokenizer_names)
    if args.sources:
        wanted = args.sources.split(",")
        picked = {n: t for n, t in zip(names, teachers)}
        missing = [w for w in wanted if w not in picked]
        if missing:
            raise ConfigError(f"unknown teacher ids {missing}")
        teachers = [picked[w] for w in wanted]
        names = wanted
    corpus = _load_data(args, exp)
    merge_spec = exp.merge_spec(args.merge) if not unified else None
    config = exp.fusion_config(merge=merge_spec, source_ids=tuple(names))
    if unified:
        result = fuse_unified(pivot, teachers, corpus, config, out_dir=out)
        steps = result.total_steps
        final = result.model
    else:
        result = fuse_pairwise(pivot, teachers, corpus, config, out_dir=out)
        steps = result.total_steps
        final = result.merged
    acc, ppl = evaluate(final, corpus.test)
    write_manifest(build_manifest(command, doc, exp.seed, inputs), out)
    print(
        f"{command}: {len(teachers)} sources, {steps} optimizer steps, "
        f"test acc {acc:.3f}, ppl {ppl:.3f}; artifacts in {out}"
    )
    return 0


def cmd_merge(args) -> int:
    doc, exp, inputs = _experiment(args)
    out = _resolve_out_dir(args, doc, "merge")
    base = load_model(args.base)
    inputs["base"] = Path(args.base)
    model_paths = [Path(p) for p in args.models.split(",")]
    models = []
    for p in model_paths:
        inputs[f"model:{p.stem}"] = p
        models.append(load_model(p))
    spec = exp.merge_spec(args.merge)
    merged_params = apply_merge(
        base.params, [m.params for m in models], spec, blocks=layer_blocks(base.shapes)
    )
    merged = base.copy()
    merged.params = merged_params
    save_model(merged, out / "merged.iftm")
    write_manifest(build_manifest("merge", doc, exp.seed, inputs), out)
    print(f"merged {len(models)} models with {spec.method} into {out / 'merged.iftm'}")
    return 0


def cmd_eval(args) -> int:
    doc, exp, inputs = _experiment(args)
    out = _resolve_out_dir(args, doc, "eval")
    if args.model == "untrained":
        tokenizer = doc["pivot"]["tokenizer"]
        model = zero_model(exp.shapes_for(tokenizer), tokenizer)
    else:
        model = load_model(args.model)
        inputs["model"] = Path(args.model)
    rows = []
    for task in exp.tasks:
        corpus = _load_data(args, exp, task)
        acc, ppl = evaluate(model, corpus.test)
        rows.append({"domain": task, "accuracy": acc, "perplexity": ppl})
    rows.append(
        {
            "domain": "mean",
            "accuracy": float(np.mean([r["accuracy"] for r in rows])),
            "perplexity": float(np.mean([r["perplexity"] for r in rows])),
        }
    )
    _write_table(rows, ["domain", "accuracy", "perplexity"], out, "eval")
    write_manifest(build_manifest("eval", doc, exp.seed, inputs), out)
    for r in rows:
        print(f"{r['domain']:14s} acc {r['accuracy']:.4f}  ppl {r['perplexity']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    doc, exp, inputs = _experiment(args)
    out = _resolve_out_dir(args, doc, "gradcheck")
    results = run_gradcheck(trials=args.trials, seed=exp.seed)
    rows = [
        {
            "gradient": r.name,
            "trials": r.trials,
            "max_rel_err": r.max_rel_err,
            "passed": int(r.passed),
        }
        for r in results
    ]
    _write_table(rows, ["gradient", "trials", "max_rel_err", "passed"], out, "gradcheck")
    write_manifest(build_manifest("gradcheck", doc, exp.seed, inputs), out)
    for r in results:
        print(f"{r.name:24s} max_rel_err {r.max_rel_err:.3e}  {'PASS' if r.passed else 'FAIL'}")
    return 0 if all_passed(results) else 1


def _build_lab(exp: Experiment, out: Path):
    """Train pivot and sources on their own domains, cache teacher logits."""
    mixed = exp.mixed()
    train_config = exp.fusion_config()
    pivot_entry = exp.doc["pivot"]
    pivot_base = init_model(
        exp.shapes_for(pivot_entry["tokenizer"]), pivot_entry["tokenizer"], pivot_entry["init_seed"]
    )
    pivot = train_sft(pivot_base, exp.corpus_for(pivot_entry["task"]), train_config).model
    readers = []
    for entry in exp.source_entries():
        _check_mismatch(exp, pivot_entry["tokenizer"], [entry["tokenizer"]])
        base = init_model(exp.shapes_for(entry["tokenizer"]), entry["tokenizer"], entry["init_seed"])
        source = train_sft(base, exp.corpus_for(entry["task"]), train_config).model
        cache_path = out / f"{entry['id']}.iftc"
        extract_cache(source, mixed.train, cache_path, model_id=entry["id"])
        readers.append(CacheReader(cache_path))
        log.info("prepared teacher %s (%s on %s)", entry["id"], entry["tokenizer"], entry["task"])
    return pivot, readers, mixed


def _mean_eval(model, exp: Experiment) -> tuple[float, float]:
    accs, ppls = [], []
    for task in exp.tasks:
        acc, ppl = evaluate(model, exp.corpus_for(task).test)
        accs.append(acc)
        ppls.append(ppl)
    return float(np.mean(accs)), float(np.mean(ppls))


def cmd_ablate(args) -> int:
    doc, exp, inputs = _experiment(args)
    out = _resolve_out_dir(args, doc, "ablate")
    grids = args.grids.split(",")
    unknown = set(grids) - {"k", "toggles", "lambda"}
    if unknown:
        raise ConfigError(f"unknown ablation grids {sorted(unknown)}")
    pivot, teachers, mixed = _build_lab(exp, out)

    def fuse_with(**overrides):
        config = exp.fusion_config(**overrides)
        return fuse_unified(pivot, teachers, mixed, config).model

    if "k" in grids:
        rows = []
        for k in K_SWEEP:
            acc, ppl = _mean_eval(fuse_with(topk=k), exp)
            rows.append({"k": k, "mean_test_acc": acc, "mean_test_ppl": ppl, "best": 0})
            log.info("k=%d: mean ppl %.4f", k, ppl)
        best = int(np.argmin([r["mean_test_ppl"] for r in rows]))
        rows[best]["best"] = 1
        _write_table(rows, ["k", "mean_test_acc", "mean_test_ppl", "best"], out, "k_sweep", mark=best)
    if "toggles" in grids:
        rows = []
        for use_topk in (False, True):
            for standardize in (False, True):
                acc, ppl = _mean_eval(
                    fuse_with(use_topk=use_topk, standardize=standardize), exp
                )
                rows.append(
                    {
                        "topk_selection": int(use_topk),
                        "logits_standardization": int(standardize),
                        "mean_test_acc": acc,
                        "mean_test_ppl": ppl,
                    }
                )
                log.info("topk=%s std=%s: mean ppl %.4f", use_topk, standardize, ppl)
        _write_table(
            rows,
            ["topk_selection", "logits_standardization", "mean_test_acc", "mean_test_ppl"],
            out,
            "toggle_grid",
        )
    if "lambda" in grids:
        rows = []
        for lam in LAMBDA_SWEEP:
            acc, ppl = _mean_eval(fuse_with(lam=lam), exp)
            rows.append({"lambda": lam, "mean_test_acc": acc, "mean_test_ppl": ppl})
            log.info("lambda=%.2f: mean ppl %.4f", lam, ppl)
        _write_table(rows, ["lambda", "mean_test_acc", "mean_test_ppl"], out, "lambda_sweep")
    for reader in teachers:
        reader.close()
    write_manifest(build_manifest("ablate", doc, exp.seed, inputs), out)
    print(f"ablation tables written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuselab",
        description="desk-scale multi-teacher fusion laboratory",
    )
    parser.add_argument("--version", action="version", version=f"fuselab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=str, default=None, help="output base directory")
        p.add_argument("--overwrite", action="store_true", help="reuse a fixed run dir")
        return p

    common(sub.add_parser("gen-data", help="write corpora TSVs")).set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-sft", help="supervised fine-tune one model"))
    p.add_argument("--role", choices=["pivot", "source"], default="pivot")
    p.add_argument("--id", type=str, default=None, help="source id (role=source)")
    p.add_argument("--data", type=str, default=None, help="gen-data output dir")
    p.set_defaults(func=cmd_train_sft)

    p = common(sub.add_parser("extract-teacher", help="cache source logits to disk"))
    p.add_argument("--id", type=str, required=True)
    p.add_argument("--model", type=str, required=True, help="teacher checkpoint")
    p.add_argument("--data", type=str, default=None)
    p.set_defaults(func=cmd_extract_teacher)

    for name, unified in (("fuse-pairwise", False), ("fuse-unified", True)):
        p = common(sub.add_parser(name, help=f"{name.replace('-', ' ')} training"))
        p.add_argument("--pivot", type=str, required=True, help="pivot checkpoint")
        p.add_argument("--caches", type=str, default=None, help="teacher caches, comma separated")
        p.add_argument("--live-teachers", action="store_true")
        p.add_argument("--teachers", type=str, default=None, help="teacher checkpoints")
        p.add_argument("--sources", type=str, default=None, help="subset of teacher ids")
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--topk", type=int, default=None)
        p.add_argument("--data", type=str, default=None)
        if not unified:
            p.add_argument("--merge", choices=["average", "ta", "ties", "sce"], default=None)
        p.set_defaults(func=lambda a, unified=unified: cmd_fuse(a, unified))

    p = common(sub.add_parser("merge", help="merge checkpoints in weight space"))
    p.add_argument("--base", type=str, required=True)
    p.add_argument("--models", type=str, required=True, help="comma separated checkpoints")
    p.add_argument("--merge", choices=["average", "ta", "ties", "sce"], default=None)
    p.set_defaults(func=cmd_merge)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint per domain"))
    p.add_argument("--model", type=str, required=True, help="checkpoint path or 'untrained'")
    p.add_argument("--data", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("ablate", help="K / lambda / toggle sweeps"))
    p.add_argument("--grids", type=str, default="k,toggles")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    # map CLI merge-method shorthand onto canonical names
    if getattr(args, "merge", None) == "ta":
        args.merge = "task-arithmetic"
    try:
        return args.func(args)
    except Exception as exc:  # report as one machine-readable line
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
