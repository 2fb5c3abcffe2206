"""Command-line front end.

Subcommands: pretrain, finetune, lineval, similarity, report. Every run
persists its fully resolved config next to its outputs. Exit codes: 0 on
success, 1 on runtime failures (divergence, store conflicts), 2 on usage and
configuration problems.
"""

import argparse
import dataclasses
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .data import (
    ImageFolderDataset,
    bundled_alias_map,
    bundled_catalog_path,
    class_similarity,
    load_alias_map,
    load_manifest,
    stratified_split,
)
from .errors import ConfigurationError, ManifestError, RsslError
from .pretrain import init_model, pretrain
from .reporting import MetricsRecord, MetricsStore, emit_plot, reference_records, render_table
from .rng import derive_seed
from .transfer import (
    RunResult,
    aggregate_runs,
    build_classifier,
    config_hash,
    finetune,
    linear_eval,
)


def _experiment_dir(config: ExperimentConfig, *parts) -> Path:
    return Path(config.output_dir) / config.experiment_id / "-".join(str(p) for p in parts)


def _resolve_dataset(config: ExperimentConfig, name: str):
    if name not in config.datasets:
        raise ConfigurationError(
            f"dataset {name!r} not in config (have {sorted(config.datasets)})"
        )
    return load_manifest(config.datasets[name])


def _resolve_catalog(ref: str):
    p = Path(ref)
    if p.suffix in (".yaml", ".yml") or p.exists():
        return load_manifest(p, check_files=False)
    return load_manifest(bundled_catalog_path(ref), check_files=False)


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    manifest = _resolve_dataset(config, args.dataset)
    out_dir = Path(args.out) if args.out else _experiment_dir(config, "pretrain", args.dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config_resolved.yaml")

    pc = config.pretrain
    print(
        f"pretrain {manifest.name}: {len(manifest.samples)} images, "
        f"{pc.total_iterations} iterations, batch {pc.batch_size}, "
        f"lr {pc.base_lr} (milestones {pc.resolved_milestones()}), out {out_dir}"
    )
    if args.dry_run:
        return 0

    dataset = ImageFolderDataset(manifest)
    model = init_model(pc, config.encoder, config.predictor)
    result = pretrain(
        model, dataset, pc, config.ssl_recipe, config.encoder, config.predictor,
        out_dir=out_dir, trace_path=out_dir / "trace.jsonl",
        dataset_name=manifest.name, log_every=args.log_every,
    )
    print(f"final loss {result.trace[-1]['loss']:+.4f}")
    print(f"checkpoint {result.final_checkpoint} ({result.content_hash})")
    return 0


def _run_seeds(args, config, kind, worker):
    seeds = args.seeds if args.seeds is not None else config.seeds
    if seeds < 1:
        raise ConfigurationError("--seeds must be >= 1")
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            return list(pool.map(worker, range(seeds)))
    return [worker(i) for i in range(seeds)]


def _method_label(args, checkpoint):
    if args.method:
        return args.method
    if checkpoint is not None:
        return checkpoint.dataset or "self-supervised"
    return "Scratch"


def _append_record(config, record: MetricsRecord):
    store = MetricsStore(Path(config.output_dir) / config.experiment_id / "metrics.jsonl")
    store.append(record)
    return store.path


def _save_runs(out_dir: Path, runs, aggregate):
    payload = {
        "runs": [dataclasses.asdict(r) for r in runs],
        "aggregate": dataclasses.asdict(aggregate),
    }
    with open(out_dir / "results.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def cmd_finetune(args) -> int:
    config = load_config(args.config)
    manifest = _resolve_dataset(config, args.dataset)
    dataset = ImageFolderDataset(manifest)
    split = stratified_split(
        manifest, config.split_ratios, seed=derive_seed(config.experiment_id, args.dataset, "split")
    )
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    out_dir = Path(args.out) if args.out else _experiment_dir(config, "finetune", args.dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config_resolved.yaml")

    seeds = args.seeds if args.seeds is not None else config.seeds
    print(
        f"finetune {manifest.name}: {len(split.train)}/{len(split.val)}/{len(split.test)} "
        f"train/val/test, {seeds} seed(s), init "
        f"{'checkpoint' if checkpoint else 'random'}"
    )
    if args.dry_run:
        return 0

    chash = config_hash(config.finetune)
    kckpt = checkpoint.content_hash if checkpoint else ""

    def worker(i: int) -> RunResult:
        run_seed = derive_seed(config.experiment_id, "finetune", args.dataset, i)
        if checkpoint is not None:
            model = build_classifier(dataset.num_classes, checkpoint=checkpoint, seed=run_seed)
        else:
            model = build_classifier(
                dataset.num_classes, backbone_spec=config.encoder.backbone, seed=run_seed
            )
        fcfg = dataclasses.replace(config.finetune, seed=run_seed)
        res = finetune(model, dataset, split, fcfg, config.eval_recipe, manifest.name)
        print(f"  seed {i}: val {100 * res.best_val_accuracy:.2f}  test {100 * res.test_accuracy:.2f}")
        return RunResult(
            kind="finetune", dataset=manifest.name, seed=i,
            accuracy=100 * res.test_accuracy, val_accuracy=100 * res.best_val_accuracy,
            config_hash=chash, checkpoint_hash=kckpt,
        )

    runs = _run_seeds(args, config, "finetune", worker)
    agg = aggregate_runs(runs)
    _save_runs(out_dir, runs, agg)
    method = _method_label(args, checkpoint)
    record = MetricsRecord(
        experiment_id=_record_id(config, "finetune", args.dataset, None, args.tag),
        kind="finetune", method=method, dataset=manifest.name,
        mean_accuracy=agg.mean, std_accuracy=agg.std, n_runs=agg.n,
        config_hash=chash, checkpoint_hash=kckpt,
    )
    store_path = _append_record(config, record)
    print(f"{method} on {manifest.name}: {agg.mean:.2f} ± {agg.std:.2f} ({agg.n} runs) -> {store_path}")
    return 0


def _record_id(config, kind, dataset, shots, tag):
    rid = f"{config.experiment_id}:{kind}:{dataset}"
    if shots is not None:
        rid += f":n{shots}"
    if tag:
        rid += f":{tag}"
    return rid


def cmd_lineval(args) -> int:
    config = load_config(args.config)
    manifest = _resolve_dataset(config, args.dataset)
    dataset = ImageFolderDataset(manifest)
    split = stratified_split(
        manifest, config.split_ratios, seed=derive_seed(config.experiment_id, args.dataset, "split")
    )
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    out_dir = Path(args.out) if args.out else _experiment_dir(config, "lineval", args.dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config_resolved.yaml")

    shot_list = args.shots if args.shots else [None]
    seeds = args.seeds if args.seeds is not None else config.seeds
    print(
        f"linear eval {manifest.name}: shots {shot_list}, {seeds} seed(s), "
        f"backbone {'checkpoint' if checkpoint else 'random'} (frozen)"
    )
    if args.dry_run:
        return 0

    chash = config_hash(config.linear_eval)
    kckpt = checkpoint.content_hash if checkpoint else ""
    method = _method_label(args, checkpoint)

    for shots in shot_list:
        def worker(i: int, shots=shots) -> RunResult:
            run_seed = derive_seed(config.experiment_id, "lineval", args.dataset, shots, i)
            if checkpoint is not None:
                model = build_classifier(
                    dataset.num_classes, checkpoint=checkpoint, freeze_backbone=True, seed=run_seed
                )
            else:
                model = build_classifier(
                    dataset.num_classes, backbone_spec=config.encoder.backbone,
                    freeze_backbone=True, seed=run_seed,
                )
            lcfg = dataclasses.replace(config.linear_eval, seed=run_seed)
            res = linear_eval(
                model, dataset, split, lcfg, config.eval_recipe, shots=shots,
                dataset_name=manifest.name,
            )
            return RunResult(
                kind="linear_eval", dataset=manifest.name, seed=i,
                accuracy=100 * res.test_accuracy, val_accuracy=100 * res.best_val_accuracy,
                config_hash=chash, checkpoint_hash=kckpt, shots=shots,
            )

        runs = _run_seeds(args, config, "lineval", worker)
        agg = aggregate_runs(runs)
        tag_dir = out_dir / (f"n{shots}" if shots else "full")
        tag_dir.mkdir(parents=True, exist_ok=True)
        _save_runs(tag_dir, runs, agg)
        record = MetricsRecord(
            experiment_id=_record_id(config, "lineval", args.dataset, shots, args.tag),
            kind="linear_eval", method=method, dataset=manifest.name,
            mean_accuracy=agg.mean, std_accuracy=agg.std, n_runs=agg.n, shots=shots,
            config_hash=chash, checkpoint_hash=kckpt,
        )
        _append_record(config, record)
        label = f"n={shots}" if shots else "full"
        print(f"{method} on {manifest.name} [{label}]: {agg.mean:.2f} ± {agg.std:.2f} ({agg.n} runs)")
    return 0


def cmd_similarity(args) -> int:
    pre = _resolve_catalog(args.pretrain)
    down = _resolve_catalog(args.downstream)
    if args.aliases:
        p = Path(args.aliases)
        if p.exists():
            alias_map = load_alias_map(p)
        else:
            warnings.warn(f"alias file {p} not found; continuing without aliases")
            alias_map = {}
    else:
        alias_map = bundled_alias_map()
    sim = class_similarity(pre.classes, down.classes, alias_map)
    print(f"{pre.name} -> {down.name}: {100 * sim:.2f}%")
    return 0


def cmd_report(args) -> int:
    store = MetricsStore(args.store)
    records = store.records()
    if args.with_reference:
        records = reference_records() + records
    if args.table:
        text = render_table(records, args.table, dataset=args.dataset)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text)
            print(f"wrote {args.out}")
        else:
            print(text, end="")
    if args.plot:
        path = emit_plot(records, args.plot, dataset=args.dataset)
        print(f"wrote {path} and {path.with_suffix('.json')}")
    if not args.table and not args.plot:
        raise ConfigurationError("report needs --table and/or --plot")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rssl",
        description="Self-supervised pre-training and transfer evaluation "
        "for remote-sensing scene classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True, help="dataset name from the config")
    p.add_argument("--out", default=None)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    for name, fn, help_text in (
        ("finetune", cmd_finetune, "end-to-end fine-tuning"),
        ("lineval", cmd_lineval, "frozen-backbone linear evaluation"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--checkpoint", default=None, help="pre-training checkpoint (omit for random init)")
        p.add_argument("--seeds", type=int, default=None, help="override seeds from the config")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--method", default=None, help="row label for the metrics store")
        p.add_argument("--tag", default=None, help="suffix for the experiment id")
        p.add_argument("--out", default=None)
        p.add_argument("--dry-run", action="store_true")
        if name == "lineval":
            p.add_argument("--shots", type=int, nargs="+", default=None,
                           help="labeled samples per class; omit for the full train split")
        p.set_defaults(func=fn)

    p = sub.add_parser("similarity", help="class overlap between two catalogs")
    p.add_argument("--pretrain", required=True, help="manifest path or bundled catalog name")
    p.add_argument("--downstream", required=True)
    p.add_argument("--aliases", default=None, help="alias table (default: bundled)")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("report", help="render tables and plots from a metrics store")
    p.add_argument("--store", required=True)
    p.add_argument("--table", choices=["transfer", "linear", "fewshot"], default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--with-reference", action="store_true",
                   help="include published comparison rows")
    p.add_argument("--plot", default=None, help="write few-shot curves to this PNG")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RsslError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
