"""Command line runner: ``jointvit {synth,train,eval,gradcheck,export}``.

Exit codes: 0 ok, 2 config error, 3 numeric failure (NaN, gradcheck over
tolerance), 4 IO error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from .config import RunConfig, load_config
from .data import AugmentConfig, ManifestError, load_manifest, synth_dataset
from .gradcheck import tiny_vit_check
from .model import CheckpointError, ConfigError, ViTConfig, checkpoint_load, checkpoint_save, init_model
from .tensor_file import TensorFormatError
from .train import LossWeighter, NumericError, TrainDataset, TrainState, evaluate, train_iteration

log = logging.getLogger("jointvit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4
CSV_COLUMNS = ("iteration", "loss", "w", "top1", "top5")


class RunLockedError(OSError):
    pass


@contextmanager
def locked_dir(path: Path):
    """Hold ``path/.lock`` for the duration of a run."""
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"output directory {path} is in use (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# commands (library entry points; the argparse layer below maps errors to exit codes)


def cmd_synth(cfg: RunConfig) -> list[Path]:
    """Write every dataset listed in the ``synth`` section; return manifest paths."""
    out = []
    for i, entry in enumerate(cfg.synth):
        entry = dict(entry)
        try:
            kind, root = entry.pop("kind"), entry.pop("root")
        except KeyError as e:
            raise ConfigError(f"synth entry {i} lacks {e}") from None
        entry.setdefault("dataset_id", i)
        try:
            out.append(synth_dataset(kind, root, **entry))
        except TypeError as e:
            raise ConfigError(f"synth entry {i}: {e}") from None
    return out


def load_datasets(paths) -> list[TrainDataset]:
    """Load manifests; ids are reassigned densely by list position."""
    out = []
    for i, p in enumerate(paths):
        spec, man = load_manifest(p)
        out.append(TrainDataset(dataclasses.replace(spec, id=i), man))
    return out


def resolve_model_config(cfg: RunConfig, datasets) -> ViTConfig:
    m = dict(cfg.model)
    heads = [d.spec.num_classes for d in datasets]
    if "dataset_heads" in m and list(m["dataset_heads"]) != heads:
        raise ConfigError(f"model.dataset_heads {m['dataset_heads']} disagrees with manifests {heads}")
    m["dataset_heads"] = heads
    return ViTConfig.from_dict(m)


def cmd_train(cfg: RunConfig) -> dict[str, Path]:
    """Train per the config; write resolved config, metrics, evals and a final checkpoint."""
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    datasets = load_datasets(cfg.datasets)
    vit = resolve_model_config(cfg, datasets)
    aug = cfg.build_augment()
    if aug.size != vit.image_size[0] or vit.image_size[0] != vit.image_size[1]:
        raise ConfigError(f"augment.size {aug.size} must equal the (square) model image size {vit.image_size}")
    optimizers = cfg.build_regime().resolve([d.spec for d in datasets])
    w = cfg.weighter
    weighter = LossWeighter(w.kind, len(datasets), w.window, w.gamma, w.temperature)
    sched = cfg.schedule
    model = init_model(vit, sched.seed)
    state = TrainState.create(datasets, sched.seed)

    out = cfg.output_dir
    paths = {
        "config": out / "config.json",
        "metrics": out / "metrics.jsonl",
        "eval": out / "eval.jsonl",
        "checkpoint": out / "model.ivck",
    }
    with locked_dir(out):
        resolved = cfg.to_dict()
        resolved["model"] = vit.to_dict()
        paths["config"].write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        with open(paths["metrics"], "w") as mf, open(paths["eval"], "w") as ef:
            def run_eval(it):
                for i, d in enumerate(datasets):
                    for split in ("train", "val"):
                        if d.manifest.splits.get(split):
                            top1, top5 = evaluate(model, d, i, split, aug)
                            ef.write(json.dumps({"iteration": it, "dataset": i, "split": split,
                                                 "top1": top1, "top5": top5}) + "\n")
                ef.flush()

            for it in range(sched.iterations):
                for rec in train_iteration(model, state, datasets, optimizers, weighter, aug,
                                           sched.batch_size):
                    mf.write(rec.to_json() + "\n")
                if sched.eval_every and (it + 1) % sched.eval_every == 0:
                    run_eval(it + 1)
                    log.info("iteration %d done", it + 1)
            if not sched.eval_every or sched.iterations % sched.eval_every:
                run_eval(sched.iterations)
        checkpoint_save(model, paths["checkpoint"])
    return paths


def cmd_eval(checkpoint, manifest, split: str = "val", head: int = 0, size: int | None = None) -> dict:
    model = checkpoint_load(checkpoint)
    spec, man = load_manifest(manifest)
    if model.config.dataset_heads[head] != spec.num_classes:
        raise ConfigError(f"head {head} has {model.config.dataset_heads[head]} classes, "
                          f"dataset has {spec.num_classes}")
    aug = AugmentConfig.desk(size or model.config.image_size[0])
    top1, top5 = evaluate(model, TrainDataset(dataclasses.replace(spec, id=head), man), head, split, aug)
    return {"checkpoint": str(checkpoint), "dataset": spec.name, "split": split, "head": head,
            "top1": top1, "top5": top5}


def cmd_gradcheck(shift: bool = True, sabotage: bool = False, seed: int = 0) -> tuple[float, dict]:
    report: dict[str, float] = {}
    err = tiny_vit_check(shift=shift, faulty=sabotage, seed=seed, report=report)
    return err, report


def cmd_export(metrics_path, out_dir, num_datasets: int | None = None) -> list[Path]:
    """Split a metrics JSONL file into ``dataset_<id>.csv`` files."""
    rows: dict[int, list[dict]] = {}
    with open(metrics_path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ds = int(rec["dataset"])
                row = {k: rec[k] for k in CSV_COLUMNS}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{metrics_path}:{lineno}: malformed metrics record ({e})") from None
            rows.setdefault(ds, []).append(row)
    ids = set(rows) | set(range(num_datasets or 0))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in sorted(ids):
        p = out_dir / f"dataset_{ds}.csv"
        with open(p, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for row in rows.get(ds, []):
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        written.append(p)
    return written


# ---------------------------------------------------------------------------
# argparse layer


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jointvit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. schedule.iterations=10 (value parsed as JSON)")

    p = sub.add_parser("synth", help="write the synthetic datasets listed in the config")
    with_config(p)

    p = sub.add_parser("train", help="train a model")
    with_config(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="val")
    p.add_argument("--head", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny clip model")
    p.add_argument("--no-shift", action="store_true")
    p.add_argument("--sabotage", action="store_true",
                   help="use a deliberately wrong attention backward (negative control)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export", help="metrics JSONL -> one CSV per dataset")
    p.add_argument("metrics")
    p.add_argument("out_dir")
    p.add_argument("--num-datasets", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            for p in cmd_synth(load_config(args.config, args.set)):
                print(p)
        elif args.command == "train":
            overrides = list(args.set)
            if args.iterations is not None:
                overrides.append(f"schedule.iterations={args.iterations}")
            if args.seed is not None:
                overrides.append(f"schedule.seed={args.seed}")
            if args.output_dir is not None:
                overrides.append(f"io.output_dir={json.dumps(args.output_dir)}")
            for k, p in cmd_train(load_config(args.config, overrides)).items():
                print(f"{k}: {p}")
        elif args.command == "eval":
            res = cmd_eval(args.checkpoint, args.manifest, args.split, args.head)
            print(f"top1 {res['top1']:.4f}  top5 {res['top5']:.4f}")
            print(json.dumps(res))
        elif args.command == "gradcheck":
            err, report = cmd_gradcheck(not args.no_shift, args.sabotage, args.seed)
            worst = max(report, key=report.get)
            print(json.dumps({"max_rel_error": err, "worst_parameter": worst,
                              "tolerance": GRADCHECK_TOL, "shift": not args.no_shift,
                              "sabotage": args.sabotage}))
            if err > GRADCHECK_TOL:
                print(f"gradient check FAILED: {err:.3e} > {GRADCHECK_TOL:g}", file=sys.stderr)
                return EXIT_NUMERIC
        elif args.command == "export":
            for p in cmd_export(args.metrics, args.out_dir, args.num_datasets):
                print(p)
    except (ConfigError, ManifestError, CheckpointError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TensorFormatError, ValueError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
