"""Command-line entry point: ``expredit make-data | train | apply <app> | config-reference``.

Every command writes a run manifest (JSON) next to its outputs recording the
resolved config, seeds, input checkpoint id, output paths with checksums and
start/end timestamps.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import apps, datagen
from .config import config_reference, load_config
from .networks import CheckpointError, load_checkpoint
from .trainer import PrerequisiteError, build_datasets, run_curriculum

log = logging.getLogger("expredit")


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seeds: dict[str, int]
    checkpoint_id: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    checksums: dict[str, str] = field(default_factory=dict)

    def finish(self, path: Path) -> Path:
        for name, out in self.outputs.items():
            self.checksums[name] = file_checksum(Path(out))
        self.finished = _now()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def file_checksum(path: Path) -> str:
    """SHA-256 of a file, or of every file under a directory in sorted order."""
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _override(text: str) -> tuple[str, Any]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


# ---------------------------------------------------------------------------
# make-data


def cmd_make_data(args) -> int:
    out = Path(args.out)
    cfg = load_config(args.preset, args.config, data_seed=args.seed)
    manifest = RunManifest("make-data", cfg.to_dict(), {"data_seed": cfg.data_seed}, started=_now())
    if args.ingest:
        names = args.classes.split(",") if args.classes else list(datagen.CLASS_NAMES[:cfg.K])
        data = datagen.ingest_folder(args.ingest, {n: k for k, n in enumerate(names)}, cfg.resolution)
    else:
        data = datagen.sample_dataset(cfg.dataset_spec(args.split))
    datagen.save_dataset(data, out, seed=cfg.data_seed)
    manifest.outputs["dataset"] = str(out)
    manifest.config.update(n_images=len(data), n_identities=len({im.identity_id for im in data}),
                           n_classes=len({im.expr_class for im in data}), split=args.split)
    manifest.finish(out / "run_manifest.json")
    print(f"wrote {len(data)} images to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    overrides = dict(args.set or [])
    for key in ("seed", "out_dir"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.data:
        overrides["dataset_path"] = args.data
    if args.epochs:
        overrides["stage_epochs"] = args.epochs
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic
    cfg = load_config(args.preset, args.config, **overrides)
    stages = (args.stage,) if args.stage else args.stages
    if any(k not in (1, 2, 3) for k in stages):
        raise ValueError(f"stages must be drawn from 1, 2, 3; got {stages}")
    manifest = RunManifest("train", cfg.to_dict(), {"seed": cfg.seed, "data_seed": cfg.data_seed},
                           started=_now())
    bundle = run_curriculum(cfg, stages=stages, resume=args.resume)
    out = Path(cfg.out_dir)
    manifest.checkpoint_id = apps.checkpoint_id(bundle)
    for k in stages:
        manifest.outputs[f"stage{k}"] = str(out / f"stage{k}")
    manifest.outputs["losses"] = str(out / "losses.jsonl")
    path = manifest.finish(out / f"train_{manifest.checkpoint_id}_seed{cfg.seed}.manifest.json")
    print(f"trained stages {','.join(map(str, stages))}; checkpoint {manifest.checkpoint_id}; manifest {path}")
    return 0


# ---------------------------------------------------------------------------
# apply


def _dataset(args, bundle):
    if args.data:
        return datagen.load_dataset(args.data)
    cfg = load_config(args.preset, data_seed=args.data_seed)
    return build_datasets(cfg)[2]


def _images(paths, resolution) -> np.ndarray:
    return np.stack([datagen.load_image(Path(p), resolution) for p in paths])


def cmd_apply(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    ck = apps.checkpoint_id(bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.app}_{ck}_seed{args.seed}"
    res = bundle.spec.resolution
    manifest = RunManifest(f"apply {args.app}", {k: v for k, v in vars(args).items() if k != "func"},
                           {"seed": args.seed}, ck, started=_now())
    rng = np.random.default_rng(args.seed)
    outputs = manifest.outputs
    if args.app == "edit":
        grid = apps.edit_expression(bundle, _images(args.input, res), args.magnitude)
        outputs["grid"] = str(grid.save(out / f"{stem}.png"))
    elif args.app == "sweep":
        grid = apps.intensity_sweep(bundle, _images(args.input, res), args.cls, args.magnitude)
        outputs["grid"] = str(grid.save(out / f"{stem}_class{args.cls}.png"))
    elif args.app == "transfer":
        a, b = _images(args.input, res), _images(args.reference, res)
        if len(b) not in (1, len(a)):
            raise ValueError("give one reference image or one per input")
        b = np.repeat(b, len(a), 0) if len(b) == 1 else b
        result = apps.transfer_expression(bundle, a, b)
        grid = apps.ImageGrid([list(a), list(b), list(result)], ["identity", "expression", "transfer"],
                              [f"pair{i}" for i in range(len(a))], {"checkpoint": ck})
        outputs["grid"] = str(grid.save(out / f"{stem}.png"))
    elif args.app == "generate":
        images = apps.generate_random(bundle, args.cls, args.n, rng)
        path = out / f"{stem}_class{args.cls}.npy"
        np.save(path, images.astype(np.float32))
        outputs["images"] = str(path)
        if args.grid:
            grid = apps.generate_subjects(bundle, args.grid, rng)
            outputs["subjects"] = str(grid.save(out / f"{stem}_subjects.png"))
    elif args.app == "augment-exp":
        if args.data:
            train, test = datagen.split_by_identity(datagen.load_dataset(args.data), 0.1, args.seed)
        else:
            train, _, test = build_datasets(load_config(args.preset, data_seed=args.data_seed))
        table = apps.augmentation_experiment(bundle, train, test, args.counts, seed=args.seed,
                                             epochs=args.epochs)
        outputs["table"] = str(apps.write_table_csv(table, out / f"{stem}.csv"))
        for row in table:
            print(f"synthetic={row['synthetic_images']} accuracy={row['accuracy']:.4f}")
    elif args.app == "retrieve":
        data = _dataset(args, bundle)
        queries = args.queries if args.queries else list(range(len(data)))
        rows = []
        for q in queries:
            gallery = [im for i, im in enumerate(data) if i != q]
            index = [i for i in range(len(data)) if i != q]
            r = apps.retrieve(data[q], gallery, args.space, args.k, bundle, exclude_identity=True, query_index=q)
            rows.append({"query": q, "query_class": data[q].expr_class,
                         "ranked": " ".join(str(index[i]) for i in r.ranked),
                         "ranked_classes": " ".join(str(gallery[i].expr_class) for i in r.ranked),
                         "distances": " ".join(f"{d:.6g}" for d in r.distances), "space": args.space})
        outputs["results"] = str(apps.write_table_csv(rows, out / f"{stem}_{args.space}.csv"))
        acc = np.mean([r["query_class"] == int(r["ranked_classes"].split()[0]) for r in rows])
        print(f"{len(rows)} queries, top-1 same-class rate {acc:.4f}")
    elif args.app == "export-features":
        records = apps.export_features(bundle, _dataset(args, bundle))
        outputs["features"] = str(apps.write_features_csv(records, out / f"{stem}.csv", ck))
    path = manifest.finish(out / f"{stem}.manifest.json")
    print(f"wrote {', '.join(outputs.values())}; manifest {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expredit", description="Expression editing with a controllable code.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render a synthetic dataset or ingest an image folder")
    p.add_argument("--preset", default="desk", help="configuration preset (desk, paper, tiny)")
    p.add_argument("--config", help="JSON config file layered over the preset")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--split", default="train", choices=("train", "heldout", "test"), help="synthetic split")
    p.add_argument("--ingest", help="folder laid out as <class>/<identity>/<image>")
    p.add_argument("--classes", help="comma-separated class folder names in label order")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="run curriculum stages")
    p.add_argument("--preset", default="desk", help="configuration preset (desk, paper, tiny)")
    p.add_argument("--config", help="JSON config file layered over the preset")
    p.add_argument("--stages", type=_ints, default=(1, 2, 3), help="comma-separated stages to run in order")
    p.add_argument("--stage", type=int, help="run a single stage (needs the previous stage checkpoint)")
    p.add_argument("--resume", help="checkpoint directory of the previous stage")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--data", help="dataset directory written by make-data")
    p.add_argument("--out", dest="out_dir", help="run directory")
    p.add_argument("--epochs", type=_ints, help="epochs per stage, e.g. 20,20,20")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="force deterministic kernels")
    p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                   help="override any config key (JSON value)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("apply", help="run an application on a trained checkpoint")
    apps_sub = p.add_subparsers(dest="app", required=True)

    def app(name, help_text):
        a = apps_sub.add_parser(name, help=help_text)
        a.add_argument("--checkpoint", required=True, help="checkpoint directory")
        a.add_argument("--out", default="outputs", help="output directory")
        a.add_argument("--seed", type=int, default=0, help="random seed")
        a.set_defaults(func=cmd_apply)
        return a

    def data_flags(a):
        a.add_argument("--data", help="dataset directory (default: synthetic test split of --preset)")
        a.add_argument("--preset", default="desk", help="preset for the default synthetic split")
        a.add_argument("--data-seed", type=int, default=0, help="seed of the default synthetic split")

    a = app("edit", "re-render inputs with every target expression")
    a.add_argument("--input", nargs="+", required=True, help="input image files")
    a.add_argument("--magnitude", type=float, default=1.0, help="code magnitude")
    a = app("sweep", "render the intensity levels of one class")
    a.add_argument("--class", dest="cls", type=int, required=True, help="target class index")
    a.add_argument("--input", nargs="+", required=True, help="input image files")
    a.add_argument("--magnitude", type=float, default=1.0, help="code magnitude")
    a = app("transfer", "apply the expression of reference images to inputs")
    a.add_argument("--input", nargs="+", required=True, help="identity images")
    a.add_argument("--reference", nargs="+", required=True, help="expression reference images")
    a = app("generate", "sample random faces of one class")
    a.add_argument("--class", dest="cls", type=int, required=True, help="class index")
    a.add_argument("-n", type=int, default=16, help="number of images")
    a.add_argument("--grid", type=int, default=0, help="also write a subjects-by-class grid with this many columns")
    a = app("augment-exp", "expression accuracy with and without synthetic training images")
    data_flags(a)
    a.add_argument("--counts", type=_ints, default=(0, 3000), help="synthetic image counts")
    a.add_argument("--epochs", type=int, default=10, help="classifier epochs")
    a = app("retrieve", "nearest-neighbour retrieval across identities")
    data_flags(a)
    a.add_argument("--space", choices=("c", "y", "x"), default="c", help="embedding space")
    a.add_argument("-k", type=int, default=1, help="results per query")
    a.add_argument("--queries", type=_ints, help="query indices (default: every image)")
    a = app("export-features", "write identity and expression codes to CSV")
    data_flags(a)

    p = sub.add_parser("config-reference", help="print every config key with its default")
    p.set_defaults(func=lambda args: print(config_reference()) or 0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except (PrerequisiteError, apps.UntrainedBundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, FileNotFoundError, OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
