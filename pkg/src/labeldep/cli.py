"""Command-line surface: synth, train, eval, sample, compare, export-embeddings.

Every command is deterministic given its config and seed. Exit codes: 0
success, 1 validation error, 2 numeric failure; on error the final stderr
line is a single machine-parsable JSON record."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from . import evaluate as evalmod
from .autodiff import NumericError
from .baselines import ChainConfig, IndependentConfig, train_independent, train_pcc
from .checkpoint import CheckpointError
from .cvae import CvaeConfig, CvaeModel, train_cvae
from .data import DatasetError, LabeledDataset, SyntheticSpec
from .training import TrainConfig

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; usage errors are
    # validation failures here, so route them through CliError instead.
    def error(self, message):
        raise CliError(message)


def _write_json(doc, path) -> None:
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CliError(f"{what} is not valid JSON: {path}: {e}") from e


def _dataset_hash(path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return f"sha256:{digest}"


def _out_dir(args, default=".") -> Path:
    out = Path(args.out if args.out is not None else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path) -> LabeledDataset:
    if not Path(path).exists():
        raise CliError(f"dataset not found: {path}")
    return datamod.load_jsonl(path)


# -- run configuration --------------------------------------------------------

_COMMON_FIELDS = {
    "model",
    "train_path",
    "val_path",
    "val_fraction",
    "seed",
    "out_dir",
    "epochs",
    "batch_size",
    "learning_rate",
    "patience",
    "keep_prob",
    "standardize",
    "hidden_activation",
}
_CVAE_FIELDS = {
    "latent_dim",
    "feature_widths",
    "prior_widths",
    "recognition_widths",
    "decoder_widths",
}
_BASELINE_FIELDS = {"hidden_widths", "label_order"}


@dataclass
class RunConfig:
    model: str
    train_path: str
    seed: int
    val_path: str | None = None
    val_fraction: float = 0.1
    out_dir: str | None = None
    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-4
    patience: int = 25
    keep_prob: float = 0.8
    standardize: bool = True
    hidden_activation: str = "relu"
    latent_dim: int = 16
    feature_widths: tuple = (64, 64)
    prior_widths: tuple = (32,)
    recognition_widths: tuple = (32,)
    decoder_widths: tuple = (64,)
    hidden_widths: tuple | None = None
    label_order: tuple | None = None

    @classmethod
    def from_file(cls, path, seed_override=None, out_override=None) -> "RunConfig":
        doc = _read_json(path, "run config")
        problems = []
        allowed = _COMMON_FIELDS | _CVAE_FIELDS | _BASELINE_FIELDS
        for key in sorted(set(doc) - allowed):
            problems.append(f"unknown field {key!r}")
        model = doc.get("model")
        if model not in ("cvae", "independent", "pcc"):
            problems.append("'model' must be one of cvae, independent, pcc")
        if not doc.get("train_path"):
            problems.append("'train_path' is required")
        seed = seed_override if seed_override is not None else doc.get("seed")
        if seed is None:
            problems.append("'seed' is required (no wall-clock default)")
        if problems:
            raise CliError(f"invalid run config {path}: " + "; ".join(problems))
        kwargs = {k: doc[k] for k in doc if k not in ("model", "train_path", "seed")}
        cfg = cls(model=model, train_path=doc["train_path"], seed=int(seed), **kwargs)
        if out_override is not None:
            cfg.out_dir = str(out_override)
        if cfg.out_dir is None:
            raise CliError("output directory required: set 'out_dir' or pass --out")
        if not Path(cfg.train_path).exists():
            raise CliError(f"train_path does not exist: {cfg.train_path}")
        if cfg.val_path is not None and not Path(cfg.val_path).exists():
            raise CliError(f"val_path does not exist: {cfg.val_path}")
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            patience=self.patience,
        )


# -- commands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = _read_json(args.spec, "synthetic spec")
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(doc)
    except DatasetError as e:
        raise CliError(f"invalid synthetic spec: {e}") from e
    dataset, table = datamod.generate_synthetic(spec)
    out = _out_dir(args)
    datamod.save_jsonl(dataset, out / "dataset.jsonl")
    _write_json(
        {
            "format_version": 1,
            "kind": spec.kind,
            "label_count": spec.label_count,
            "table": table,
            "entropy_nats": datamod.table_entropy_nats(table),
            "spec": spec.to_dict(),
        },
        out / "joint_table.json",
    )
    if not args.quiet:
        print(f"wrote {out / 'dataset.jsonl'} ({dataset.n} rows) and {out / 'joint_table.json'}")
    return EXIT_OK


def _split_train_val(cfg: RunConfig, train_set: LabeledDataset):
    if cfg.val_path is not None:
        return train_set, _load_dataset(cfg.val_path)
    frac = float(cfg.val_fraction)
    if not 0.0 < frac < 1.0:
        raise CliError(f"val_fraction must be in (0, 1), got {frac}")
    train, val = datamod.split(train_set, (1.0 - frac, frac), seed=cfg.seed)
    return train, val


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, args.seed, args.out)
    train_set = _load_dataset(cfg.train_path)
    train_set_named = LabeledDataset(
        train_set.features,
        train_set.labels,
        train_set.feature_names,
        train_set.label_names or [f"label{j}" for j in range(train_set.l)],
    )
    train, val = _split_train_val(cfg, train_set_named)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.standardize:
        (train, val), stats = datamod.standardize_features(train, val)
        _write_json(stats.to_dict(), out / "standardization.json")

    label_names = train.label_names
    metrics_path = out / "metrics.jsonl"
    metrics_fh = open(metrics_path, "w", encoding="utf-8")

    def on_epoch(rec) -> None:
        doc = rec if isinstance(rec, dict) else rec.to_dict()
        metrics_fh.write(json.dumps(doc, sort_keys=True) + "\n")
        metrics_fh.flush()

    tc = cfg.train_config()
    try:
        if cfg.model == "cvae":
            model = CvaeModel.build(
                CvaeConfig(
                    feature_dim=train.k,
                    label_count=train.l,
                    latent_dim=cfg.latent_dim,
                    feature_widths=cfg.feature_widths,
                    prior_widths=cfg.prior_widths,
                    recognition_widths=cfg.recognition_widths,
                    decoder_widths=cfg.decoder_widths,
                    hidden_activation=cfg.hidden_activation,
                    keep_prob=cfg.keep_prob,
                    label_names=label_names,
                ),
                seed=cfg.seed,
            )
            history = train_cvae(model, train, val, tc, on_epoch=on_epoch)
        elif cfg.model == "independent":
            arch = IndependentConfig(
                feature_dim=train.k,
                label_count=train.l,
                hidden_widths=cfg.hidden_widths or (64, 64),
                hidden_activation=cfg.hidden_activation,
                keep_prob=cfg.keep_prob,
                label_names=label_names,
            )
            model, history = train_independent(train, val, tc, arch, on_epoch=on_epoch)
        else:
            arch = ChainConfig(
                feature_dim=train.k,
                label_count=train.l,
                label_order=cfg.label_order,
                hidden_widths=cfg.hidden_widths or (64,),
                hidden_activation=cfg.hidden_activation,
                keep_prob=cfg.keep_prob,
                label_names=label_names,
            )
            model, history = train_pcc(train, val, tc, arch=arch, on_epoch=on_epoch)
    finally:
        metrics_fh.close()

    ckpt.save_checkpoint(model, out / "checkpoint.json")
    if not args.quiet:
        last = history[-1]
        val_loss = last["val_loss"] if isinstance(last, dict) else last.val_loss
        print(f"trained {cfg.model}: final val loss {val_loss:.6f} nats; checkpoint at {out / 'checkpoint.json'}")
    return EXIT_OK


def _sidecar_standardization(checkpoint_path):
    stats_path = Path(checkpoint_path).parent / "standardization.json"
    if stats_path.exists():
        return datamod.Standardization.from_dict(_read_json(stats_path, "standardization stats"))
    return None


def _sidecar_train_minutes(checkpoint_path):
    metrics_path = Path(checkpoint_path).parent / "metrics.jsonl"
    if not metrics_path.exists():
        return None
    seconds = 0.0
    for line in metrics_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            seconds += float(json.loads(line).get("wall_seconds", 0.0))
    return seconds / 60.0


def _load_model_for(args):
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    try:
        return ckpt.load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        raise CliError(str(e)) from e


def cmd_eval(args) -> int:
    model = _load_model_for(args)
    dataset = _load_dataset(args.dataset)
    k = model.config.feature_dim
    l = model.config.label_count
    if dataset.k != k or dataset.l != l:
        raise CliError(
            f"checkpoint/dataset mismatch: checkpoint expects k={k}, l={l}; "
            f"dataset has k={dataset.k}, l={dataset.l}"
        )
    raw_hash = _dataset_hash(args.dataset)
    stats = _sidecar_standardization(args.checkpoint)
    if stats is not None:
        dataset = stats.transform(dataset)
    names = model.config.label_names or dataset.label_names
    if names:
        dataset = LabeledDataset(dataset.features, dataset.labels, dataset.feature_names, list(names))
    report = evalmod.evaluate_model(
        model,
        dataset,
        n_samples=args.mc_samples,
        seed=args.seed,
        dataset_hash=raw_hash,
        train_minutes=_sidecar_train_minutes(args.checkpoint),
        run_label=args.run_label or Path(args.checkpoint).parent.name,
    )
    out = _out_dir(args)
    _write_json(report.to_dict(), out / "report.json")
    evalmod.write_pr_csv(report, out / "pr_curves.csv")
    print(f"{report.neg_jll:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model = _load_model_for(args)
    if not isinstance(model, CvaeModel):
        raise CliError(f"sample requires a cvae checkpoint, got {model.kind}")
    if args.x is not None:
        try:
            x = np.asarray(json.loads(args.x), dtype=np.float64)
        except (json.JSONDecodeError, ValueError) as e:
            raise CliError(f"--x must be a JSON list of floats: {e}") from e
    elif args.dataset is not None:
        rows = _load_dataset(args.dataset)
        if not 0 <= args.row < rows.n:
            raise CliError(f"--row {args.row} out of range for dataset with {rows.n} rows")
        x = rows.features[args.row]
    else:
        raise CliError("sample needs --x or --dataset/--row")
    if x.shape != (model.config.feature_dim,):
        raise CliError(
            f"context row has shape {x.shape}, model expects ({model.config.feature_dim},)"
        )
    stats = _sidecar_standardization(args.checkpoint)
    if stats is not None:
        x = stats.transform_rows(x[None, :])[0]
    samples = model.sample_y(x, args.count, args.seed)
    out = _out_dir(args)
    path = out / "samples.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for row in samples:
            fh.write(json.dumps({"y": row.tolist()}) + "\n")
    if not args.quiet:
        print(f"wrote {len(samples)} samples to {path}")
        if model.config.label_count <= 10 and len(samples) > 0:
            patterns, counts = np.unique(samples, axis=0, return_counts=True)
            order = np.argsort(-counts)
            for idx in order:
                bits = "".join(str(int(b)) for b in patterns[idx])
                print(f"pattern {bits}: {counts[idx] / len(samples):.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise CliError("compare needs at least 2 reports")
    rows = []
    hashes = set()
    for path in args.reports:
        doc = _read_json(path, "report")
        rows.append(
            {
                "run": doc.get("run_label") or Path(path).stem,
                "neg_jll": doc.get("neg_jll"),
                "macro_ap": doc.get("macro_ap"),
                "train_minutes": doc.get("train_minutes"),
                "dataset_hash": doc.get("dataset_hash"),
            }
        )
        hashes.add(doc.get("dataset_hash"))
    rows.sort(key=lambda r: (r["neg_jll"] is None, r["neg_jll"]))

    def cell(v, fmt="{:.4f}"):
        return "—" if v is None else fmt.format(v)

    lines = []
    if len(hashes) > 1:
        lines.append("WARNING: reports reference different datasets (hash mismatch)")
        lines.append("")
    if args.format == "csv":
        lines.append("run,neg_jll,macro_ap,train_minutes")
        for r in rows:
            lines.append(
                f"{r['run']},{cell(r['neg_jll'], '{:.6f}')},"
                f"{cell(r['macro_ap'], '{:.6f}')},{cell(r['train_minutes'], '{:.3f}')}"
            )
    else:
        lines.append("| run | Neg. JLL | macro AP | train (min) |")
        lines.append("| --- | ---: | ---: | ---: |")
        for r in rows:
            lines.append(
                f"| {r['run']} | {cell(r['neg_jll'])} | {cell(r['macro_ap'])} "
                f"| {cell(r['train_minutes'], '{:.2f}')} |"
            )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        if not args.quiet:
            print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = _load_model_for(args)
    if not isinstance(model, CvaeModel):
        raise CliError(f"export-embeddings requires a cvae checkpoint, got {model.kind}")
    emb = model.export_embeddings()
    names = model.config.label_names or [f"label{j}" for j in range(emb.shape[0])]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["label," + ",".join(f"e{i}" for i in range(emb.shape[1]))]
    for name, row in zip(names, emb):
        lines.append(name + "," + ",".join(repr(float(v)) for v in row))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not args.quiet:
        print(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="labeldep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true", help="suppress chatter")

    p = sub.add_parser("synth", help="generate a synthetic dataset and its exact joint table")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--seed", type=int, help="override the spec's seed")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="RunConfig JSON file")
    p.add_argument("--seed", type=int, help="override the config's seed")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mc-samples", type=int, default=evalmod.DEFAULT_MC_SAMPLES)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--run-label", help="row label for compare tables")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw label vectors from a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dataset", help="dataset supplying the context row")
    p.add_argument("--row", type=int, default=0, help="row index into --dataset")
    p.add_argument("--x", help="literal JSON list as the context row")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compare", help="tabulate eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--format", choices=("md", "csv"), default="md")
    p.add_argument("--out", help="write the table to this file instead of stdout")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-embeddings", help="write decoder label embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"status": "error", "kind": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        return _fail("validation", str(e), EXIT_VALIDATION)
    except (DatasetError, CheckpointError, ValueError) as e:
        return _fail("validation", str(e), EXIT_VALIDATION)
    except NumericError as e:
        return _fail("numeric", str(e), EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
