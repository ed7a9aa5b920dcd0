"""``switchtab`` command-line entry point.

Exit codes: 0 success, 1 usage or data error, 2 schema mismatch between a
checkpoint and the data, 3 unreadable or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluate as E
from .gradcheck import run_suite
from .model import FORMAT_VERSION, SwitchTabModel, encode, predict
from .tensor import Tensor
from .train import TrainConfig, finetune, model_config_for, pretrain

log = logging.getLogger("switchtab")

MODEL_KEYS = ("d_model", "n_layers", "n_heads", "d_ff", "d_e", "head_hidden")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    # paths
    data: str | None = None
    schema: str | None = None
    out: str = "."
    checkpoint: str | None = None
    predictions: str | None = None
    missing_tokens: list[str] = field(default_factory=lambda: list(D.DEFAULT_MISSING_TOKENS))
    # model
    d_model: int = 32
    n_layers: int = 3
    n_heads: int = 2
    d_ff: int = 64
    d_e: int | None = None
    head_hidden: int | None = None
    # training
    ratio: float = 0.3
    batch_size: int = 128
    pretrain_epochs: int = 1000
    pretrain_lr: float = 3e-4
    alpha: float = 1.0
    finetune_epochs: int = 200
    finetune_lr: float = 1e-3
    patience: int = 20
    val_fraction: float = 0.2
    seed: int = 0
    switching: bool = True
    label_assisted: bool = False
    # synth
    n: int = 500
    class_dims: int = 4
    shared_dims: int = 4
    separation: float = 2.0
    noise: float = 0.3
    # eval / project
    kind: str = "accuracy"
    embedding: str = "both"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in TRAIN_KEYS})

    def model_overrides(self) -> dict:
        return {k: getattr(self, k) for k in MODEL_KEYS}


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def atomic_write_text(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise CliError(f"config is missing '{what}'")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def checkpoint_document(model: SwitchTabModel, prep: D.Preprocessor, train_cfg: TrainConfig, stage: str) -> dict:
    doc = model.to_dict()
    doc["stage"] = stage
    doc["schema_hash"] = D.schema_hash(prep.schema)
    doc["preprocessor"] = prep.to_dict()
    doc["train_config"] = asdict(train_cfg)
    return doc


def write_checkpoint(path: Path, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def read_checkpoint(path: Path) -> tuple[SwitchTabModel, D.Preprocessor, dict]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", 3) from None
    version = doc.get("format_version") if isinstance(doc, dict) else None
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CliError(f"checkpoint {path} has unsupported format_version {version!r} "
                       f"(this build reads <= {FORMAT_VERSION})", 3)
    try:
        model = SwitchTabModel.from_dict(doc)
        prep = D.Preprocessor.from_dict(doc["preprocessor"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}", 3) from None
    return model, prep, doc


def _load_data(cfg: RunConfig) -> D.TabularDataset:
    schema = D.load_schema(_require(cfg.schema, "schema"))
    return D.load_csv(_require(cfg.data, "data"), schema, cfg.missing_tokens)


def _load_checkpoint_and_data(cfg: RunConfig):
    model, prep, doc = read_checkpoint(_require(cfg.checkpoint, "checkpoint"))
    dataset = _load_data(cfg)
    if D.schema_hash(dataset.schema) != doc.get("schema_hash"):
        raise CliError("data schema does not match the schema the checkpoint was trained on", 2)
    return model, prep, doc, dataset


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synthesize(n: int, class_dims: int, shared_dims: int, separation: float, noise: float,
               seed: int) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Two balanced classes; class dims ~ N(+-separation/2, noise), shared dims ~ N(0, 1)."""
    if n < 4 or class_dims < 1 or shared_dims < 1:
        raise CliError("synth needs n >= 4 and at least one class and one shared dimension")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    centre = np.where(labels == 1, separation / 2.0, -separation / 2.0)[:, None]
    class_part = centre + rng.normal(0.0, noise, size=(n, class_dims))
    shared_part = rng.normal(0.0, 1.0, size=(n, shared_dims))
    names = [f"c{i}" for i in range(class_dims)] + [f"u{i}" for i in range(shared_dims)]
    return names, np.hstack([class_part, shared_part]), labels


def synth_schema(names: list[str]) -> list[D.ColumnSchema]:
    return [D.ColumnSchema(nm, "numerical") for nm in names] + [
        D.ColumnSchema("label", "label", task="binary", classes=("0", "1"))]


def write_synth(out: Path, names, values, labels) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    csv_path, schema_path = out / "data.csv", out / "schema.json"

    def write_rows(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names + ["label"])
            for row, y in zip(values, labels):
                w.writerow([repr(float(v)) for v in row] + [str(int(y))])

    _atomic_via(csv_path, write_rows)
    _atomic_via(schema_path, lambda tmp: D.save_schema(synth_schema(names), tmp))
    return csv_path, schema_path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    names, values, labels = synthesize(cfg.n, cfg.class_dims, cfg.shared_dims, cfg.separation, cfg.noise, cfg.seed)
    csv_path, schema_path = write_synth(Path(cfg.out), names, values, labels)
    print(json.dumps({"data": str(csv_path), "schema": str(schema_path), "rows": cfg.n}))
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    dataset = _load_data(cfg)
    train_cfg = cfg.train_config()
    if train_cfg.label_assisted and dataset.label_column is None:
        raise CliError("label-assisted pre-training needs the label column, but the schema declares "
                       "no column of kind 'label'")
    prep = D.fit_preprocessor(dataset)
    matrix = D.transform(prep, dataset)
    model_cfg = model_config_for(matrix, seed=cfg.seed, **cfg.model_overrides())
    model, trainlog = pretrain(matrix, train_cfg, model_cfg)
    out = Path(cfg.out)
    write_checkpoint(out / "checkpoint.json", checkpoint_document(model, prep, train_cfg, "pretrain"))
    _atomic_via(out / "pretrain_log.csv", trainlog.write_csv)
    print(json.dumps({"checkpoint": str(out / "checkpoint.json"), "epochs": len(trainlog)}))
    return 0


def cmd_finetune(cfg: RunConfig) -> int:
    model, prep, _, dataset = _load_checkpoint_and_data(cfg)
    matrix = D.transform(prep, dataset)
    if matrix.labels is None:
        raise CliError("fine-tuning needs a label column")
    train_cfg = cfg.train_config()
    tuned, trainlog = finetune(model, matrix, train_cfg)
    out = Path(cfg.out)
    write_checkpoint(out / "finetuned.json", checkpoint_document(tuned, prep, train_cfg, "finetune"))
    _atomic_via(out / "finetune_log.csv", trainlog.write_csv)
    best = max((r.val_metric for r in trainlog.records), default=None)
    print(json.dumps({"checkpoint": str(out / "finetuned.json"), "epochs": len(trainlog), "best_val": best}))
    return 0


def cmd_embed(cfg: RunConfig) -> int:
    model, prep, _, dataset = _load_checkpoint_and_data(cfg)
    table = E.embed(model, D.transform(prep, dataset))
    path = Path(cfg.out) / "embeddings.csv"
    _atomic_via(path, table.write_csv)
    print(json.dumps({"embeddings": str(path), "rows": len(table)}))
    return 0


def _read_predictions(path: Path, kind: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{path}: no prediction rows")
    column = next((c for c in ("score", "prediction") if c in rows[0]), None)
    if "label" not in rows[0] or column is None:
        raise CliError(f"{path}: needs a 'label' column and a 'score' or 'prediction' column")
    try:
        preds = np.array([float(r[column]) for r in rows])
        labels = np.array([float(r["label"]) for r in rows])
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None
    if kind in ("auc", "accuracy"):
        labels = labels.astype(np.int64)
        if kind == "accuracy":
            preds = preds.astype(np.int64)
    return preds, labels


def cmd_eval(cfg: RunConfig) -> int:
    if cfg.kind not in E.METRICS:
        raise CliError(f"unknown metric kind {cfg.kind!r}")
    if cfg.predictions:
        preds, labels = _read_predictions(_require(cfg.predictions, "predictions"), cfg.kind)
    else:
        model, prep, _, dataset = _load_checkpoint_and_data(cfg)
        matrix = D.transform(prep, dataset)
        if matrix.labels is None:
            raise CliError("evaluation needs a label column")
        out = predict(model, encode(model, Tensor(matrix.values)), "finetune").data
        labels = matrix.labels
        if cfg.kind == "rmse":
            preds = out[:, 0]
        elif cfg.kind == "auc":
            logits = out - out.max(axis=1, keepdims=True)
            probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            preds = probs[:, 1]
        else:
            preds = out.argmax(axis=1)
    value = E.metric(preds, labels, cfg.kind)
    print(json.dumps({"metric": cfg.kind, "value": value, "n": int(len(labels))}))
    return 0


def cmd_project(cfg: RunConfig) -> int:
    model, prep, _, dataset = _load_checkpoint_and_data(cfg)
    matrix = D.transform(prep, dataset)
    table = E.embed(model, matrix)
    which = {"both": ("s", "m"), "s": ("s",), "m": ("m",), "z": ("z",)}.get(cfg.embedding)
    if which is None:
        raise CliError(f"embedding must be one of s, m, z, both; got {cfg.embedding!r}")
    groups = [str(int(v)) for v in matrix.labels] if matrix.labels is not None else ["all"] * matrix.n
    written = {}
    out = Path(cfg.out)
    for name in which:
        proj = E.pca2(getattr(table, name))
        csv_path, svg_path = out / f"projection_{name}.csv", out / f"projection_{name}.svg"
        _atomic_via(csv_path, lambda tmp: E.write_projection_csv(proj, groups, tmp))
        _atomic_via(svg_path, lambda tmp: E.write_projection_svg(proj, groups, tmp, title=f"{name} embedding"))
        written[name] = {"csv": str(csv_path), "svg": str(svg_path),
                         "explained_variance": list(proj.explained_variance)}
    print(json.dumps(written))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = run_suite()
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 1


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "project": cmd_project,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for schema mismatches here
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="switchtab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="run-config JSON file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--no-switch", action="store_true", help="drop the switched reconstruction terms")
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--ratio", type=float)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError("config must be a JSON object")
    cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_switch:
        cfg.switching = False
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.ratio is not None:
        cfg.ratio = args.ratio
    if args.out is not None:
        cfg.out = args.out
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"switchtab {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError, TypeError, FloatingPointError) as exc:
        print(f"switchtab {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
