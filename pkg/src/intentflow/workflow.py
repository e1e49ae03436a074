"""Disk-artifact orchestration of the full intent-lifecycle pipeline.

A run directory holds one subdirectory per stage and method plus a
top-level manifest linking every artifact by content hash:

    <out>/data/                     splits, catalog, split manifest
    <out>/<method>/pretrain/        encoder, centroids, history, threshold
    <out>/<method>/classify/        Test-I IND predictions and F1 report
    <out>/<method>/detect/          scores, partition, detection report
    <out>/<method>/discover/        clusters, minted labels, mapping
    <out>/<method>/continual/       replay pool, retrained model
    <out>/<method>/evaluate/        final-test slice report
    <out>/report/                   consolidated task tables + dumps
    <out>/manifest.json

Every stage reads its inputs from disk and writes its outputs to disk,
so running the stages one-by-one is byte-identical (in every metric
report) to one uninterrupted workflow run. Stage functions raise
PrerequisiteError when an upstream artifact is missing and ConfigError
for invalid configuration; anything else is a stage failure.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import centroid as centroid_mod
from .baseline import LinearHead, fc_classify_batch, ft_train
from .continual import build_replay_set, evaluate_continual, retrain
from .data import (Dataset, LabelCatalog, generate_synthetic, load_jsonl,
                   make_splits, save_jsonl, segment_intents,
                   write_split_manifest)
from .detection import (DetectionCalibration, calibrate, judge, partition,
                        score_batch, write_score_dump)
from .discovery import assign_pseudo_labels, kmeans, write_clustering_report
from .encoder import ProjectionEncoder
from .metrics import (MetricsReport, ari, aupr, clustering_acc, fpr_at_tpr,
                      micro_macro_f1, nmi, roc_auroc)
from .scl import SclConfig, pretrain, write_history_csv

__all__ = [
    "ConfigError",
    "PrerequisiteError",
    "DataConfig",
    "DiscoverConfig",
    "WorkflowConfig",
    "load_config",
    "run_workflow",
    "run_stage",
    "STAGE_NAMES",
]

METHODS = ("scl", "ft")
STAGE_NAMES = ("pretrain", "classify", "detect", "discover", "continual",
               "evaluate", "report")
SPLIT_NAMES = ("train", "val", "test1", "test2")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class PrerequisiteError(RuntimeError):
    """A required upstream artifact is missing."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DataConfig:
    """Dataset source (file or synthetic) and split policy."""

    dataset: str | None = None
    synthetic_classes: int = 16
    synthetic_per_class: int = 200
    synthetic_dim: int = 32
    synthetic_separation: float = 6.0
    ind_fraction: float = 0.75
    val_fraction: float = 0.10
    test1_fraction: float = 0.10
    test2_fraction: float = 0.20
    seed: int = 7


@dataclass(frozen=True)
class DiscoverConfig:
    """Clustering knobs; k=None defers to the catalog's unknown count."""

    k: int | None = None
    restarts: int = 10
    max_iter: int = 300


@dataclass(frozen=True)
class WorkflowConfig:
    out: Path
    method: str = "scl"
    data: DataConfig = field(default_factory=DataConfig)
    train: SclConfig = field(default_factory=SclConfig)
    discover: DiscoverConfig = field(default_factory=DiscoverConfig)

    def methods(self) -> tuple[str, ...]:
        return METHODS if self.method == "both" else (self.method,)


def _get(parser, section: str, key: str, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if cast is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}")


def load_config(config_path=None, overrides: dict | None = None) -> WorkflowConfig:
    """Build a validated WorkflowConfig from an INI file plus overrides.

    Override keys (all optional): out, method, seed (sets both the data
    and the training seed), target_tpr, k.
    """
    overrides = overrides or {}
    parser = configparser.ConfigParser()
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}")

    data = DataConfig(
        dataset=_get(parser, "data", "dataset", str, None),
        synthetic_classes=_get(parser, "data", "synthetic_classes", int, 16),
        synthetic_per_class=_get(parser, "data", "synthetic_per_class", int, 200),
        synthetic_dim=_get(parser, "data", "synthetic_dim", int, 32),
        synthetic_separation=_get(parser, "data", "synthetic_separation", float, 6.0),
        ind_fraction=_get(parser, "data", "ind_fraction", float, 0.75),
        val_fraction=_get(parser, "data", "val_fraction", float, 0.10),
        test1_fraction=_get(parser, "data", "test1_fraction", float, 0.10),
        test2_fraction=_get(parser, "data", "test2_fraction", float, 0.20),
        seed=_get(parser, "data", "seed", int, 7),
    )
    train_kwargs = dict(
        temperature=_get(parser, "train", "temperature", float, 0.1),
        n_views=_get(parser, "train", "n_views", int, 2),
        dropout_p=_get(parser, "train", "dropout_p", float, 0.1),
        learning_rate=_get(parser, "train", "learning_rate", float, 5e-2),
        batch_size=_get(parser, "train", "batch_size", int, 64),
        max_epochs=_get(parser, "train", "max_epochs", int, 20),
        seed=_get(parser, "train", "seed", int, 0),
        inclusive_denominator=_get(parser, "train", "inclusive_denominator",
                                   bool, False),
        centroid_epsilon=_get(parser, "train", "centroid_epsilon", float, 1e-6),
        target_tpr=_get(parser, "detect", "target_tpr", float, 0.90),
    )
    disc = DiscoverConfig(
        k=_get(parser, "discover", "k", int, None),
        restarts=_get(parser, "discover", "restarts", int, 10),
        max_iter=_get(parser, "discover", "max_iter", int, 300),
    )
    out = _get(parser, "run", "out", str, None)
    method = _get(parser, "run", "method", str, "scl")

    if overrides.get("out") is not None:
        out = str(overrides["out"])
    if overrides.get("method") is not None:
        method = str(overrides["method"])
    if overrides.get("seed") is not None:
        seed = int(overrides["seed"])
        data = replace(data, seed=seed)
        train_kwargs["seed"] = seed
    if overrides.get("target_tpr") is not None:
        train_kwargs["target_tpr"] = float(overrides["target_tpr"])
    if overrides.get("k") is not None:
        disc = replace(disc, k=int(overrides["k"]))

    if out is None:
        raise ConfigError("no output directory: pass --out or set [run] out")
    if method not in (*METHODS, "both"):
        raise ConfigError(f"method must be scl, ft, or both, got {method!r}")
    if data.dataset is not None and not Path(data.dataset).is_file():
        raise ConfigError(f"dataset file not found: {data.dataset}")
    if not 0.0 < train_kwargs["target_tpr"] <= 1.0:
        raise ConfigError("target_tpr must be in (0, 1]")
    if disc.k is not None and disc.k < 1:
        raise ConfigError("k must be a positive integer")
    if disc.restarts < 1 or disc.max_iter < 1:
        raise ConfigError("restarts and max_iter must be positive")
    for name in ("ind_fraction", "val_fraction", "test1_fraction",
                 "test2_fraction"):
        value = getattr(data, name)
        if not 0.0 <= value < 1.0:
            raise ConfigError(f"{name} must be in [0, 1), got {value}")
    if not 0.0 < data.ind_fraction < 1.0:
        raise ConfigError("ind_fraction must be strictly between 0 and 1")
    if not 0.0 < data.test2_fraction < 1.0:
        raise ConfigError("test2_fraction must be strictly between 0 and 1")
    try:
        train = SclConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc))
    return WorkflowConfig(out=Path(out), method=method, data=data,
                          train=train, discover=disc)


# ---------------------------------------------------------------------------
# run layout, manifest


@dataclass(frozen=True)
class RunPaths:
    out: Path

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def manifest(self) -> Path:
        return self.out / "manifest.json"

    @property
    def report_dir(self) -> Path:
        return self.out / "report"

    def stage_dir(self, method: str, stage: str) -> Path:
        return self.out / method / stage

    def split_file(self, name: str) -> Path:
        return self.data_dir / f"{name}.jsonl"

    def catalog_file(self) -> Path:
        return self.data_dir / "catalog.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _reset_manifest(paths: RunPaths) -> None:
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.manifest.write_text(json.dumps({"stages": []}, indent=2) + "\n",
                              encoding="utf-8")


def _record_stage(paths: RunPaths, stage: str, method: str, seed: int,
                  inputs: list[Path], outputs: list[Path],
                  wall_time: float) -> None:
    if paths.manifest.exists():
        try:
            manifest = json.loads(paths.manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {"stages": []}
    else:
        manifest = {"stages": []}
    entry = {
        "stage": stage,
        "method": method,
        "seed": seed,
        "inputs": {str(p.relative_to(paths.out)) if p.is_relative_to(paths.out)
                   else str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p.relative_to(paths.out)): _sha256(p)
                    for p in outputs if p.is_file()},
        "wall_time_s": round(wall_time, 3),
    }
    stages = [s for s in manifest.get("stages", [])
              if not (s.get("stage") == stage and s.get("method") == method)]
    stages.append(entry)
    manifest["stages"] = stages
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.manifest.write_text(json.dumps(manifest, indent=2) + "\n",
                              encoding="utf-8")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(
            f"missing artifact {path}; run the `{producer}` stage first")
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# data preparation and reloading


def _write_catalog(path: Path, catalog: LabelCatalog,
                   names: dict[int, str]) -> None:
    obj = catalog.to_json()
    obj["label_names"] = {str(k): v for k, v in sorted(names.items())}
    _write_json(path, obj)


def _read_catalog(path: Path) -> tuple[LabelCatalog, dict[int, str]]:
    obj = json.loads(path.read_text(encoding="utf-8"))
    catalog = LabelCatalog.from_json(obj)
    names = {int(k): str(v) for k, v in obj.get("label_names", {}).items()}
    return catalog, names


def _load_split(paths: RunPaths, name: str, catalog: LabelCatalog,
                names: dict[int, str]) -> Dataset:
    label_ids = {v: k for k, v in names.items()}
    ds = load_jsonl(_require(paths.split_file(name), "pretrain"),
                    label_ids=label_ids)
    return replace(ds, catalog=catalog, label_names=names)


def prepare_data(cfg: WorkflowConfig) -> list[Path]:
    """(Re)write the split artifacts deterministically from the config."""
    d = cfg.data
    if d.dataset is not None:
        ds = load_jsonl(d.dataset)
    else:
        ds = generate_synthetic(d.synthetic_classes, d.synthetic_per_class,
                                d.synthetic_dim, d.synthetic_separation,
                                d.seed)
    catalog = segment_intents(ds.catalog, d.ind_fraction, d.seed)
    bundle = make_splits(ds, catalog, d.test2_fraction, d.seed,
                         val_fraction=d.val_fraction,
                         test1_fraction=d.test1_fraction)
    paths = RunPaths(cfg.out)
    written = []
    for name, split in bundle.parts().items():
        target = paths.split_file(name)
        save_jsonl(split, target)
        written.append(target)
    _write_catalog(paths.catalog_file(), catalog, ds.label_names)
    written.append(paths.catalog_file())
    manifest_path = paths.data_dir / "splits.tsv"
    write_split_manifest(bundle, manifest_path)
    written.append(manifest_path)
    return written


# ---------------------------------------------------------------------------
# stage implementations


def _best_epoch(history) -> tuple[int, float]:
    for rec in history:
        if rec.is_best:
            return rec.epoch, rec.val_auroc
    raise RuntimeError("no best epoch recorded")


def _val_ood_scores(model, enc, val: Dataset) -> np.ndarray:
    unknown = set(val.catalog.unknown)
    labels = val.labels()
    mask = np.array([int(l) in unknown for l in labels], dtype=bool)
    if not mask.any():
        raise ValueError("validation split has no unknown-class samples")
    return score_batch(model, enc.encode(val.matrix()[mask]))


def stage_pretrain(cfg: WorkflowConfig, method: str) -> None:
    t0 = time.perf_counter()
    paths = RunPaths(cfg.out)
    data_files = prepare_data(cfg)
    catalog, names = _read_catalog(paths.catalog_file())
    train = _load_split(paths, "train", catalog, names)
    val = _load_split(paths, "val", catalog, names)

    sdir = paths.stage_dir(method, "pretrain")
    sdir.mkdir(parents=True, exist_ok=True)
    enc_path = sdir / "encoder.enc"
    head_path = sdir / "head.hd"
    log_lines: list[str] = []

    enc = ProjectionEncoder.create(train.dim, dropout_p=cfg.train.dropout_p,
                                   seed=cfg.train.seed)
    if method == "scl":
        def on_improve(snapshot, epoch):
            snapshot.save(enc_path)

        _, history, _ = pretrain(enc, train, val, cfg.train,
                                 log_fn=log_lines.append,
                                 on_improve=on_improve)
    elif method == "ft":
        head = LinearHead.create(enc.output_dim, catalog.known,
                                 seed=cfg.train.seed)

        def on_improve(snapshot, epoch):
            snapshot[0].save(enc_path)
            snapshot[1].save(head_path)

        _, _, history, _ = ft_train(enc, head, train, val, cfg.train,
                                    log_fn=log_lines.append,
                                    on_improve=on_improve)
    else:
        raise ConfigError(f"unknown method {method!r}")

    best_epoch, best_auroc = _best_epoch(history)
    write_history_csv(history, sdir / "history.csv")
    _write_text(sdir / "train.log", "\n".join(log_lines) + "\n")

    # Refit downstream artifacts from the persisted checkpoint so every
    # later stage sees exactly what a fresh process would load.
    enc_best = ProjectionEncoder.load(enc_path)
    model = centroid_mod.fit(enc_best.encode(train.matrix()), train.labels(),
                             epsilon=cfg.train.centroid_epsilon)
    model.save(sdir / "centroid.cen")
    cal = calibrate(_val_ood_scores(model, enc_best, val),
                    cfg.train.target_tpr,
                    calibrated_on=f"val@epoch{best_epoch}")
    cal_obj = cal.to_json()
    cal_obj["best_epoch"] = best_epoch
    cal_obj["best_val_auroc"] = best_auroc
    _write_json(sdir / "calibration.json", cal_obj)

    outputs = data_files + [enc_path, sdir / "history.csv",
                            sdir / "train.log", sdir / "centroid.cen",
                            sdir / "calibration.json"]
    if method == "ft":
        outputs.append(head_path)
    inputs = [Path(cfg.data.dataset)] if cfg.data.dataset else []
    _record_stage(paths, "pretrain", method, cfg.train.seed, inputs, outputs,
                  time.perf_counter() - t0)


def _load_pretrained(paths: RunPaths, method: str):
    sdir = paths.stage_dir(method, "pretrain")
    enc = ProjectionEncoder.load(_require(sdir / "encoder.enc", "pretrain"))
    model = centroid_mod.CentroidModel.load(
        _require(sdir / "centroid.cen", "pretrain"))
    return enc, model


def stage_classify(cfg: WorkflowConfig, method: str) -> None:
    t0 = time.perf_counter()
    paths = RunPaths(cfg.out)
    catalog, names = _read_catalog(_require(paths.catalog_file(), "pretrain"))
    test1 = _load_split(paths, "test1", catalog, names)
    enc, model = _load_pretrained(paths, method)

    known = set(catalog.known)
    labels = test1.labels()
    ind_idx = [i for i, l in enumerate(labels) if int(l) in known]
    if not ind_idx:
        raise ValueError("Test-I split has no known-class samples")
    gold = labels[ind_idx]
    embedded = enc.encode(test1.matrix()[ind_idx])
    preds = model.classify_batch(embedded)
    micro, macro = micro_macro_f1(gold, preds)
    report = MetricsReport(micro_f1=micro, macro_f1=macro)

    sdir = paths.stage_dir(method, "classify")
    sdir.mkdir(parents=True, exist_ok=True)
    ids = [test1.samples[i].id for i in ind_idx]
    columns = ["id", "gold", "pred"]
    rows = [[ids[i], int(gold[i]), int(preds[i])] for i in range(len(ids))]
    inputs = [paths.stage_dir(method, "pretrain") / "encoder.enc",
              paths.stage_dir(method, "pretrain") / "centroid.cen",
              paths.split_file("test1")]
    if method == "ft":
        head = LinearHead.load(
            _require(paths.stage_dir(method, "pretrain") / "head.hd",
                     "pretrain"))
        fc_preds = fc_classify_batch(enc, head, test1.matrix()[ind_idx])
        fc_micro, fc_macro = micro_macro_f1(gold, fc_preds)
        report.extra["FC Micro F1"] = fc_micro
        report.extra["FC Macro F1"] = fc_macro
        columns.append("fc_pred")
        for i in range(len(rows)):
            rows[i].append(int(fc_preds[i]))
        inputs.append(paths.stage_dir(method, "pretrain") / "head.hd")

    with (sdir / "predictions.csv").open("w", encoding="utf-8",
                                         newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
    _write_text(sdir / "report.csv", report.to_csv())
    _write_text(sdir / "report.txt", report.to_kv_text())
    _write_json(sdir / "report.json",
                {"micro_f1": micro, "macro_f1": macro,
                 **{k.lower().replace(" ", "_"): v
                    for k, v in report.extra.items()}})
    outputs = [sdir / "predictions.csv", sdir / "report.csv",
               sdir / "report.txt", sdir / "report.json"]
    _record_stage(paths, "classify", method, cfg.train.seed, inputs, outputs,
                  time.perf_counter() - t0)


def stage_detect(cfg: WorkflowConfig, method: str) -> None:
    t0 = time.perf_counter()
    paths = RunPaths(cfg.out)
    catalog, names = _read_catalog(_require(paths.catalog_file(), "pretrain"))
    test1 = _load_split(paths, "test1", catalog, names)
    enc, model = _load_pretrained(paths, method)
    cal_path = _require(paths.stage_dir(method, "pretrain") / "calibration.json",
                        "pretrain")
    cal = DetectionCalibration.from_json(
        json.loads(cal_path.read_text(encoding="utf-8")))

    unknown = set(catalog.unknown)
    labels = test1.labels()
    is_ood = np.array([int(l) in unknown for l in labels], dtype=bool)
    if not is_ood.any() or is_ood.all():
        raise ValueError("Test-I split must mix known- and unknown-class "
                         "samples for detection metrics")
    scores = score_batch(model, enc.encode(test1.matrix()))
    report = MetricsReport(auroc=roc_auroc(scores, is_ood),
                           aupr=aupr(scores, is_ood),
                           fpr90=fpr_at_tpr(scores, is_ood, cal.target_tpr))
    judged = [judge(float(s), cal.lam) for s in scores]
    detected_ind, detected_ood = partition(model, cal, test1,
                                           transform=enc.encode)
    report.extra["Lambda"] = cal.lam
    report.extra["Detected IND"] = float(len(detected_ind))
    report.extra["Detected OOD"] = float(len(detected_ood))
    ood_total = int(is_ood.sum())
    caught = sum(1 for i in range(len(test1))
                 if is_ood[i] and judged[i] == "OOD")
    report.extra["OOD Recall"] = caught / ood_total

    sdir = paths.stage_dir(method, "detect")
    sdir.mkdir(parents=True, exist_ok=True)
    write_score_dump(sdir / "scores.csv", test1.ids(), scores, judged,
                     true_is_ood=is_ood)
    with (sdir / "gold.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "is_ood"])
        for i, s in enumerate(test1.samples):
            writer.writerow([s.id, int(labels[i]), int(is_ood[i])])
    if len(detected_ind):
        save_jsonl(detected_ind, sdir / "detected_ind.jsonl")
    if len(detected_ood):
        save_jsonl(detected_ood, sdir / "detected_ood.jsonl")
    _write_text(sdir / "report.csv", report.to_csv())
    _write_text(sdir / "report.txt", report.to_kv_text())
    _write_json(sdir / "report.json",
                {"auroc": report.auroc, "aupr": report.aupr,
                 "fpr_at_target": report.fpr90, "lambda": cal.lam,
                 "target_tpr": cal.target_tpr,
                 "detected_ind": len(detected_ind),
                 "detected_ood": len(detected_ood),
                 "ood_recall": report.extra["OOD Recall"]})
    inputs = [paths.stage_dir(method, "pretrain") / "encoder.enc",
              paths.stage_dir(method, "pretrain") / "centroid.cen",
              cal_path, paths.split_file("test1")]
    outputs = [sdir / "scores.csv", sdir / "gold.csv", sdir / "report.csv",
               sdir / "report.txt", sdir / "report.json",
               sdir / "detected_ind.jsonl", sdir / "detected_ood.jsonl"]
    _record_stage(paths, "detect", method, cfg.train.seed, inputs, outputs,
                  time.perf_counter() - t0)


def stage_discover(cfg: WorkflowConfig, method: str) -> None:
    t0 = time.perf_counter()
    paths = RunPaths(cfg.out)
    catalog, names = _read_catalog(_require(paths.catalog_file(), "pretrain"))
    ddir = paths.stage_dir(method, "detect")
    ood_path = _require(ddir / "detected_ood.jsonl", "detect")
    gold_path = _require(ddir / "gold.csv", "detect")
    enc, _ = _load_pretrained(paths, method)

    ds_ood = load_jsonl(ood_path, label_ids={})
    embedded = enc.encode(ds_ood.matrix())
    k = cfg.discover.k if cfg.discover.k is not None else len(catalog.unknown)
    if k < 1:
        raise ConfigError("no unknown classes and no k configured")
    result = kmeans(embedded, k, seed=cfg.train.seed,
                    max_iter=cfg.discover.max_iter,
                    n_restarts=cfg.discover.restarts)
    minted, catalog2 = assign_pseudo_labels(result, catalog)

    gold_by_id: dict[str, int] = {}
    with gold_path.open("r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            gold_by_id[row["id"]] = int(row["label"])
    gold = np.array([gold_by_id[sample_id] for sample_id in ds_ood.ids()],
                    dtype=np.int64)

    acc_value, mapping = clustering_acc(gold, minted)
    unmatched = sorted(set(int(c) for c in catalog2.discovered) - set(mapping))
    report = MetricsReport(nmi=nmi(gold, minted), ari=ari(gold, minted),
                           acc=acc_value,
                           extra={"K": float(k),
                                  "Inertia": result.inertia,
                                  "Iterations": float(result.iterations),
                                  "Unmatched Clusters": float(len(unmatched))})

    names2 = dict(names)
    names2.update({c: str(c) for c in catalog2.discovered})
    discovered_ds = replace(ds_ood.with_labels(minted), catalog=catalog2,
                            label_names=names2)

    sdir = paths.stage_dir(method, "discover")
    sdir.mkdir(parents=True, exist_ok=True)
    write_clustering_report(sdir / "clusters.csv", ds_ood.ids(), result,
                            minted, cfg.discover.restarts)
    save_jsonl(discovered_ds, sdir / "discovered.jsonl")
    _write_catalog(sdir / "catalog.json", catalog2, names2)
    _write_json(sdir / "mapping.json",
                {"mapping": {str(c): int(g) for c, g in sorted(mapping.items())},
                 "unmatched": unmatched})
    _write_text(sdir / "report.csv", report.to_csv())
    _write_text(sdir / "report.txt", report.to_kv_text())
    _write_json(sdir / "report.json",
                {"nmi": report.nmi, "ari": report.ari, "acc": report.acc,
                 "k": k, "inertia": result.inertia,
                 "iterations": result.iterations,
                 "restart": result.restart,
                 "unmatched": unmatched})
    inputs = [ood_path, gold_path,
              paths.stage_dir(method, "pretrain") / "encoder.enc"]
    outputs = [sdir / "clusters.csv", sdir / "discovered.jsonl",
               sdir / "catalog.json", sdir / "mapping.json",
               sdir / "report.csv", sdir / "report.txt",
               sdir / "report.json"]
    _record_stage(paths, "discover", method, cfg.train.seed, inputs, outputs,
                  time.perf_counter() - t0)


def stage_continual(cfg: WorkflowConfig, method: str) -> None:
    t0 = time.perf_counter()
    paths = RunPaths(cfg.out)
    ddir = paths.stage_dir(method, "detect")
    vdir = paths.stage_dir(method, "discover")
    ind_path = _require(ddir / "detected_ind.jsonl", "detect")
    disc_path = _require(vdir / "discovered.jsonl", "discover")
    catalog2, names2 = _read_catalog(_require(vdir / "catalog.json",
                                              "discover"))
    label_ids = {v: k for k, v in names2.items()}

    detected_ind = replace(load_jsonl(ind_path, label_ids=label_ids),
                           catalog=catalog2, label_names=names2)
    discovered = replace(load_jsonl(disc_path, label_ids=label_ids),
                         catalog=catalog2, label_names=names2)
    replay = build_replay_set(detected_ind, discovered, catalog2)
    val = _load_split(paths, "val", catalog2, names2)
    enc0, _ = _load_pretrained(paths, method)

    sdir = paths.stage_dir(method, "continual")
    sdir.mkdir(parents=True, exist_ok=True)
    enc_path = sdir / "encoder.enc"
    head_path = sdir / "head.hd"
    log_lines: list[str] = []

    if method == "scl":
        def on_improve(snapshot, epoch):
            snapshot.save(enc_path)

        _, _, history, _ = retrain(enc0, replay, val, cfg.train,
                                   log_fn=log_lines.append,
                                   on_improve=on_improve)
    else:
        labels = replay.data.labels()
        head = LinearHead.create(enc0.output_dim,
                                 sorted({int(l) for l in labels}),
                                 seed=cfg.train.seed)

        def on_improve(snapshot, epoch):
            snapshot[0].save(enc_path)
            snapshot[1].save(head_path)

        _, _, history, _ = ft_train(enc0.copy(), head, replay.data, val,
                                    cfg.train, log_fn=log_lines.append,
                                    on_improve=on_improve, reset_head=True)

    best_epoch, best_auroc = _best_epoch(history)
    write_history_csv(history, sdir / "history.csv")
    _write_text(sdir / "train.log", "\n".join(log_lines) + "\n")
    save_jsonl(replay.data, sdir / "replay.jsonl")
    with (sdir / "provenance.csv").open("w", encoding="utf-8",
                                        newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "provenance"])
        for sample, tag in zip(replay.data.samples, replay.provenance):
            writer.writerow([sample.id, tag])

    enc_best = ProjectionEncoder.load(enc_path)
    labels = replay.data.labels()
    model = centroid_mod.fit(enc_best.encode(replay.data.matrix()), labels,
                             epsilon=cfg.train.centroid_epsilon)
    model.save(sdir / "centroid.cen")
    cal = calibrate(_val_ood_scores(model, enc_best, val),
                    cfg.train.target_tpr,
                    calibrated_on=f"val@epoch{best_epoch}")
    cal_obj = cal.to_json()
    cal_obj["best_epoch"] = best_epoch
    cal_obj["best_val_auroc"] = best_auroc
    _write_json(sdir / "calibration.json", cal_obj)

    inputs = [ind_path, disc_path, vdir / "catalog.json",
              paths.stage_dir(method, "pretrain") / "encoder.enc",
              paths.split_file("val")]
    outputs = [sdir / "replay.jsonl", sdir / "provenance.csv", enc_path,
               sdir / "history.csv", sdir / "train.log",
               sdir / "centroid.cen", sdir / "calibration.json"]
    if method == "ft":
        outputs.append(head_path)
    _record_stage(paths, "continual", method, cfg.train.seed, inputs, outputs,
                  time.perf_counter() - t0)


def stage_evaluate(cfg: WorkflowConfig, method: str) -> None:
    t0 = time.perf_counter()
    paths = RunPaths(cfg.out)
    cdir = paths.stage_dir(method, "continual")
    vdir = paths.stage_dir(method, "discover")
    catalog2, names2 = _read_catalog(_require(vdir / "catalog.json",
                                              "discover"))
    mapping_obj = json.loads(
        _require(vdir / "mapping.json", "discover").read_text(encoding="utf-8"))
    mapping = {int(k): int(v) for k, v in mapping_obj["mapping"].items()}
    test2 = _load_split(paths, "test2", catalog2, names2)

    enc2 = ProjectionEncoder.load(_require(cdir / "encoder.enc", "continual"))
    model2 = centroid_mod.CentroidModel.load(
        _require(cdir / "centroid.cen", "continual"))
    slices = evaluate_continual(enc2, model2, test2, catalog2, mapping)

    # Pre-retraining reference on the IND slice (the forgetting yardstick).
    enc1, model1 = _load_pretrained(paths, method)
    labels = test2.labels()
    known = set(catalog2.known)
    ind_idx = [i for i, l in enumerate(labels) if int(l) in known]
    if not ind_idx:
        raise ValueError("final test split has no known-class samples")
    ref_preds = model1.classify_batch(enc1.encode(test2.matrix()[ind_idx]))
    ref_micro, ref_macro = micro_macro_f1(labels[ind_idx], ref_preds)

    sdir = paths.stage_dir(method, "evaluate")
    sdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for slice_name in ("overall", "on_ind", "on_ood"):
        rep = slices[slice_name]
        rows.append((slice_name, rep.micro_f1, rep.macro_f1))
    rows.append(("ref_on_ind", ref_micro, ref_macro))
    lines = ["Slice,Micro F1,Macro F1"]
    for name, micro, macro in rows:
        micro_s = "n/a" if micro is None else f"{micro:.6f}"
        macro_s = "n/a" if macro is None else f"{macro:.6f}"
        lines.append(f"{name},{micro_s},{macro_s}")
    _write_text(sdir / "report.csv", "\n".join(lines) + "\n")
    on_ind_macro = slices["on_ind"].macro_f1
    drop = None if on_ind_macro is None else ref_macro - on_ind_macro
    kv = []
    for name, micro, macro in rows:
        if micro is not None:
            kv.append(f"{name}.micro_f1={micro:.6f}")
        if macro is not None:
            kv.append(f"{name}.macro_f1={macro:.6f}")
    if drop is not None:
        kv.append(f"on_ind.macro_drop={drop:.6f}")
    _write_text(sdir / "report.txt", "\n".join(kv) + "\n")
    _write_json(sdir / "report.json", {
        "overall": {"micro_f1": slices["overall"].micro_f1,
                    "macro_f1": slices["overall"].macro_f1},
        "on_ind": {"micro_f1": slices["on_ind"].micro_f1,
                   "macro_f1": slices["on_ind"].macro_f1},
        "on_ood": {"micro_f1": slices["on_ood"].micro_f1,
                   "macro_f1": slices["on_ood"].macro_f1},
        "ref_on_ind": {"micro_f1": ref_micro, "macro_f1": ref_macro},
        "on_ind_macro_drop": drop,
    })
    inputs = [cdir / "encoder.enc", cdir / "centroid.cen",
              vdir / "mapping.json", vdir / "catalog.json",
              paths.split_file("test2"),
              paths.stage_dir(method, "pretrain") / "encoder.enc",
              paths.stage_dir(method, "pretrain") / "centroid.cen"]
    outputs = [sdir / "report.csv", sdir / "report.txt", sdir / "report.json"]
    _record_stage(paths, "evaluate", method, cfg.train.seed, inputs, outputs,
                  time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# consolidated report


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.6f}"


def _read_report(paths: RunPaths, method: str, stage: str) -> dict | None:
    path = paths.stage_dir(method, stage) / "report.json"
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def _render_table(title: str, header: list[str],
                  rows: list[list[str]]) -> tuple[str, str]:
    csv_lines = [",".join(header)]
    csv_lines.extend(",".join(row) for row in rows)
    csv_text = "\n".join(csv_lines) + "\n"
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt_row(cells):
        return "  ".join(cell.ljust(widths[i]) if i == 0 else
                         cell.rjust(widths[i])
                         for i, cell in enumerate(cells))
    text_lines = [title, fmt_row(header),
                  "  ".join("-" * w for w in widths)]
    text_lines.extend(fmt_row(row) for row in rows)
    return csv_text, "\n".join(text_lines) + "\n"


def stage_report(cfg: WorkflowConfig) -> None:
    t0 = time.perf_counter()
    paths = RunPaths(cfg.out)
    if not paths.manifest.is_file():
        raise PrerequisiteError(
            f"missing manifest {paths.manifest}; run a stage first")
    try:
        json.loads(paths.manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt manifest {paths.manifest}: {exc}")
    methods = [m for m in METHODS if paths.stage_dir(m, "pretrain").exists()]
    rdir = paths.report_dir
    rdir.mkdir(parents=True, exist_ok=True)

    t1_rows, t2_rows, t3_rows, t4_rows = [], [], [], []
    for m in methods:
        cls = _read_report(paths, m, "classify")
        label = "SCL-NDist" if m == "scl" else "FT-NDist"
        if cls is None:
            t1_rows.append([label, "n/a", "n/a"])
        else:
            t1_rows.append([label, _fmt(cls.get("micro_f1")),
                            _fmt(cls.get("macro_f1"))])
            if m == "ft" and "fc_micro_f1" in cls:
                t1_rows.append(["FT-FullyConnect", _fmt(cls["fc_micro_f1"]),
                                _fmt(cls["fc_macro_f1"])])
        det = _read_report(paths, m, "detect")
        name = m.upper()
        if det is None:
            t2_rows.append([name, "n/a", "n/a", "n/a"])
        else:
            t2_rows.append([name, _fmt(det.get("auroc")),
                            _fmt(det.get("aupr")),
                            _fmt(det.get("fpr_at_target"))])
        dis = _read_report(paths, m, "discover")
        if dis is None:
            t3_rows.append([name, "n/a", "n/a", "n/a"])
        else:
            t3_rows.append([name, _fmt(dis.get("nmi")), _fmt(dis.get("ari")),
                            _fmt(dis.get("acc"))])
        ev = _read_report(paths, m, "evaluate")
        if ev is None:
            t4_rows.append([name, "overall", "n/a", "n/a"])
        else:
            for slice_name in ("overall", "on_ind", "on_ood", "ref_on_ind"):
                entry = ev.get(slice_name, {})
                t4_rows.append([name, slice_name,
                                _fmt(entry.get("micro_f1")),
                                _fmt(entry.get("macro_f1"))])
    if not methods:
        t1_rows = [["n/a", "n/a", "n/a"]]
        t2_rows = [["n/a", "n/a", "n/a", "n/a"]]
        t3_rows = [["n/a", "n/a", "n/a", "n/a"]]
        t4_rows = [["n/a", "n/a", "n/a", "n/a"]]

    tables = [
        ("T-1 intent classification (Test-I IND)",
         ["Method", "Micro F1", "Macro F1"], t1_rows, "t1.csv"),
        ("T-2 OOD detection (Test-I)",
         ["Method", "AUROC", "AUPR", "FPR90"], t2_rows, "t2.csv"),
        ("T-3 new-intent discovery (detected OOD)",
         ["Method", "NMI", "ARI", "ACC"], t3_rows, "t3.csv"),
        ("T-4 continual retraining (Test-II)",
         ["Method", "Slice", "Micro F1", "Macro F1"], t4_rows, "t4.csv"),
    ]
    text_parts = []
    outputs = []
    for title, header, rows, filename in tables:
        csv_text, table_text = _render_table(title, header, rows)
        _write_text(rdir / filename, csv_text)
        outputs.append(rdir / filename)
        text_parts.append(table_text)
    _write_text(rdir / "tables.txt", "\n".join(text_parts))
    outputs.append(rdir / "tables.txt")

    # Projection-ready representation dump of the Test-I split under each
    # method's pre-trained encoder.
    if paths.catalog_file().is_file() and paths.split_file("test1").is_file():
        catalog, names = _read_catalog(paths.catalog_file())
        test1 = _load_split(paths, "test1", catalog, names)
        for m in methods:
            enc_path = paths.stage_dir(m, "pretrain") / "encoder.enc"
            if not enc_path.is_file():
                continue
            enc = ProjectionEncoder.load(enc_path)
            embedded = enc.encode(test1.matrix())
            dump = rdir / f"embeddings_{m}.csv"
            labels = test1.labels()
            with dump.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["id", "label"]
                                + [f"e{j}" for j in range(embedded.shape[1])])
                for i, s in enumerate(test1.samples):
                    writer.writerow([s.id, test1.label_name(int(labels[i]))]
                                    + [f"{v:.9g}" for v in embedded[i]])
            outputs.append(dump)
    _record_stage(paths, "report", "-", cfg.train.seed, [], outputs,
                  time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# entry points


_STAGE_FNS = {
    "pretrain": stage_pretrain,
    "classify": stage_classify,
    "detect": stage_detect,
    "discover": stage_discover,
    "continual": stage_continual,
    "evaluate": stage_evaluate,
}


def run_stage(cfg: WorkflowConfig, stage: str) -> None:
    """Run one stage (for every configured method) against the run dir."""
    if stage == "report":
        stage_report(cfg)
        return
    try:
        fn = _STAGE_FNS[stage]
    except KeyError:
        raise ConfigError(f"unknown stage {stage!r}")
    for method in cfg.methods():
        fn(cfg, method)


def run_workflow(cfg: WorkflowConfig) -> None:
    """Execute every stage in order with a fresh manifest, then report."""
    paths = RunPaths(cfg.out)
    _reset_manifest(paths)
    for method in cfg.methods():
        for stage in ("pretrain", "classify", "detect", "discover",
                      "continual", "evaluate"):
            _STAGE_FNS[stage](cfg, method)
    stage_report(cfg)
