"""End-to-end runs: data -> classifier -> impressions -> artifact -> reports.

Every stage persists its output under ``<out>/run-<config hash>/`` and later
stages load it from there. Reports are plain JSON with a CSV mirror and
contain no timestamps, so identical configurations give identical bytes.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .. import _store
from ..calibration import CalibrationArtifact, build_artifact, spatial_means
from ..datagen import DatasetSpec, ImageBatch, OODKind, generate_ood_dataset, standard_splits
from ..detector import (DetectorConfig, auto_threshold, baseline_energy, baseline_msp,
                        baseline_odin, c2ir_score, msp_class)
from ..inversion import InversionConfig, SynthesisDataset, synthesize_all
from ..smallnet import ArchConfig, Checkpoint, TrainConfig, build_model, forward_with_taps, train
from . import metrics
from .config import config_hash, with_seed

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
ID_SET = "id_test"


class MissingArtifact(FileNotFoundError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing {path}; run the `{stage}` stage first")
        self.stage = stage
        self.path = path


def _dump_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_store.to_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class Pipeline:
    """Stages of one seeded run, persisted under a hash-named directory."""

    def __init__(self, cfg: Dict[str, Any], out_root: str | Path):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.run_dir = Path(out_root) / f"run-{config_hash(cfg)}"
        self._cache: Dict[str, Any] = {}

    # paths
    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / "checkpoint.ckpt"

    @property
    def synthesis_path(self) -> Path:
        return self.run_dir / "synthesis"

    @property
    def artifact_path(self) -> Path:
        return self.run_dir / "calibration.cal"

    # configs
    def dataset_spec(self) -> DatasetSpec:
        d = self.cfg["data"]
        return DatasetSpec(num_classes=d["num_classes"], image_size=d["image_size"],
                           channels=d["channels"], samples_per_class=d["train_per_class"],
                           seed=self.seed, noise_sigma=d["noise_sigma"])

    def arch(self) -> ArchConfig:
        d = self.cfg["data"]
        return ArchConfig(tuple(self.cfg["model"]["block_channels"]), d["num_classes"],
                          d["channels"], d["image_size"])

    def inversion_config(self) -> InversionConfig:
        return InversionConfig(seed=self.seed, **self.cfg["inversion"])

    def detector_config(self) -> DetectorConfig:
        dc = DetectorConfig(**self.cfg["detector"])
        dc.validate()
        return dc

    # data
    def _dataset(self, name: str, make) -> ImageBatch:
        if name not in self._cache:
            path = self.run_dir / "data" / name
            if (path / "manifest.json").exists():
                self._cache[name] = ImageBatch.load(path)
            else:
                batch = make()
                batch.save(path, {"seed": self.seed, "spec": self.dataset_spec().to_dict()})
                self._cache[name] = batch
        return self._cache[name]

    def _splits(self):
        if "splits" not in self._cache:
            d = self.cfg["data"]
            self._cache["splits"] = standard_splits(self.dataset_spec(), d["train_per_class"],
                                                    d["test_per_class"])
        return self._cache["splits"]

    def id_train(self) -> ImageBatch:
        return self._dataset("id_train", lambda: self._splits()[0])

    def id_test(self) -> ImageBatch:
        return self._dataset("id_test", lambda: self._splits()[1])

    def eval_id(self) -> ImageBatch:
        test = self.id_test()
        n = self.cfg["data"]["eval_id_samples"]
        idx = np.sort(np.random.default_rng([self.seed, 0xE5]).choice(len(test), n, replace=False))
        return test.subset(idx)

    def ood(self, kind: str) -> ImageBatch:
        spec = replace(self.dataset_spec(), ood_kind=OODKind(kind),
                       samples_per_class=self.cfg["data"]["ood_samples"])
        return self._dataset(f"ood_{kind}", lambda: generate_ood_dataset(spec))

    # stages
    def train(self) -> Checkpoint:
        t = self.cfg["train"]
        hyper = TrainConfig(epochs=t["epochs"], lr=t["lr"], momentum=t["momentum"],
                            batch_size=t["batch_size"], seed=self.seed)
        ckpt = train(build_model(self.arch(), self.seed), self.id_train(), hyper, self.id_test())
        ckpt.save(self.checkpoint_path)
        _dump_json(self.run_dir / "config.json", self.cfg)
        self._cache["checkpoint"] = ckpt
        logger.info("trained checkpoint, test accuracy %.4f", ckpt.metadata["test_accuracy"])
        return ckpt

    def checkpoint(self, build: bool = False) -> Checkpoint:
        if "checkpoint" not in self._cache:
            if self.checkpoint_path.exists():
                self._cache["checkpoint"] = Checkpoint.load(self.checkpoint_path)
            elif build:
                return self.train()
            else:
                raise MissingArtifact("train", self.checkpoint_path)
        return self._cache["checkpoint"]

    def invert(self, build: bool = False) -> SynthesisDataset:
        syn = synthesize_all(self.checkpoint(build), self.inversion_config())
        syn.save(self.synthesis_path)
        self._cache["synthesis"] = syn
        return syn

    def synthesis(self, build: bool = False) -> SynthesisDataset:
        if "synthesis" not in self._cache:
            if (self.synthesis_path / "manifest.json").exists():
                self._cache["synthesis"] = SynthesisDataset.load(self.synthesis_path)
            elif build:
                return self.invert(build)
            else:
                raise MissingArtifact("invert", self.synthesis_path)
        return self._cache["synthesis"]

    def calibrate(self, build: bool = False) -> CalibrationArtifact:
        ckpt = self.checkpoint(build)
        art = build_artifact(ckpt, self.synthesis(build),
                             guard=self.cfg["calibration"]["delta_y_guard"])
        art.save(self.artifact_path)
        self._cache["artifact"] = art
        return art

    def artifact(self, build: bool = False) -> CalibrationArtifact:
        if "artifact" not in self._cache:
            if self.artifact_path.exists():
                self._cache["artifact"] = CalibrationArtifact.load(self.artifact_path)
            elif build:
                return self.calibrate(build)
            else:
                raise MissingArtifact("calibrate", self.artifact_path)
        return self._cache["artifact"]


# --- scoring -----------------------------------------------------------------------

def score_sets(pipe: Pipeline, methods: Sequence[str], ood_sets: Sequence[str],
               artifact: Optional[CalibrationArtifact] = None, build: bool = False,
               write: bool = True) -> Dict[str, Dict[str, np.ndarray]]:
    """Scores of every method on the ID eval set and each OOD set; dumps CSVs."""
    ckpt = pipe.checkpoint(build)
    dc = pipe.detector_config()
    sets = {ID_SET: pipe.eval_id(), **{k: pipe.ood(k) for k in ood_sets}}
    out: Dict[str, Dict[str, np.ndarray]] = {m: {} for m in methods}
    c2ir_rows: List[List[str]] = []
    for name, batch in sets.items():
        logits = None
        for m in methods:
            if m == "c2ir":
                art = artifact if artifact is not None else pipe.artifact(build)
                res = c2ir_score(ckpt, art, batch)
                out[m][name] = res.score
                for i in range(len(res)):
                    c2ir_rows.append([str(i), name, str(int(res.msp_class[i]))]
                                     + [_fmt(v) for v in res.deviations[i]] + [_fmt(res.score[i])])
            elif m == "odin":
                out[m][name] = baseline_odin(ckpt, batch, dc.odin_temperature, dc.odin_epsilon)
            else:
                if logits is None:
                    logits, _ = forward_with_taps(ckpt, batch)
                out[m][name] = (baseline_msp(logits) if m == "msp"
                                else baseline_energy(logits, dc.energy_temperature))
    if write:
        score_dir = pipe.run_dir / "scores"
        score_dir.mkdir(parents=True, exist_ok=True)
        if "c2ir" in methods:
            L = pipe.arch().num_layers
            header = ["sample_id", "source_set", "msp_class"] + [f"delta_{l + 1}" for l in range(L)] + ["S"]
            _write_csv(score_dir / "c2ir.csv", header, c2ir_rows)
        for m in methods:
            if m == "c2ir":
                continue
            rows = [[str(i), name, _fmt(v)] for name, s in out[m].items() for i, v in enumerate(s)]
            _write_csv(score_dir / f"{m}.csv", ["sample_id", "source_set", "score"], rows)
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cells(scores: Dict[str, Dict[str, np.ndarray]], ood_sets: Sequence[str], label_key: str,
           score_file=None) -> List[dict]:
    cells = []
    for m, per_set in scores.items():
        for s in ood_sets:
            cell = {label_key: m, "ood_set": s, **metrics.all_metrics(per_set[ID_SET], per_set[s])}
            if score_file is not None:
                cell["scores"] = score_file(m)
            cells.append(cell)
    return cells


def _write_report(path: Path, report: dict, label_key: str) -> None:
    _dump_json(path.with_suffix(".json"), report)
    keys = [label_key, "ood_set", *metrics.METRICS]
    _write_csv(path.with_suffix(".csv"), keys,
               [[c[label_key], c["ood_set"], *(_fmt(c[k]) for k in metrics.METRICS)]
                for c in report["cells"]])


def run_benchmark(cfg: Dict[str, Any], out_root: str | Path, build: bool = False,
                  methods: Optional[Sequence[str]] = None,
                  ood_sets: Optional[Sequence[str]] = None) -> dict:
    """Four metrics for every (method, OOD set) of one seeded run."""
    pipe = Pipeline(cfg, out_root)
    methods = list(methods or cfg["eval"]["methods"])
    ood_sets = list(ood_sets or cfg["eval"]["ood_sets"])
    scores = score_sets(pipe, methods, ood_sets, build=build)
    report = {
        "kind": "metrics_report", "schema_version": REPORT_VERSION, "seed": pipe.seed,
        "run": pipe.run_dir.name, "config": cfg,
        "test_accuracy": pipe.checkpoint().metadata.get("test_accuracy"),
        "cells": _cells(scores, ood_sets, "method",
                        lambda m: "scores/c2ir.csv" if m == "c2ir" else f"scores/{m}.csv"),
    }
    if "c2ir" in methods:
        ckpt, art, syn = pipe.checkpoint(), pipe.artifact(), pipe.synthesis(build)
        impressions = np.concatenate([c2ir_score(ckpt, art, syn.images[c]).score
                                      for c in syn.classes])
        thr = pipe.detector_config().threshold
        report["c2ir_threshold"] = auto_threshold(impressions) if thr == "auto" else float(thr)
    _write_report(pipe.run_dir / "report", report, "method")
    return report


# --- ablation ----------------------------------------------------------------------

def ablation_artifact(artifact: CalibrationArtifact, mode: str, checkpoint: Checkpoint,
                      seed: int = 0) -> CalibrationArtifact:
    """Copy of ``artifact`` with layer/channel weights or references swapped per ``mode``."""
    art = copy.deepcopy(artifact)
    C, L = art.num_classes, art.num_layers

    def refit_means():
        art.cavg = np.stack([[art.beta[l][c] @ art.channel_means[l][c] for l in range(L)]
                             for c in range(C)])

    if mode == "mgi":
        pass
    elif mode == "penultimate_only":
        art.alpha = np.zeros((C, L))
        art.alpha[:, -1] = 1.0
    elif mode == "uniform_mean":
        art.alpha = np.full((C, L), 1.0 / L)
        art.beta = [np.full_like(b, 1.0 / b.shape[1]) for b in art.beta]
        refit_means()
    elif mode == "random_weights":
        rng = np.random.default_rng([seed, 0xAB])
        art.alpha = rng.dirichlet(np.ones(L), size=C)
        art.beta = [rng.dirichlet(np.ones(b.shape[1]), size=C) for b in art.beta]
        refit_means()
    elif mode == "bn_stats_reference":
        bn = checkpoint.bn_stats()
        art.cavg = np.stack([[art.beta[l][c] @ bn[l]["running_mean"] for l in range(L)]
                             for c in range(C)])
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    art.meta = {**art.meta, "ablation_mode": mode}
    return art


def run_ablation(cfg: Dict[str, Any], out_root: str | Path, build: bool = False,
                 modes: Optional[Sequence[str]] = None,
                 ood_sets: Optional[Sequence[str]] = None) -> dict:
    pipe = Pipeline(cfg, out_root)
    modes = list(modes or cfg["eval"]["ablation_modes"])
    ood_sets = list(ood_sets or cfg["eval"]["ood_sets"])
    base, ckpt = pipe.artifact(build), pipe.checkpoint(build)
    scores = {}
    for mode in modes:
        art = ablation_artifact(base, mode, ckpt, seed=pipe.seed)
        scores[mode] = score_sets(pipe, ["c2ir"], ood_sets, artifact=art, write=False)["c2ir"]
    report = {"kind": "ablation_report", "schema_version": REPORT_VERSION, "seed": pipe.seed,
              "run": pipe.run_dir.name, "config": cfg,
              "cells": _cells(scores, ood_sets, "mode")}
    _write_report(pipe.run_dir / "ablation", report, "mode")
    return report


def aggregate(reports: Sequence[dict], label_key: str) -> dict:
    """Mean of every metric over per-seed reports (cells matched by label and set)."""
    first = reports[0]
    cells = []
    for i, cell in enumerate(first["cells"]):
        per_seed = [r["cells"][i] for r in reports]
        agg = {label_key: cell[label_key], "ood_set": cell["ood_set"]}
        for k in metrics.METRICS:
            vals = [c[k] for c in per_seed]
            agg[k] = float(np.mean(vals))
            agg[f"{k}_per_seed"] = vals
        cells.append(agg)
    return {"kind": first["kind"], "schema_version": REPORT_VERSION,
            "seeds": [r["seed"] for r in reports], "runs": [r["run"] for r in reports],
            "cells": cells}


def run_seeds(fn, cfg: Dict[str, Any], out_root: str | Path, seeds: Sequence[int],
              label_key: str, **kwargs) -> dict:
    """Run ``fn`` per seed and write the seed-mean report next to the runs."""
    reports = [fn(with_seed(cfg, s), out_root, **kwargs) for s in seeds]
    agg = aggregate(reports, label_key)
    name = "report" if label_key == "method" else "ablation"
    _write_report(Path(out_root) / f"{name}-seeds-{'-'.join(map(str, seeds))}", agg, label_key)
    return agg


# --- layer comparison -------------------------------------------------------------

def emit_layer_comparison(checkpoint: Checkpoint, artifact: CalibrationArtifact,
                          id_batch: ImageBatch, ood_batch: ImageBatch,
                          classes: Optional[Sequence[int]] = None) -> List[dict]:
    """Per class and layer: weighted activation means of ID, OOD, impressions and BN means.

    ID samples are grouped by label (MSP class when unlabelled); all OOD
    samples are weighted with each class's channel weights.
    """
    artifact.check_fingerprint(checkpoint)
    id_logits, id_taps = forward_with_taps(checkpoint, id_batch)
    _, ood_taps = forward_with_taps(checkpoint, ood_batch)
    id_groups = id_batch.labels if id_batch.labels is not None else msp_class(id_logits)
    bn = checkpoint.bn_stats()
    rows = []
    for c in (range(artifact.num_classes) if classes is None else classes):
        mask = id_groups == c
        for l in range(artifact.num_layers):
            beta = artifact.beta[l][c]
            values = {
                "id": float(spatial_means(id_taps[l][mask]).mean(axis=0) @ beta) if mask.any()
                else float("nan"),
                "ood": float(spatial_means(ood_taps[l]).mean(axis=0) @ beta),
                "impression": float(artifact.cavg[c, l]),
                "bn_running_mean": float(bn[l]["running_mean"] @ beta),
            }
            rows.extend({"class": c, "layer": l, "source": s, "value": v}
                        for s, v in values.items())
    return rows


def write_layer_comparison(rows: Sequence[dict], path: str | Path) -> None:
    _write_csv(Path(path), ["class", "layer", "source", "value"],
               [[r["class"], r["layer"], r["source"], _fmt(r["value"])] for r in rows])
