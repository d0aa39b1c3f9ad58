"""Cross-validated robustness experiment, reporting and golden-trace replay.

One experiment run trains, per fold, a whole-image ToyNet (the holistic
model and the holistic-only baseline), one ToyNet per part (the context
phase's constituent models) and one forest per part (the attention phase).
Test images are then attacked white-box against the fold's holistic net and
every clean or attacked test image goes through :func:`decide`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from latsys import forest as rf
from latsys.adversarial import (
    PRESETS,
    AttackParams,
    SplitLeakageError,
    attack_dataset,
    image_checksum,
)
from latsys.class_matrix import ClassMatrix, Scale, constituent_perception
from latsys.core_types import (
    DecisionTrace,
    InputDomainError,
    PartKind,
    PhaseSignal,
    label_from_species_id,
)
from latsys.dataprep import (
    Dataset,
    SyntheticSpec,
    crop,
    generate_synthetic,
    read_dataset,
)
from latsys.engine import (
    AttentionOutcome,
    PredictorBank,
    build_trace,
    context_from_evidence,
    decide,
)
from latsys.features import ExtractionCounter, FeatureSet
from latsys.predictors import (
    ForestPartPredictor,
    NetPredictor,
    load_toynet,
    save_toynet,
    train_net_predictor,
)

log = logging.getLogger(__name__)

CLEAN = "OrigImgs"
CONDITIONS = (CLEAN, "FGSM-M", "FGSM-S", "Itr-M", "Itr-S")
SYSTEMS = ("holistic-only", "lateralized")


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    test_ids: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        seen = [i for fold in self.test_ids for i in fold]
        if len(seen) != len(set(seen)):
            raise InputDomainError("folds overlap")
        if len(self.test_ids) != self.k:
            raise InputDomainError("fold count does not match k")

    @property
    def ids(self) -> list[str]:
        return [i for fold in self.test_ids for i in fold]

    def test(self, fold: int) -> list[str]:
        return list(self.test_ids[fold])

    def train(self, fold: int) -> list[str]:
        held = set(self.test_ids[fold])
        return [i for f in self.test_ids for i in f if i not in held]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed,
                "test_ids": [list(f) for f in self.test_ids]}


def make_folds(ids: Sequence[str], labels: Sequence[int], k: int = 10,
               seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan.

    Each class is shuffled and the classes, taken in label order, are dealt
    round-robin across folds as one continuous stream. Fold sizes then differ
    by at most one and each class lands within one instance of its share.
    """
    ids = list(ids)
    labels = np.asarray(labels)
    if k < 2:
        raise InputDomainError("k must be >= 2")
    if len(ids) < k:
        raise InputDomainError(f"{len(ids)} ids cannot fill {k} folds")
    if len(ids) != labels.size:
        raise InputDomainError("ids and labels differ in length")
    if len(set(ids)) != len(ids):
        raise InputDomainError("ids must be unique")
    rng = np.random.default_rng(seed)
    stream = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        stream.extend(members[rng.permutation(members.size)].tolist())
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, i in enumerate(stream):
        folds[pos % k].append(ids[i])
    return FoldPlan(k, seed, tuple(tuple(f) for f in folds))


# --------------------------------------------------------------------------
# configuration


def _default_config() -> dict:
    return {
        "seed": 0,
        "dataset": {"kind": "synthetic", "n_images": 1600, "n_classes": 8,
                    "seed": 0},
        "folds": 10,
        "holistic_net": {"hidden": 64, "epochs": 30, "lr": 0.1, "batch_size": 32},
        "part_nets": {"input_shape": [14, 14], "hidden": 32, "epochs": 30,
                      "lr": 0.1, "batch_size": 32},
        "forest": {"n_trees": 100, "max_features": None, "max_depth": None,
                   "min_samples_split": 2},
        "features": FeatureSet().to_dict(),
        "attacks": ["FGSM-M", "FGSM-S", "Itr-M", "Itr-S"],
        "include_face": True,
        "parallel": False,
        "top": 2,
    }


def _merge(base: dict, override: Mapping) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise InputDomainError(f"unknown manifest key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, Mapping) and key != "features":
            out[key] = {**base[key], **value}
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved run manifest. ``settings`` holds every value, defaults included."""

    settings: dict

    @classmethod
    def from_dict(cls, data: Optional[Mapping] = None, **overrides) -> "ExperimentConfig":
        settings = _merge(_default_config(), data or {})
        settings = _merge(settings, overrides)
        config = cls(settings)
        config.attacks  # validate names early
        return config

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()), **overrides)

    def to_json(self) -> str:
        return json.dumps(self.settings, indent=2, sort_keys=True)

    def __getattr__(self, name: str) -> Any:
        try:
            return self.settings[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def attacks(self) -> list[AttackParams]:
        out = []
        for entry in self.settings["attacks"]:
            if isinstance(entry, str):
                if entry not in PRESETS:
                    raise InputDomainError(f"unknown attack preset {entry!r}")
                out.append(PRESETS[entry])
            else:
                out.append(AttackParams(**entry))
        return out

    @property
    def feature_set(self) -> FeatureSet:
        return FeatureSet.from_dict(self.settings["features"])

    def forest_params(self, seed: int) -> rf.ForestParams:
        return rf.ForestParams(seed=seed, **self.settings["forest"])

    def fold_seeds(self, fold: int, n_parts: int) -> list[int]:
        """Independent seeds for one fold: holistic net, then (net, forest)
        per part."""
        seq = np.random.SeedSequence([int(self.seed), fold])
        return [int(s) for s in seq.generate_state(1 + 2 * n_parts)]


def load_dataset(config: ExperimentConfig) -> Dataset:
    spec = dict(config.dataset)
    kind = spec.pop("kind", "synthetic")
    if kind == "directory":
        return read_dataset(spec["path"], spec.get("n_classes"))
    if kind != "synthetic":
        raise InputDomainError(f"unknown dataset kind {kind!r}")
    n = spec.pop("n_images")
    return generate_synthetic(SyntheticSpec(**spec), n)


# --------------------------------------------------------------------------
# feature memo


def crop_key(region: np.ndarray) -> bytes:
    region = np.ascontiguousarray(region, dtype="<f8")
    return hashlib.sha1(repr(region.shape).encode() + region.tobytes()).digest()


class FeatureMemo:
    """Concatenated descriptors keyed by crop content.

    Identical crops (the clean test crops, or Itr-M and Itr-S images when the
    step budget binds before epsilon) are described once.
    """

    def __init__(self, features: FeatureSet):
        if not features.concatenate:
            raise InputDomainError("the memo only serves concatenated features")
        self.features = features
        self.sift, self.hog, self.concatenate = features.sift, features.hog, True
        self._rows: dict[bytes, np.ndarray] = {}
        self.computed = 0

    def extract(self, region: np.ndarray) -> np.ndarray:
        key = crop_key(region)
        row = self._rows.get(key)
        if row is None:
            row = self.features.extract(region)
            row.setflags(write=False)
            self._rows[key] = row
            self.computed += 1
        return row

    def extract_variants(self, region: np.ndarray):
        return self.features.extract_variants(region)

    def __len__(self) -> int:
        return len(self._rows)


def part_feature_matrix(ds: Dataset, index: Sequence[int], part: PartKind,
                        memo: FeatureMemo) -> tuple[np.ndarray, np.ndarray]:
    rows, ys = [], []
    for i in index:
        box = ds.boxes[i].get(part)
        region = None if box is None else crop(ds.images[i], box)
        if region is None:
            continue
        rows.append(memo.extract(region))
        ys.append(int(ds.labels[i]))
    return np.array(rows), np.array(ys, dtype=np.int64)


def parts_of(ds: Dataset) -> list[PartKind]:
    present = {p for boxes in ds.boxes for p in boxes}
    return [p for p in PartKind if p in present]


# --------------------------------------------------------------------------
# report


@dataclass
class AccuracyReport:
    """Per-fold accuracies (percent) for each condition and system."""

    conditions: list[str]
    systems: list[str] = field(default_factory=lambda: list(SYSTEMS))
    per_fold: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def add(self, condition: str, system: str, accuracy: float) -> None:
        if not 0.0 <= accuracy <= 100.0:
            raise InputDomainError(f"accuracy {accuracy} outside [0, 100]")
        self.per_fold.setdefault(condition, {}).setdefault(system, []).append(accuracy)

    def mean(self, condition: str, system: str) -> float:
        return float(np.mean(self.per_fold[condition][system]))

    def std(self, condition: str, system: str) -> float:
        values = self.per_fold[condition][system]
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    def to_text(self) -> str:
        head = ["Condition"] + [f"{s} (%)" for s in self.systems]
        rows = [[c] + [f"{self.mean(c, s):6.2f} ± {self.std(c, s):5.2f}"
                       for s in self.systems] for c in self.conditions]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(head, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
                  for r in rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["condition", "system", "mean", "std", "folds"])
        for c in self.conditions:
            for s in self.systems:
                writer.writerow([c, s, f"{self.mean(c, s):.6f}",
                                 f"{self.std(c, s):.6f}", len(self.per_fold[c][s])])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"conditions": self.conditions, "systems": self.systems,
                "per_fold": self.per_fold}

    @classmethod
    def from_dict(cls, data: Mapping) -> "AccuracyReport":
        return cls(list(data["conditions"]), list(data["systems"]),
                   {c: {s: list(v) for s, v in d.items()}
                    for c, d in data["per_fold"].items()})

    @classmethod
    def from_outcomes(cls, outcomes: Iterable["Outcome"], conditions: Sequence[str]
                      ) -> "AccuracyReport":
        """Recount accuracies from per-image outcomes."""
        tally: dict[tuple[str, int], list[Outcome]] = {}
        for o in outcomes:
            tally.setdefault((o.condition, o.fold), []).append(o)
        report = cls(list(conditions))
        for c in conditions:
            for fold in sorted(f for cc, f in tally if cc == c):
                group = tally[(c, fold)]
                report.add(c, SYSTEMS[0], 100.0 * np.mean([o.baseline_correct for o in group]))
                report.add(c, SYSTEMS[1], 100.0 * np.mean([o.lateral_correct for o in group]))
        return report


@dataclass(frozen=True)
class Outcome:
    fold: int
    condition: str
    image_id: str
    label: int
    baseline_label: int
    lateral_label: int
    rule: str
    extractions: int

    @property
    def baseline_correct(self) -> bool:
        return self.baseline_label == self.label

    @property
    def lateral_correct(self) -> bool:
        return self.lateral_label == self.label

    FIELDS = ("fold", "condition", "image_id", "label", "baseline_label",
              "lateral_label", "rule", "extractions")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def outcomes_csv(outcomes: Sequence[Outcome]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(Outcome.FIELDS)
    writer.writerows(o.row() for o in outcomes)
    return buf.getvalue()


def read_outcomes(path) -> list[Outcome]:
    with open(path, newline="") as fh:
        return [Outcome(int(r["fold"]), r["condition"], r["image_id"], int(r["label"]),
                        int(r["baseline_label"]), int(r["lateral_label"]), r["rule"],
                        int(r["extractions"]))
                for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# one fold


@dataclass
class FoldModels:
    holistic: NetPredictor
    part_nets: dict[PartKind, NetPredictor]
    forests: dict[PartKind, rf.Forest]


def train_fold(ds: Dataset, train_index: Sequence[int], config: ExperimentConfig,
               fold: int, memo: FeatureMemo) -> FoldModels:
    parts = parts_of(ds)
    seeds = config.fold_seeds(fold, len(parts))
    train_index = list(train_index)
    images, labels = ds.images[train_index], ds.labels[train_index]
    boxes = [ds.boxes[i] for i in train_index]
    hn = config.holistic_net
    holistic = train_net_predictor(
        images, labels, ds.n_classes, hidden=hn["hidden"], epochs=hn["epochs"],
        lr=hn["lr"], seed=seeds[0], batch_size=hn.get("batch_size", 32),
        weight_decay=hn.get("weight_decay", 0.0), noise=hn.get("noise", 0.0))
    pn = config.part_nets
    part_nets, forests = {}, {}
    for j, part in enumerate(parts):
        part_nets[part] = train_net_predictor(
            images, labels, ds.n_classes, hidden=pn["hidden"], epochs=pn["epochs"],
            lr=pn["lr"], seed=seeds[1 + 2 * j],
            input_shape=tuple(pn["input_shape"]), part=part, boxes=boxes,
            batch_size=pn.get("batch_size", 32),
            weight_decay=pn.get("weight_decay", 0.0), noise=pn.get("noise", 0.0))
        X, y = part_feature_matrix(ds, train_index, part, memo)
        forests[part] = rf.fit(X, y, config.forest_params(seeds[2 + 2 * j]),
                               n_classes=ds.n_classes)
    return FoldModels(holistic, part_nets, forests)


def save_fold_models(models: FoldModels, out_dir) -> Path:
    """ToyNet checkpoints, forest JSON files and an ``index.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_toynet(models.holistic.net, out / "holistic.ckpt")
    index = {"holistic": {"file": "holistic.ckpt",
                          "input_shape": list(models.holistic.input_shape)},
             "parts": {}}
    for part, net in models.part_nets.items():
        save_toynet(net.net, out / f"net-{part.value}.ckpt")
        models.forests[part].save(out / f"forest-{part.value}.json")
        index["parts"][part.value] = {"net": f"net-{part.value}.ckpt",
                                      "input_shape": list(net.input_shape),
                                      "forest": f"forest-{part.value}.json"}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out


def load_fold_models(in_dir) -> FoldModels:
    root = Path(in_dir)
    index = json.loads((root / "index.json").read_text())
    h = index["holistic"]
    holistic = NetPredictor(load_toynet(root / h["file"]), tuple(h["input_shape"]))
    nets, forests = {}, {}
    for name, entry in index["parts"].items():
        part = PartKind(name)
        nets[part] = NetPredictor(load_toynet(root / entry["net"]),
                                  tuple(entry["input_shape"]), part)
        forests[part] = rf.Forest.load(root / entry["forest"])
    return FoldModels(holistic, nets, forests)


def fold_banks(models: FoldModels, memo, counter: ExtractionCounter,
               include_face: bool = True):
    """Context bank and attention bank for one fold's models."""
    context = PredictorBank(dict(models.part_nets), models.holistic,
                            include_face=include_face)
    attention = {p: ForestPartPredictor([f], memo, counter)
                 for p, f in models.forests.items()}
    return context, attention


@dataclass
class FoldResult:
    fold: int
    traces: list[DecisionTrace]
    outcomes: list[Outcome]
    audit: dict


def evaluate_fold(ds: Dataset, plan: FoldPlan, fold: int, config: ExperimentConfig,
                  memo: FeatureMemo) -> FoldResult:
    index_of = {image_id: i for i, image_id in enumerate(ds.ids)}
    train_ids, test_ids = plan.train(fold), plan.test(fold)
    train_index = [index_of[i] for i in train_ids]
    test_index = [index_of[i] for i in test_ids]
    if set(train_ids) & set(test_ids):
        raise SplitLeakageError(f"fold {fold}: train and test ids overlap")

    started = time.perf_counter()
    models = train_fold(ds, train_index, config, fold, memo)
    log.info("fold %d: models trained in %.1fs", fold, time.perf_counter() - started)

    counter = ExtractionCounter()
    context, attention = fold_banks(models, memo, counter, config.include_face)
    train_sums = {image_checksum(ds.images[i]) for i in train_index}
    test_images = ds.images[test_index]
    test_labels = ds.labels[test_index]

    traces, outcomes = [], []
    audit = {"fold": fold, "model_checksum": models.holistic.checksum(),
             "n_train": len(train_ids), "n_test": len(test_ids), "attacks": {}}
    conditions = [(CLEAN, None)] + [(a.name, a) for a in config.attacks]
    for name, params in conditions:
        if params is None:
            images = test_images
        else:
            images, manifest = attack_dataset(
                test_images, test_labels, test_ids, models.holistic, params,
                seed=int(config.seed), train_ids=train_ids,
                model_checksum=audit["model_checksum"])
            leaked = [i for i, s in zip(test_ids, manifest.image_checksums)
                      if s in train_sums]
            if leaked:
                raise SplitLeakageError(
                    f"fold {fold}: attacked images match training images: {leaked[:3]}")
            audit["attacks"][name] = {
                "max_linf": max(manifest.linf, default=0.0),
                "budget": params.budget,
                "loss_increased": int(sum(manifest.loss_increased)),
                "checksums": hashlib.sha256(
                    "".join(manifest.image_checksums).encode()).hexdigest()[:16],
            }
        for k, i in enumerate(test_index):
            sample = ds.sample(i, images[k])
            trace = decide(sample, context, attention, parallel=config.parallel,
                           extraction_count=lambda: counter.count,
                           top=config.top)
            traces.append(trace)
            outcomes.append(Outcome(fold, name, sample.image_id, sample.label,
                                    trace.hlp.label, trace.final_label, trace.rule,
                                    trace.attention_extractions))
        log.info("fold %d: %s done (%.1fs)", fold, name, time.perf_counter() - started)
    return FoldResult(fold, traces, outcomes, audit)


# --------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    plan: FoldPlan
    report: AccuracyReport
    traces: list[DecisionTrace]
    outcomes: list[Outcome]
    audits: list[dict]

    @property
    def summary(self) -> dict:
        clean = [o for o in self.outcomes if o.condition == CLEAN]
        inhibited = [o for o in clean if o.rule == "inhibit"]
        recount = AccuracyReport.from_outcomes(self.outcomes, self.report.conditions)
        return {
            "report": self.report.to_dict(),
            "recount_matches": recount.to_dict() == self.report.to_dict(),
            "clean_inhibit_fraction": len(inhibited) / len(clean) if clean else 0.0,
            "clean_inhibit_extractions": sum(o.extractions for o in inhibited),
            "rules": {c: {r: sum(1 for o in self.outcomes
                                 if o.condition == c and o.rule == r)
                          for r in ("inhibit", "majority", "fallback")}
                      for c in self.report.conditions},
            "audits": self.audits,
        }

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(self.config.to_json() + "\n")
        (out / "folds.json").write_text(json.dumps(self.plan.to_dict()) + "\n")
        (out / "report.txt").write_text(self.report.to_text())
        (out / "report.csv").write_text(self.report.to_csv())
        (out / "outcomes.csv").write_text(outcomes_csv(self.outcomes))
        with open(out / "traces.jsonl", "w") as fh:
            for trace in self.traces:
                fh.write(trace.to_json() + "\n")
        (out / "summary.json").write_text(
            json.dumps(self.summary, indent=2, sort_keys=True) + "\n")
        return out


_WORKER_STATE: dict = {}


def _fold_worker(fold: int) -> FoldResult:
    s = _WORKER_STATE
    return evaluate_fold(s["ds"], s["plan"], fold, s["config"], s["memo"])


def run_experiment(config: ExperimentConfig, *, jobs: int = 1,
                   dataset: Optional[Dataset] = None,
                   memo: Optional[FeatureMemo] = None) -> ExperimentResult:
    """Cross-validated clean and attacked evaluation of both systems.

    ``memo`` may be shared between runs over the same dataset and features.
    With ``jobs > 1`` folds run in forked worker processes; results are
    assembled in fold order, so they do not depend on scheduling.
    """
    ds = dataset if dataset is not None else load_dataset(config)
    memo = memo if memo is not None else FeatureMemo(config.feature_set)
    plan = make_folds(ds.ids, ds.labels, config.folds, config.seed)

    started = time.perf_counter()
    for part in parts_of(ds):
        part_feature_matrix(ds, range(len(ds)), part, memo)
    log.info("clean features ready in %.1fs (%d crops)",
             time.perf_counter() - started, len(memo))

    if jobs > 1:
        _WORKER_STATE.update(ds=ds, plan=plan, config=config, memo=memo)
        ctx = multiprocessing.get_context("fork")
        try:
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                results = list(pool.map(_fold_worker, range(plan.k)))
        finally:
            _WORKER_STATE.clear()
    else:
        results = [evaluate_fold(ds, plan, f, config, memo) for f in range(plan.k)]

    traces = [t for r in results for t in r.traces]
    outcomes = [o for r in results for o in r.outcomes]
    names = [CLEAN] + [a.name for a in config.attacks]
    conditions = [c for c in CONDITIONS if c in names] + [c for c in names
                                                           if c not in CONDITIONS]
    report = AccuracyReport.from_outcomes(outcomes, conditions)
    return ExperimentResult(config, plan, report, traces, outcomes,
                            [r.audit for r in results])


# --------------------------------------------------------------------------
# golden replay


def load_golden(path=None) -> dict:
    if path is None:
        text = resources.files("latsys").joinpath("data/golden_birds.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def _score_vector(scores: Mapping[str, float], n_classes: int, scale: float = 1.0
                  ) -> np.ndarray:
    vec = np.zeros(n_classes)
    for species, value in scores.items():
        vec[label_from_species_id(species)] = float(value) * scale
    return vec


@dataclass(frozen=True)
class ReplayResult:
    name: str
    expected: int
    trace: DecisionTrace
    expected_rule: Optional[str] = None

    @property
    def passed(self) -> bool:
        rule_ok = self.expected_rule is None or self.trace.rule == self.expected_rule
        return self.trace.final_label == self.expected and rule_ok

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: expected class-{self.expected + 1}, "
                f"got class-{self.trace.final_label + 1} via {self.trace.rule}")


def replay_case(case: Mapping, n_classes: int) -> DecisionTrace:
    """Feed recorded perceptions through the decision stage.

    The deep and forest matrices are given on the normalized 0-100 scale and
    the holistic vector as scores divided by 100.
    """
    cm_c = ClassMatrix(_score_vector(case["constituent_deep"], n_classes), Scale.NORMALIZED)
    cm_a = ClassMatrix(_score_vector(case["constituent_rf"], n_classes), Scale.NORMALIZED)
    holistic = _score_vector(case["holistic"], n_classes, 0.01)
    ctx = context_from_evidence(cm_c, holistic)
    if ctx.signal is PhaseSignal.INHIBIT:
        attention = AttentionOutcome(cancelled=True)
    else:
        attention = AttentionOutcome(False, cm_a, constituent_perception(cm_a))
    return build_trace(case["name"], ctx, attention)


def replay_traces(golden: Optional[Mapping] = None) -> list[ReplayResult]:
    golden = load_golden() if golden is None else golden
    n = int(golden["n_classes"])
    return [ReplayResult(case["name"], label_from_species_id(case["expected"]),
                         replay_case(case, n), case.get("rule"))
            for case in golden["cases"]]
