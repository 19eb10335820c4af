"""Command-line pipeline: ``albumdate <stage> --run-dir DIR [--config FILE]``.

Stages communicate only through files in the run directory::

    run_config.json          exact configuration of the run
    stages/<stage>.json      completion marker (config hash and timestamp)
    ingest/   catalog.json, rejections.json
    detect/   regions.json, crops/
    split/    split.json
    train/    <branch>/bundle.json, weights.pt, log.jsonl
    evaluate/ scores.json, reports/<model>.json
    ablate/   ablation.json
    explain/  <photo>_<branch>.png/.json, histograms
    report/   report.json, report.md, figures/
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .catalog import (
    DATING_LABELS,
    TASKS,
    Catalog,
    ContextClass,
    SplitAssignment,
    catalog_for_task,
    load_manifest,
    make_splits,
    num_classes,
)
from .evaluation import (
    ABLATION_VARIANTS,
    AblationTable,
    EvaluationReport,
    PhotoScores,
    build_report,
    kofn_ablation,
    select_fixed_n,
    variant_name,
)
from .regions import (
    DEFAULT_CONFIDENCE_FLOOR,
    RegionDatasets,
    SidecarDetector,
    StaticDetector,
    build_region_datasets,
)

logger = logging.getLogger("albumdate")

IMAGE_ROOT_ENV = "ALBUMDATE_IMAGE_ROOT"
STAGES = ("ingest", "detect", "split", "train", "evaluate", "ablate", "explain", "report")
REQUIRES = {
    "ingest": (),
    "detect": ("ingest",),
    "split": ("ingest",),
    "train": ("split", "detect"),
    "evaluate": ("train",),
    "ablate": ("evaluate",),
    "explain": ("train",),
    "report": ("evaluate",),
}
SINGLE_BRANCHES = ("image", "faces", "people")
MODEL_ORDER = ("image", "faces", "people", "ensemble", "merged")
# Fields that locate inputs and outputs but do not change results.
_LOCATION_FIELDS = ("run_dir", "image_root")


class CliError(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------


@dataclass
class DetectorConfig:
    kind: str = "sidecar"  # sidecar | opencv | none
    sidecar_dir: str | None = None  # default: <manifest dir>/detections
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR


@dataclass
class BackboneConfig:
    family: str = "resnet50"
    variant: str = "compact"
    pretrained: bool = False
    weights_path: str | None = None


@dataclass
class EvalConfig:
    distances: list[int] = field(default_factory=lambda: [0, 5, 10])
    ks: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    ablation_n: int = 8
    ablation_mode: str = "all"


@dataclass
class ExplainConfig:
    count: int = 4
    target: str = "predicted"  # predicted | true
    opacity: float = 0.5


def _default_branch_train() -> dict:
    # Frozen-backbone fusion trains on cached features, so its epochs are cheap.
    return {"merged": {"epochs": 300, "patience": 30}}


@dataclass
class RunConfig:
    task: str = "dating"
    manifest: str | None = None
    image_root: str | None = None
    run_dir: str = "run"
    seed: int = 0
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: dict = field(default_factory=dict)
    branch_train: dict = field(default_factory=_default_branch_train)
    freeze_backbones: bool = True
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    _NESTED = {"detector": DetectorConfig, "backbone": BackboneConfig, "evaluation": EvalConfig,
               "explain": ExplainConfig}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for name, sub in cls._NESTED.items():
            if name in kwargs:
                value = kwargs[name]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise CliError(f"unknown keys in config section {name!r}: {sorted(bad)}")
                kwargs[name] = sub(**value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def identity(self) -> dict:
        d = self.to_dict()
        for k in _LOCATION_FIELDS:
            d.pop(k)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        from .models import FAMILIES, VARIANTS

        if self.task not in TASKS:
            raise CliError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.detector.kind not in ("sidecar", "opencv", "none"):
            raise CliError(f"detector kind must be sidecar, opencv or none, got {self.detector.kind!r}")
        if not 0 <= self.detector.confidence_floor <= 1:
            raise CliError("detector confidence_floor must be in [0, 1]")
        if self.backbone.family not in FAMILIES or self.backbone.variant not in VARIANTS:
            raise CliError(f"backbone must be one of {FAMILIES} x {VARIANTS}")
        bad = set(self.branch_train) - set(SINGLE_BRANCHES + ("merged",))
        if bad:
            raise CliError(f"branch_train has unknown branches {sorted(bad)}")
        for branch in SINGLE_BRANCHES + ("merged",):
            try:
                self.train_config(branch)
            except (TypeError, ValueError) as exc:
                raise CliError(f"invalid training settings for {branch}: {exc}") from exc
        if any(d < 0 for d in self.evaluation.distances):
            raise CliError("time distances must be >= 0")
        if any(not 1 <= k <= num_classes(self.task) for k in self.evaluation.ks):
            raise CliError(f"k values must be in [1, {num_classes(self.task)}]")
        if self.evaluation.ablation_n < 1 or self.evaluation.ablation_mode not in ("all", "any"):
            raise CliError("ablation_n must be >= 1 and ablation_mode 'all' or 'any'")
        if self.explain.target not in ("predicted", "true") or not 0 <= self.explain.opacity <= 1:
            raise CliError("explain target must be predicted|true and opacity in [0, 1]")

    def train_config(self, branch: str):
        from .training import TrainConfig

        overrides = {**self.train, **self.branch_train.get(branch, {}), "seed": self.seed}
        return TrainConfig.for_branch(branch, **overrides)


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- run directory ----------------------------------------------------------


class Run:
    """A run directory bound to one configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.dir = Path(config.run_dir).resolve()

    def path(self, *parts: str) -> Path:
        return self.dir.joinpath(*parts)

    @property
    def image_root(self) -> Path | None:
        if self.config.image_root:
            return Path(self.config.image_root)
        if self.config.manifest:
            return Path(self.config.manifest).resolve().parent
        return None

    def marker(self, stage: str) -> Path:
        return self.path("stages", f"{stage}.json")

    def is_done(self, stage: str) -> bool:
        m = self.marker(stage)
        return m.exists() and _read_json(m).get("config_hash") == self.config.digest()

    def mark_done(self, stage: str, **info) -> None:
        _write_json(self.marker(stage), {
            "stage": stage, "config_hash": self.config.digest(), "completed_at": time.time(),
            "image_root": None if self.image_root is None else str(self.image_root), **info,
        })

    def invalidate_from(self, stage: str) -> None:
        """Drop the markers of ``stage`` and every stage that depends on it."""
        stale = {stage}
        changed = True
        while changed:
            changed = False
            for s, reqs in REQUIRES.items():
                if s not in stale and stale.intersection(reqs):
                    stale.add(s)
                    changed = True
        for s in stale:
            self.marker(s).unlink(missing_ok=True)

    def require(self, stage: str) -> None:
        for pre in REQUIRES[stage]:
            if not self.is_done(pre):
                raise CliError(f"stage {stage!r} needs stage {pre!r}, which has not completed; run "
                               f"`albumdate {pre} --run-dir {self.dir}` first")

    def fresh_dir(self, stage: str) -> Path:
        d = self.path(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    # -- shared artifacts

    def catalog(self) -> Catalog:
        return Catalog.from_json(_read_json(self.path("ingest", "catalog.json")))

    def task_catalog(self) -> Catalog:
        return catalog_for_task(self.catalog(), self.config.task)

    def split(self) -> SplitAssignment:
        return SplitAssignment.load(self.path("split", "split.json"))

    def regions(self) -> RegionDatasets:
        return RegionDatasets.load(self.path("detect", "regions.json"))

    def view(self):
        from .pipeline import DataView

        split = self.split()
        view = DataView(self.task_catalog().with_splits(split), self.regions(), self.config.task, self.image_root)
        view.check_leakage(split)
        return view


def open_run(args: argparse.Namespace) -> Run:
    """Resolve the configuration for a command and pin it to the run directory."""
    run_dir = Path(args.run_dir) if args.run_dir else None
    existing = None
    if run_dir is not None and (run_dir / "run_config.json").exists():
        existing = RunConfig.from_dict(_read_json(run_dir / "run_config.json"))
    if args.config:
        config = RunConfig.from_dict(_read_json(Path(args.config)))
    elif existing is not None:
        config = dataclasses.replace(existing)
    else:
        config = RunConfig()
    for name in ("task", "seed", "manifest", "image_root"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    if run_dir is not None:
        config.run_dir = str(run_dir)
    if os.environ.get(IMAGE_ROOT_ENV):
        config.image_root = os.environ[IMAGE_ROOT_ENV]
    if config.manifest:
        config.manifest = str(Path(config.manifest).resolve())
    config.validate()

    run = Run(config)
    run.dir.mkdir(parents=True, exist_ok=True)
    if existing is not None and existing.identity() != config.identity():
        if not args.force:
            diff = sorted(k for k, v in config.identity().items() if existing.identity().get(k) != v)
            raise CliError(f"{run.dir} was created with a different configuration (differs in {diff}); "
                           "use a new --run-dir or pass --force to start over")
        shutil.rmtree(run.path("stages"), ignore_errors=True)
    if existing is None or existing.identity() != config.identity():
        _write_json(run.path("run_config.json"), config.to_dict())
    return run


# -- stages -----------------------------------------------------------------


def cmd_ingest(run: Run) -> int:
    if not run.config.manifest:
        raise CliError("no manifest configured; pass --manifest or set it in --config")
    catalog = load_manifest(run.config.manifest)
    out = run.fresh_dir("ingest")
    _write_json(out / "catalog.json", Catalog(catalog.records).to_json())
    _write_json(out / "rejections.json", [r.to_dict() for r in catalog.rejections])
    reasons: dict[str, int] = {}
    for r in catalog.rejections:
        reasons[r.reason] = reasons.get(r.reason, 0) + 1
    task_n = len(catalog_for_task(catalog, run.config.task))
    print(f"ingest: {len(catalog)} valid rows, {len(catalog.rejections)} rejected, "
          f"{task_n} usable for {run.config.task}")
    for reason, n in sorted(reasons.items()):
        print(f"  rejected ({reason}): {n}")
    if catalog.rejections:
        print(f"  rejection report: {out / 'rejections.json'}")
    if len(catalog) == 0:
        print("ingest: no valid rows", file=sys.stderr)
        return 1
    run.mark_done("ingest", valid=len(catalog), rejected=len(catalog.rejections))
    return 0


def _detector(run: Run):
    cfg = run.config.detector
    if cfg.kind == "none":
        return StaticDetector({})
    if cfg.kind == "opencv":
        from .regions import OpenCVDetector

        return OpenCVDetector()
    root = Path(cfg.sidecar_dir) if cfg.sidecar_dir else None
    if root is None:
        if not run.config.manifest:
            raise CliError("sidecar detector needs detector.sidecar_dir or a manifest location")
        root = Path(run.config.manifest).parent / "detections"
    if not root.is_dir():
        raise CliError(f"detection sidecar directory {root} does not exist")
    return SidecarDetector(root)


def cmd_detect(run: Run) -> int:
    catalog = run.task_catalog()
    out = run.fresh_dir("detect")
    regions = build_region_datasets(
        catalog, _detector(run), image_root=run.image_root, out_dir=out / "crops",
        confidence_floor=run.config.detector.confidence_floor,
    )
    regions.save(out / "regions.json")
    print(f"detect: {len(regions.faces)} face crops, {len(regions.people)} person crops, "
          f"{len(regions.no_region)} photos without regions, {len(regions.failures)} failures")
    for pid, msg in sorted(regions.failures.items()):
        print(f"  failed {pid}: {msg}", file=sys.stderr)
    run.mark_done("detect")
    return 0


def cmd_split(run: Run) -> int:
    catalog = run.task_catalog()
    split = make_splits(catalog, run.config.seed)
    out = run.fresh_dir("split")
    split.save(out / "split.json")
    print("split: " + ", ".join(f"{k} {v}" for k, v in split.counts().items()))
    run.mark_done("split")
    return 0


def _spec(run: Run):
    from .models import BackboneSpec

    b = run.config.backbone
    return BackboneSpec(b.family, b.variant, b.pretrained, b.weights_path)


def cmd_train(run: Run) -> int:
    from .models import build_merged, build_single, save_bundle
    from .pipeline import fit_branch, fit_merged

    view = run.view()
    out = run.fresh_dir("train")
    models = {}
    for branch in SINGLE_BRANCHES:
        cfg = run.config.train_config(branch)
        model = build_single(_spec(run), run.config.task, branch, seed=run.config.seed)
        if not view.branch_samples(branch, "train"):
            raise CliError(f"no {branch} samples in the train split; check the detect stage output")
        model, log = fit_branch(view, model, cfg)
        save_bundle(model, out / branch, train_config=cfg.to_dict(), best_epoch=log.best_epoch)
        log.write_jsonl(out / branch / "log.jsonl")
        models[branch] = model
        print(f"train: {branch} best epoch {log.best_epoch}")
    cfg = run.config.train_config("merged")
    merged = build_merged(models["image"], models["faces"], models["people"], run.config.task,
                          freeze_backbones=run.config.freeze_backbones, seed=run.config.seed)
    merged, log = fit_merged(view, merged, cfg)
    save_bundle(merged, out / "merged", train_config=cfg.to_dict(), best_epoch=log.best_epoch)
    log.write_jsonl(out / "merged" / "log.jsonl")
    w = merged.fusion_weights()
    print(f"train: merged best epoch {log.best_epoch}, alpha {w['alpha']:.4f} beta {w['beta']:.4f} "
          f"gamma {w['gamma']:.4f}")
    run.mark_done("train")
    return 0


def _load_models(run: Run):
    from .models import load_bundle

    return {b: load_bundle(run.path("train", b)) for b in SINGLE_BRANCHES + ("merged",)}


def _scores_to_json(scores: dict[str, PhotoScores]) -> dict:
    return {
        pid: {"label": s.label, "image": np.asarray(s.image).tolist(),
              "faces": s.faces.tolist(), "people": s.people.tolist()}
        for pid, s in sorted(scores.items())
    }


def _scores_from_json(data: dict) -> dict[str, PhotoScores]:
    return {pid: PhotoScores(pid, d["label"], np.asarray(d["image"]), np.asarray(d["faces"]),
                             np.asarray(d["people"])) for pid, d in data.items()}


def cmd_evaluate(run: Run) -> int:
    from .pipeline import branch_predictions, merged_probs, score_photos

    view = run.view()
    models = _load_models(run)
    cfg = run.config.train_config("image")
    scores = score_photos(view, {b: models[b] for b in SINGLE_BRANCHES}, "test", cfg)
    preds = branch_predictions(scores)
    records = view.records("test")
    preds["merged"] = (
        [r.photo_id for r in records],
        merged_probs(view, models["merged"], "test", cfg),
        np.array([r.label(run.config.task) for r in records]),
    )
    out = run.fresh_dir("evaluate")
    _write_json(out / "scores.json", {"merged": dict(zip(preds["merged"][0], preds["merged"][1].tolist())),
                                      "branches": _scores_to_json(scores)})
    ev = run.config.evaluation
    for name in MODEL_ORDER:
        if name not in preds:
            continue
        ids, probs, labels = preds[name]
        report = build_report(run.config.task, name, probs, labels, distances=ev.distances, ks=ev.ks,
                              notes={"samples": len(ids), "unit": "crop" if name in ("faces", "people") else "photo"})
        report.save(out / "reports" / f"{name}.json")
        print(f"evaluate: {name:9s} n={report.n_samples:5d} exact accuracy {report.exact_accuracy:.4f}")
    run.mark_done("evaluate")
    return 0


def cmd_ablate(run: Run) -> int:
    data = _read_json(run.path("evaluate", "scores.json"))
    scores = _scores_from_json(data["branches"])
    ev = run.config.evaluation
    face_counts = {pid: len(s.faces) for pid, s in scores.items()}
    people_counts = {pid: len(s.people) for pid, s in scores.items()}
    ids = select_fixed_n(sorted(scores), face_counts, people_counts, ev.ablation_n, ev.ablation_mode)
    if not ids:
        raise CliError(f"no test photo has exactly n={ev.ablation_n} faces "
                       f"{'and' if ev.ablation_mode == 'all' else 'or'} people; "
                       "lower evaluation.ablation_n or use ablation_mode 'any'")
    table = kofn_ablation([scores[p] for p in ids], ev.ablation_n)
    out = run.fresh_dir("ablate")
    _write_json(out / "ablation.json", {**table.to_json(), "photos": ids, "mode": ev.ablation_mode})
    print(f"ablate: n={ev.ablation_n}, {len(ids)} photos")
    run.mark_done("ablate")
    return 0


def class_names(task: str) -> list[str]:
    if task == "dating":
        return [str(DATING_LABELS.year_of(i)) for i in range(DATING_LABELS.num_classes)]
    return [ContextClass.from_index(i).value for i in range(len(ContextClass))]


def cmd_explain(run: Run) -> int:
    from .explain import gradcam, write_explanation
    from .imaging import prepare
    from .models import load_bundle
    from .pipeline import resolve
    from .plots import probability_histogram
    from .training import center_view

    view = run.view()
    models = {b: load_bundle(run.path("train", b)) for b in SINGLE_BRANCHES}
    cfg = run.config.train_config("image")
    ex = run.config.explain
    names = class_names(run.config.task)
    out = run.fresh_dir("explain")
    records = view.records("test")[: ex.count]
    written = []
    for r in records:
        label = r.label(run.config.task)
        sources = {"image": [str(resolve(r.image_ref, view.image_root))]}
        sources["faces"] = [view.crop_source(c, r) for c in view.faces.get(r.photo_id, [])[:1]]
        sources["people"] = [view.crop_source(c, r) for c in view.people.get(r.photo_id, [])[:1]]
        for branch in SINGLE_BRANCHES:
            for src in sources[branch]:
                model = models[branch]
                x = center_view(prepare(src, model.input_size), cfg)
                hm = gradcam(model, x.unsqueeze(0), label if ex.target == "true" else None)
                name = f"{r.photo_id}_{branch}"
                write_explanation(out, name, hm, x, photo_id=r.photo_id, true_class=label,
                                  class_names=names, opacity=ex.opacity)
                probability_histogram(hm.probabilities, names, out / f"{name}_probs.png", true_class=label)
                written.append(name)
    _write_json(out / "index.json", written)
    print(f"explain: {len(written)} heatmaps for {len(records)} test photos")
    run.mark_done("explain")
    return 0


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def cmd_report(run: Run) -> int:
    from .plots import ablation_chart, confusion_heatmap, decade_curve

    task = run.config.task
    reports = {}
    for name in MODEL_ORDER:
        p = run.path("evaluate", "reports", f"{name}.json")
        if p.exists():
            reports[name] = EvaluationReport.load(p)
    for r in reports.values():
        r.audit()
    out = run.fresh_dir("report")
    figs = out / "figures"
    names = class_names(task)
    doc: dict = {"task": task, "config_hash": run.config.digest(),
                 "models": {k: v.to_json() for k, v in reports.items()}, "tables": {}, "figures": {}}
    md = [f"# Run report: {task}", "", f"Configuration hash `{run.config.digest()}`, "
          f"backbone {run.config.backbone.family} ({run.config.backbone.variant}), seed {run.config.seed}.", ""]

    split = run.split().counts()
    md += ["## Data", "", _md_table(["split", "photos"], [[k, str(v)] for k, v in split.items()]), ""]

    if task == "dating":
        ds = run.config.evaluation.distances
        rows = {}
        for name, r in reports.items():
            rows[name] = {**{f"d={d}": r.accuracy_at[d] for d in ds},
                          "error_mean": r.mean_error[0], "error_std": r.mean_error[1], "samples": r.n_samples}
        doc["tables"]["accuracy_by_distance"] = rows
        md += ["## Dating accuracy by time distance", "",
               _md_table(["model", "samples"] + [f"d={d} (%)" for d in ds] + ["error (d=0)"],
                         [[n, str(v["samples"])] + [_pct(v[f"d={d}"]) for d in ds]
                          + [f"{v['error_mean']:.2f} ± {v['error_std']:.2f}"] for n, v in rows.items()]), ""]
        best = "merged" if "merged" in reports else "image"
        doc["figures"]["confusion"] = str(confusion_heatmap(
            reports[best].confusion, names, figs / "confusion.png", f"{best}, d=0", tick_every=5).relative_to(out))
        doc["figures"]["decades"] = str(decade_curve(
            reports[best].per_decade, figs / "decades.png", f"{best}: accuracy by decade").relative_to(out))
        md += ["## Accuracy by decade", "",
               _md_table(["decade", "accuracy (%)", "samples"],
                         [[f"{d}s", _pct(a), str(n)] for d, (a, n) in sorted(reports[best].per_decade.items())]),
               "", f"![confusion]({doc['figures']['confusion']})", "",
               f"![decades]({doc['figures']['decades']})", ""]
    ks = run.config.evaluation.ks
    doc["tables"]["topk"] = {name: {f"top-{k}": r.topk[k] for k in ks} for name, r in reports.items()}
    md += ["## Top-k accuracy", "",
           _md_table(["k"] + list(reports), [[f"top-{k}"] + [_pct(r.topk[k]) for r in reports.values()] for k in ks]),
           ""]
    if task == "context":
        doc["figures"]["confusion"] = str(confusion_heatmap(
            reports["image"].confusion, names, figs / "confusion.png", "image classifier").relative_to(out))
        md += [f"![confusion]({doc['figures']['confusion']})", ""]

    if run.is_done("ablate"):
        ab = _read_json(run.path("ablate", "ablation.json"))
        table = AblationTable.from_json(ab)
        cols = [variant_name(kind, w) for kind, w in ABLATION_VARIANTS]
        doc["tables"]["ablation"] = table.to_json()
        doc["figures"]["ablation"] = str(ablation_chart(table, figs / "ablation.png",
                                                        f"ensemble, n={table.n}").relative_to(out))
        md += [f"## Accuracy with k of n={table.n} faces/people (ensemble, d=0)", "",
               f"{len(ab['photos'])} test photos, selection mode {ab['mode']!r}.", "",
               _md_table(["k"] + cols, [[str(k)] + [_pct(table.rows[k][c]) for c in cols] for k in sorted(table.rows)]),
               "", f"![ablation]({doc['figures']['ablation']})", ""]
    if run.is_done("explain"):
        doc["explanations"] = _read_json(run.path("explain", "index.json"))
        md += ["## Explanations", "", f"{len(doc['explanations'])} Grad-CAM overlays in `explain/`.", ""]

    _write_json(out / "report.json", doc)
    (out / "report.md").write_text("\n".join(md), encoding="utf-8")
    print(f"report: {out / 'report.md'}")
    run.mark_done("report")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "detect": cmd_detect,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
    "report": cmd_report,
}


def run_stage(run: Run, stage: str, force: bool = False) -> int:
    run.require(stage)
    if run.is_done(stage) and not force:
        print(f"{stage}: already complete for this configuration")
        return 0
    run.invalidate_from(stage)
    return COMMANDS[stage](run)


def cmd_synth(args: argparse.Namespace) -> int:
    from .synthetic import SyntheticConfig, generate

    cfg = SyntheticConfig(n_photos=args.n_photos, seed=args.seed if args.seed is not None else 0)
    manifest = generate(args.out, cfg)
    print(f"synth: {cfg.n_photos} photos, manifest {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="albumdate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", required=True, help="run directory (created if missing)")
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--task", choices=TASKS, help="override the configured task")
    common.add_argument("--manifest", help="override the configured manifest path")
    common.add_argument("--image-root", dest="image_root",
                        help=f"directory image paths are relative to (env {IMAGE_ROOT_ENV} wins)")
    common.add_argument("--force", action="store_true",
                        help="re-run a completed stage, or replace a mismatched configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")

    synth = sub.add_parser("synth", help="write a synthetic album (images, detections, manifest)")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n-photos", type=int, default=1200)
    synth.add_argument("--seed", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        run = open_run(args)
        try:
            with FileLock(str(run.path(".lock")), timeout=0):
                if args.command == "run":
                    for stage in STAGES:
                        try:
                            code = run_stage(run, stage, args.force)
                        except CliError as exc:
                            if stage != "ablate":
                                raise
                            print(f"ablate: skipped ({exc})", file=sys.stderr)
                            continue
                        if code:
                            return code
                    return 0
                return run_stage(run, args.command, args.force)
        except Timeout:
            raise CliError(f"{run.dir} is locked by another albumdate process") from None
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"albumdate: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
