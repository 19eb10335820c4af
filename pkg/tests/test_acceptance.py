"""Acceptance criteria. Each test records one PASS/FAIL line in the terminal summary."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from albumdate.catalog import Catalog, ContextClass, PhotoRecord, derive_region_split, make_splits
from albumdate.cli import main
from albumdate.evaluation import (
    PhotoScores,
    aggregate_photo_vote,
    confusion_matrix,
    kofn_ablation,
    mean_abs_error,
    time_distance_accuracy,
    topk_accuracy,
)
from albumdate.explain import gradcam
from albumdate.models import BackboneSpec, MergedModel, build_backbone, ensemble_predict, merged_forward
from albumdate.pipeline import DataView
from albumdate.regions import DetectionBox, RegionCrop, RegionDatasets
from albumdate.synthetic import SyntheticConfig, generate
from albumdate.training import BranchDataset
from conftest import ACCEPTANCE_LINES
from tiny import ProjectedBackbone, quadrant_mass, quadrant_model, tiny_merged

SPLIT_FRACTIONS = (0.72, 0.08, 0.20)


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- 1. metric oracles ------------------------------------------------------


def test_criterion_1_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        n, c = int(rng.integers(1, 51)), int(rng.integers(2, 21))
        true_years = rng.integers(1930, 1930 + c, n)
        pred_years = rng.integers(1930, 1930 + c, n)
        d = int(rng.integers(0, 11))
        worst = max(worst, abs(time_distance_accuracy(pred_years, true_years, d)
                               - oracles.time_distance_accuracy(pred_years, true_years, d)))
        worst = max(worst, *np.abs(np.subtract(mean_abs_error(pred_years, true_years),
                                               oracles.mean_abs_error(pred_years, true_years))))
        # coarse scores so ties are common
        probs = rng.integers(0, 5, (n, c)).astype(float) + rng.random() * (rng.random() < 0.5)
        labels = rng.integers(0, c, n)
        k = int(rng.integers(1, c + 1))
        worst = max(worst, abs(topk_accuracy(probs, labels, k) - oracles.topk_accuracy(probs, labels, k)))
        preds = rng.integers(0, c, n)
        if not np.array_equal(confusion_matrix(preds, labels, c), oracles.confusion_matrix(preds, labels, c)):
            worst = np.inf
        votes = rng.dirichlet(np.ones(c), int(rng.integers(1, 6)))
        if aggregate_photo_vote(votes) != oracles.photo_vote(votes.tolist()):
            worst = np.inf
    took = time.perf_counter() - start
    record(1, worst <= 1e-12 and took < 60,
           f"1000 random instances, max deviation from brute force {worst:.2e} (tol 1e-12), {took:.1f}s")


# -- 2. ablation oracle -----------------------------------------------------


def _photos(rng, count, n, c):
    return [PhotoScores(f"p{i}", int(rng.integers(c)), rng.dirichlet(np.ones(c)),
                        rng.dirichlet(np.ones(c), n), rng.dirichlet(np.ones(c), n)) for i in range(count)]


def test_criterion_2_ablation_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = cells = 0
    for n in range(1, 6):
        for _ in range(4):
            photos = _photos(rng, 8, n, int(rng.integers(2, 6)))
            got = kofn_ablation(photos, n).rows
            want = oracles.kofn_ablation([(p.label, p.image.tolist(), p.faces.tolist(), p.people.tolist())
                                          for p in photos], n)
            for k, row in want.items():
                for name, value in row.items():
                    cells += 1
                    mismatches += abs(got[k][name] - value) > 1e-12
    counts = kofn_ablation(_photos(rng, 1, 8, 3), 8).subset_counts
    took = time.perf_counter() - start
    ok = mismatches == 0 and counts == [8, 28, 56, 70, 56, 28, 8, 1] and took < 120
    record(2, ok, f"{cells} (k, variant) cells for n<=5, {mismatches} mismatches; n=8 subset counts {counts}, "
                  f"{took:.1f}s")


# -- 3. fusion properties ---------------------------------------------------


def _img(g, size=16):
    return torch.rand(3, size, size, generator=g)


def test_criterion_3_fusion_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    g = torch.Generator().manual_seed(3)
    failures = []
    worst_sum = 0.0
    for case in range(200):
        c = int(rng.integers(2, 21))
        image = rng.dirichlet(np.ones(c))
        faces = rng.dirichlet(np.ones(c), int(rng.integers(0, 5)))
        people = rng.dirichlet(np.ones(c), int(rng.integers(0, 5)))
        got = ensemble_predict(image, faces, people)
        worst_sum = max(worst_sum, abs(got.sum() - 1))
        if not np.allclose(got, ensemble_predict(image, faces[::-1], people[::-1]), atol=1e-12, rtol=0):
            failures.append((case, "ensemble permutation"))
        if not np.allclose(got, oracles.ensemble(image, faces.tolist(), people.tolist()), atol=1e-12, rtol=0):
            failures.append((case, "ensemble missing-branch policy"))
        if len(faces) and not np.allclose(ensemble_predict(image, faces, people, include={"faces"}),
                                          oracles.l1(oracles.elementwise_mean(faces.tolist())), atol=1e-12):
            failures.append((case, "ensemble one-hot"))

        model = tiny_merged(num_classes=c, seed=case)
        with torch.no_grad():
            for p in (model.alpha, model.beta, model.gamma):
                p.fill_(float(rng.uniform(-1, 1)))
        photo = _img(g)
        fc = [_img(g) for _ in range(int(rng.integers(0, 4)))]
        pc = [_img(g) for _ in range(int(rng.integers(0, 4)))]
        probs = merged_forward(model, photo, fc, pc)
        worst_sum = max(worst_sum, abs(probs.sum() - 1))
        if not np.allclose(probs, merged_forward(model, photo, fc[::-1], pc[::-1]), atol=1e-6):
            failures.append((case, "merged permutation"))
        with torch.no_grad():
            one = photo.unsqueeze(0)
            f_img, _, f_people = model.branch_features(one, one, torch.tensor([0]), one, torch.tensor([0]))
            if pc:
                _, _, f_people = model.branch_features(one, one[:0], torch.tensor([], dtype=torch.long),
                                                       torch.stack(pc), torch.zeros(len(pc), dtype=torch.long))
            else:
                f_people = torch.zeros_like(f_img)
            no_faces = torch.softmax(model.fuse(f_img, torch.zeros_like(f_img), f_people), 1)[0].numpy()
        if not np.allclose(merged_forward(model, photo, [], pc), no_faces, atol=1e-6):
            failures.append((case, "merged missing-branch policy"))
        with torch.no_grad():
            model.alpha.fill_(1.0), model.beta.zero_(), model.gamma.zero_()
            image_only = torch.softmax(model.head(f_img), 1)[0].numpy()
        if not np.allclose(merged_forward(model, photo, fc, pc), image_only, atol=1e-6):
            failures.append((case, "merged one-hot"))
    took = time.perf_counter() - start
    record(3, not failures and worst_sum <= 1e-6 and took < 60,
           f"200 randomized cases, {len(failures)} property failures {failures[:3]}, "
           f"max |sum-1| {worst_sum:.1e}, {took:.1f}s")


# -- 4. gradient check ------------------------------------------------------


def test_criterion_4_fusion_gradient_check():
    start = time.perf_counter()
    worst = 0.0
    checked = 0
    for i, family in enumerate(("resnet50", "inceptionv3", "densenet121")):
        spec = BackboneSpec(family, "compact")
        bbs = []
        for j in range(3):
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(10 * i + j)
                bbs.append(ProjectedBackbone(build_backbone(spec), 8, seed=j))
        model = MergedModel(*bbs, 5, spec=spec, seed=i).double().eval()
        g = torch.Generator().manual_seed(i)
        size = spec.input_size
        images = torch.rand(2, 3, size, size, generator=g, dtype=torch.float64)
        faces = torch.rand(3, 3, size, size, generator=g, dtype=torch.float64)
        people = torch.rand(2, 3, size, size, generator=g, dtype=torch.float64)
        fo, po = torch.tensor([0, 0, 1]), torch.tensor([0, 1])
        labels = torch.tensor([1, 3])
        with torch.no_grad():
            feats = model.branch_features(images, faces, fo, people, po)
        rng = np.random.default_rng(i)
        for _ in range(3):
            with torch.no_grad():
                for p in (model.alpha, model.beta, model.gamma):
                    p.fill_(float(rng.uniform(-1.5, 1.5)))

            def loss():
                return torch.nn.functional.cross_entropy(model.fuse(*feats), labels)

            analytic = torch.autograd.grad(loss(), [model.alpha, model.beta, model.gamma])
            full = torch.autograd.grad(
                torch.nn.functional.cross_entropy(model(images, faces, fo, people, po), labels),
                [model.alpha, model.beta, model.gamma])
            for p, a, b in zip((model.alpha, model.beta, model.gamma), analytic, full):
                h = 1e-6
                with torch.no_grad():
                    p += h
                    up = loss().item()
                    p -= 2 * h
                    down = loss().item()
                    p += h
                numeric = (up - down) / (2 * h)
                rel = abs(a.item() - numeric) / max(abs(a.item()), abs(numeric), 1e-8)
                rel_full = abs(b.item() - numeric) / max(abs(b.item()), abs(numeric), 1e-8)
                worst = max(worst, rel, rel_full)
                checked += 1
    took = time.perf_counter() - start
    record(4, worst <= 1e-3 and took < 60,
           f"{checked} alpha/beta/gamma gradients over 3 compact families (float64, 8-d projections), "
           f"max relative error {worst:.2e} (tol 1e-3), {took:.1f}s")


# -- 5. split integrity -----------------------------------------------------


def test_criterion_5_split_integrity():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    leaks = fraction_errors = crops_checked = 0
    for trial in range(500):
        n = int(rng.integers(5, 200))
        ids = [f"t{trial}_{i}" for i in rng.permutation(n)]
        records = tuple(PhotoRecord(pid, f"{pid}.png", 1950, ContextClass.WORK) for pid in ids)
        split = make_splits(ids, int(rng.integers(1 << 30)))
        catalog = Catalog(records).with_splits(split)
        counts = split.counts()
        if [counts["train"], counts["val"], counts["test"]] != oracles.largest_remainder(n, SPLIT_FRACTIONS):
            fraction_errors += 1
        faces, people = [], []
        for pid in ids:
            for kind, out in (("face", faces), ("person", people)):
                for j in range(int(rng.integers(0, 4))):
                    box = DetectionBox(float(10 * j), 0.0, 5.0, 5.0, 0.9, kind)
                    out.append(RegionCrop(f"{pid}__{kind}{j:02d}", pid, kind, box, (0, 0, 5, 5), 1,
                                          f"crops/{pid}_{kind}{j}.png"))
        view = DataView(catalog, RegionDatasets(faces, people), "context")
        view.check_leakage(split)
        for c in faces + people:
            crops_checked += 1
            leaks += derive_region_split(split, c) != split[c.parent_id]
        for branch in ("faces", "people"):
            seen = {}
            for name in ("train", "val", "test"):
                samples = view.branch_samples(branch, name)
                BranchDataset(samples, name, 64)  # raises LeakageError on any mixed split
                for s in samples:
                    leaks += split[s.group] != name
                    seen[s.source] = name
            leaks += len(seen) != len(faces if branch == "faces" else people)
    took = time.perf_counter() - start
    record(5, leaks == 0 and fraction_errors == 0 and took < 60,
           f"500 random catalogs, {crops_checked} crops, {leaks} crops outside their parent's split, "
           f"{fraction_errors} catalogs off the 72/8/20 largest-remainder counts, {took:.1f}s")


# -- 6 and 7. end-to-end synthetic learning and report audits ---------------

E2E = {
    "train": {"epochs": 15},
    "evaluation": {"ablation_n": 2},
    "explain": {"count": 2},
}


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    manifest = generate(root / "album", SyntheticConfig(n_photos=1200, seed=0))
    config = root / "config.json"
    config.write_text(json.dumps({**E2E, "manifest": str(manifest)}))
    code = main(["run", "--run-dir", str(root / "run"), "--config", str(config)])
    return root / "run", code, time.perf_counter() - start


def _reports(run_dir: Path) -> dict:
    return {p.stem: json.loads(p.read_text()) for p in sorted((run_dir / "evaluate" / "reports").glob("*.json"))}


@pytest.mark.slow
def test_criterion_6_end_to_end_synthetic(e2e_run):
    run_dir, code, took = e2e_run
    assert code == 0
    reports = _reports(run_dir)
    acc = {name: r["accuracy_at"]["0"] for name, r in reports.items()}
    years = len(SyntheticConfig().years)
    chance = 1 / years
    best_name = max(("image", "faces", "people"), key=acc.get)
    image_ok = acc["image"] >= 5 * chance
    merged_ok = acc["merged"] >= acc[best_name] - 0.02
    detail = (f"d=0 accuracy image {acc['image']:.3f} (>= 5x chance = {5 * chance:.2f} over {years} years), "
              f"faces {acc['faces']:.3f}, people {acc['people']:.3f}, ensemble {acc['ensemble']:.3f}, "
              f"merged {acc['merged']:.3f} (>= best single {best_name} {acc[best_name]:.3f} - 0.02), "
              f"{took / 60:.1f} min")
    record(6, image_ok and merged_ok and took <= 15 * 60, detail)


def _independent_audit(r: dict) -> list[str]:
    problems = []
    at = [r["accuracy_at"][str(d)] for d in (0, 5, 10)] if r["accuracy_at"] else []
    if any(b < a for a, b in zip(at, at[1:])):
        problems.append(f"{r['model_id']}: accuracy_at not monotone {at}")
    tk = [r["topk"][str(k)] for k in range(1, 6)]
    if any(b < a for a, b in zip(tk, tk[1:])):
        problems.append(f"{r['model_id']}: top-k not monotone {tk}")
    m = np.asarray(r["confusion"])
    exact = at[0] if at else r["exact_accuracy"]
    if abs(np.trace(m) / m.sum() - exact) > 1e-9:
        problems.append(f"{r['model_id']}: trace/total {np.trace(m) / m.sum()} vs d=0 {exact}")
    return problems


@pytest.mark.slow
def test_criterion_7_report_audits(e2e_run, repro_runs):
    runs = [e2e_run[0], *repro_runs]
    problems, audited = [], 0
    for run_dir in runs:
        for r in _reports(run_dir).values():
            audited += 1
            problems += _independent_audit(r)
        for r in json.loads((run_dir / "report" / "report.json").read_text())["models"].values():
            audited += 1
            problems += _independent_audit(r)
    record(7, audited > 0 and not problems,
           f"{audited} reports from {len(runs)} runs audited (monotone in d and k, trace/total = d=0 to 1e-9); "
           f"problems: {problems[:3] or 'none'}")


# -- 8. Grad-CAM localization -----------------------------------------------


def test_criterion_8_gradcam_localization():
    start = time.perf_counter()
    masses = []
    for q in range(4):
        x = torch.full((3, 64, 64), 0.2)
        r, c = (0 if q < 2 else 32), (0 if q % 2 == 0 else 32)
        x[:, r:r + 32, c:c + 32] = 0.9
        masses.append(quadrant_mass(gradcam(quadrant_model(q), x, target_class=q).values, q))
    took = time.perf_counter() - start
    record(8, min(masses) >= 0.7 and took < 60,
           f"heatmap mass in the decisive quadrant {[round(m, 3) for m in masses]} (>= 0.70), {took:.1f}s")


# -- 9. reproducibility -----------------------------------------------------

REPRO = {
    "train": {"epochs": 2, "batch_size": 16},
    "branch_train": {"merged": {"epochs": 10, "patience": 10}},
    "evaluation": {"ablation_n": 1},
    "explain": {"count": 1},
}


@pytest.fixture(scope="module")
def repro_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("repro")
    manifest = generate(root / "album", SyntheticConfig(n_photos=150, seed=9))
    config = root / "config.json"
    config.write_text(json.dumps({**REPRO, "manifest": str(manifest), "seed": 4}))
    runs = []
    for name in ("a", "b"):
        assert main(["run", "--run-dir", str(root / name), "--config", str(config)]) == 0
        runs.append(root / name)
    return runs


def test_criterion_9_reproducibility(repro_runs):
    a, b = repro_runs
    compared = ["split/split.json", "report/report.json", "report/report.md", "evaluate/scores.json",
                "ablate/ablation.json"]
    compared += [str(p.relative_to(a)) for p in sorted((a / "evaluate" / "reports").glob("*.json"))]
    differ = [f for f in compared if (a / f).read_bytes() != (b / f).read_bytes()]
    record(9, not differ, f"two CLI runs (seed 4, 150 photos): {len(compared)} files byte-compared, "
                          f"differing: {differ or 'none'}")
