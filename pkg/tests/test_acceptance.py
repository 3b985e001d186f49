"""Acceptance criteria. Each test prints one PASS/FAIL line."""
from __future__ import annotations

import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

from countmatch.cli import main
from countmatch.core.coco import load_detections, load_ground_truth
from countmatch.core.types import BoundingBox, Detection
from countmatch.matcher import MatchingProblem, brute_force_matching, solve_matching, validate_assignment
from countmatch.metrics import counting_tally, detection_mf1, evaluate, sweep_thresholds
from countmatch.pipeline.prompts import build_count_prompt, preset
from countmatch.similarity import FileEmbeddingProvider, match_generated_categories, write_embedding_file


@pytest.fixture
def report(capsys):
    def emit(name: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail

    return emit


def random_problems(count=1000, seed=20240611):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 4))
        yield MatchingProblem(rng.uniform(-1, 1, (n, m)), rng.integers(0, n + 1, m))


def test_matcher_oracle_equivalence(report):
    mismatches, invalid = 0, 0
    start = time.perf_counter()
    for p in random_problems():
        got, want = solve_matching(p), brute_force_matching(p)
        mismatches += abs(got.objective - want.objective) > 1e-9
        invalid += bool(validate_assignment(p, got)) + bool(validate_assignment(p, want))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and invalid == 0 and elapsed < 30.0
    report("matcher oracle equivalence", ok, f"1000 problems, {mismatches} objective mismatches, {invalid} invalid, {elapsed:.2f} s")


def test_regime_law(report):
    violations = 0
    for p in random_problems():
        a = solve_matching(p)
        total = sum(p.counts)
        violations += len(a.pairs) != (total if p.n_masks >= total else p.n_masks)
    report("regime law", violations == 0, f"{violations} violations over 1000 problems")


def test_matching_scalability(report):
    rng = np.random.default_rng(3)
    details, ok = [], True
    for counts in (rng.integers(1, 100, 20), np.full(20, 100)):
        p = MatchingProblem(rng.uniform(-1, 1, (2000, 20)), counts)
        start = time.perf_counter()
        a = solve_matching(p)
        elapsed = time.perf_counter() - start
        ok &= elapsed < 1.0 and not validate_assignment(p, a)
        details.append(f"sum={sum(p.counts)} in {elapsed:.3f} s")
    report("matching scalability", ok, "N=2000 M=20: " + ", ".join(details))


def test_counting_identities(report):
    rng = np.random.default_rng(11)
    bad = 0
    for g, c in rng.integers(0, 1000, (10_000, 2)):
        g, c = int(g), int(c)
        t, s = counting_tally(g, c), counting_tally(c, g)
        bad += not (t.tp == min(g, c) and t.tp + t.fp == c and t.tp + t.fn == g)
        bad += not (t.precision == s.recall and t.recall == s.precision)
    report("counting identities", bad == 0, f"{bad} violations over 10000 pairs")


def perturb(instances):
    """Per class: drop the first instance, duplicate the last one (different images)."""
    out = list(instances)
    for cls in dict.fromkeys(d.category for d in instances):
        members = [d for d in out if d.category == cls]
        dropped, dup = members[0], members[-1]
        assert dropped.image_id != dup.image_id
        out.remove(dropped)
        out.append(dup)
    return out


def test_evaluation_golden_fixture(report, golden):
    gt = load_ground_truth(golden / "gt.json")
    problems = []
    for preds in (gt.instances, load_detections(golden / "expected" / "detections.json", gt)):
        s = evaluate(preds, gt).summary()
        for key in ("cnt_f1", "box_f1", "mask_f1", "box_ap_nc", "mask_ap_nc"):
            if s[key] != 1.0:
                problems.append(f"{key}={s[key]}")

    # class totals are airplane 3, ship 4, storage_tank 2, vehicle 5; each loses one TP,
    # gains one FP and one FN, so P = R = F1 = (n - 1) / n
    want = {"airplane": 2 / 3, "ship": 3 / 4, "storage_tank": 1 / 2, "vehicle": 4 / 5}
    rep = evaluate(perturb(gt.instances), gt)
    for result in (rep.counting, rep.box, rep.mask):
        for cls, v in want.items():
            sc = result.per_class[cls]
            if (sc.precision, sc.recall, sc.f1) != (v, v, v):
                problems.append(f"{cls}: {sc}")
        if result.mean_f1 != math.fsum(want.values()) / 4:
            problems.append(f"mean f1 {result.mean_f1}")
    report("evaluation golden fixture", not problems, "; ".join(problems) or "perfect = 1.0, perturbed = (n-1)/n per class")


def sweep_fixture():
    rng = np.random.default_rng(5)
    gts, preds = [], []
    for img in range(4):
        for k in range(3):
            cls = "ab"[(img + k) % 2]
            b = BoundingBox(20 * k, 0, 20 * k + 10, 10)
            gts.append(Detection(str(img), cls, b))
            preds.append(Detection(str(img), cls, b, score=float(rng.uniform(0.9, 1.0))))
            noise = BoundingBox(20 * k, 30, 20 * k + 10, 40)
            preds.append(Detection(str(img), cls, noise, score=float(rng.uniform(0.0, 0.3 - 1e-9))))
    return preds, gts


def test_threshold_sweep(report):
    preds, gts = sweep_fixture()
    res = sweep_thresholds(preds, gts, ["a", "b"], step=0.02)
    ones = [t for t, v in res.curve if v == 1.0 and 0.30 <= t <= 0.90]
    mismatched = []
    for t, v in res.curve:
        kept = [p for p in preds if p.score >= t]
        if detection_mf1(kept, gts, ["a", "b"]).mean_f1 != v:
            mismatched.append(t)
    ok = len(res.curve) == 51 and res.best_mf1 == 1.0 and bool(ones) and not mismatched
    report("threshold sweep", ok, f"{len(res.curve)} points, best {res.best_mf1} at {res.best_threshold}, "
           f"{len(ones)} thresholds in [0.30, 0.90] at 1.0, {len(mismatched)} curve mismatches")


def test_semantic_matching(report, tmp_path):
    s97 = math.sqrt(1 - 0.97**2)
    vecs = {
        "car": [0.97, 0, 0, s97],
        "boat": [0, 0.85, 0, math.sqrt(1 - 0.85**2)],
        "pier": [0.3, 0.3, 0.5, math.sqrt(1 - 0.43)],
        "vehicle": [1, 0, 0, 0],
        "ship": [0, 1, 0, 0],
        "harbor": [0, 0, 1, 0],
    }
    write_embedding_file(tmp_path, [f"a satellite image of a {k}" for k in vecs], np.array(list(vecs.values())))
    provider = FileEmbeddingProvider(tmp_path)
    gen, gt = ["car", "boat", "pier"], ["vehicle", "ship", "harbor"]
    base = match_generated_categories(gen, gt, provider)
    raised = match_generated_categories(gen, gt, provider, threshold=0.975)
    mapped = {k: v for k, v in base.entries.items() if v is not None}
    ok = mapped == {"car": "vehicle"} and all(v is None for v in raised.entries.values())
    report("semantic matching", ok, f"default maps {mapped}, threshold 0.975 maps "
           f"{ {k: v for k, v in raised.entries.items() if v} }")


def pipeline_outputs(golden: Path, out: Path, workers: int) -> dict[str, bytes]:
    manifest = str(golden / "manifest.json")
    codes = [
        main(["count", "--manifest", manifest, "--replay", str(golden / "audit"), "--workers", str(workers),
              "--out", str(out / "count"), "--log-level", "WARNING"]),
        main(["match", "--manifest", manifest, "--counts", str(out / "count" / "counts"), "--workers", str(workers),
              "--out", str(out / "match"), "--log-level", "WARNING"]),
        main(["eval", "--detections", str(out / "match" / "detections.json"), "--ground-truth",
              str(golden / "gt.json"), "--out", str(out / "eval"), "--log-level", "WARNING"]),
    ]
    assert codes == [0, 0, 0], codes
    files = sorted((out / "count" / "counts").glob("*.json")) + [
        out / "match" / "detections.json",
        out / "eval" / "report.json",
        out / "eval" / "report.csv",
    ]
    return {str(p.relative_to(out)): p.read_bytes() for p in files}


def test_end_to_end_replay_determinism(report, golden, tmp_path):
    runs = [pipeline_outputs(golden, tmp_path / f"w{w}_{k}", w) for w in (1, 4) for k in range(3)]
    same = all(r == runs[0] for r in runs[1:])
    golden_ok = runs[0]["match/detections.json"] == (golden / "expected" / "detections.json").read_bytes()
    report("end-to-end replay determinism", same and golden_ok,
           f"6 runs (workers 1 and 4), {len(runs[0])} files each, identical={same}, matches golden={golden_ok}")


NWPU_PERSONA = "You are an advanced AI model capable of understanding and analyzing aerial images."
NWPU_TASK = (
    "Given an input satellite imagery, count the number of objects from specific categories. "
    "Provide the results in JSON format where the keys are the category names and the values are "
    "the corresponding counts."
)
NWPU_INSTRUCTIONS = [
    "The 10 categories in the dataset are: ['airplane', 'ship', 'storage_tank', 'baseball_field', "
    "'tennis_court', 'basketball_court', 'track_field', 'harbor', 'bridge', 'vehicle']",
    "The spatial resolution of the imagery in the dataset ranges from 0.08 m to 2 m.",
    "Do not count ships or vehicles that are hard to annotate in the relatively low-resolution images "
    "as they are not annotated due to the small size.",
    "Harbor is defined as a pier to dock ships. If multiple harbors are visible in the image, count each "
    "distinct pier separately.",
]


def squash(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


@pytest.mark.parametrize("fmt", ["json", "markdown"])
def test_prompt_fidelity(report, fmt):
    text = squash(build_count_prompt(preset("nwpu", "open-vocabulary", fmt=fmt)))
    missing = [s[:40] for s in [NWPU_PERSONA, NWPU_TASK, *NWPU_INSTRUCTIONS] if squash(s) not in text]
    report(f"prompt fidelity ({fmt})", not missing, f"{len(missing)} missing fields {missing}")
