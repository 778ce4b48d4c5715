"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
C8 (throughput) is soft: a miss raises a warning instead of failing.
"""

import math
import os
import time
import warnings

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE, make_subject, random_dataset
from memdex import cli
from memdex.binarize import apply_thresholds, fit_thresholds, midpoint
from memdex.deep import MU_MODES, DeepScoreConfig, DeepTraining, deep_log_likelihood
from memdex.evaluation import (
    ScoringConfig,
    all_pairs_scores,
    alpha_sweep,
    independence_diagnostic,
    roc_auc,
)
from memdex.index import build_index
from memdex.model import Dataset, DeepVector
from memdex.shallow import ShallowScoreConfig, batch_shallow_scores, keypoint_log_likelihood
from memdex.synth import SynthConfig, generate_synthetic

SEEDS = range(10)


def report(key: str, ok: bool, detail: str, soft: bool = False) -> None:
    status = "PASS" if ok else ("FLAGGED" if soft else "FAIL")
    line = f"{key} {status}: {detail}"
    ACCEPTANCE[key] = line
    print(line)


def _rel(got, want):
    return abs(got - want) / max(abs(want), 1e-300)


# -- C1 ---------------------------------------------------------------------

def _with_shared_descriptors(ds):
    """Copy subject 0's descriptors into every other subject, creating exact distance ties."""
    base = ds.subjects[0].keypoints.descriptors
    subs = [ds.subjects[0]]
    for s in ds.subjects[1:]:
        desc = s.keypoints.descriptors.copy()
        n = min(len(desc), len(base))
        desc[: n // 2] = base[: n // 2]
        subs.append(make_subject(s.subject_id, s.instance_label, s.group_label, desc))
    return Dataset(tuple(subs), ds.d_kp)


def test_c1_keypoint_kde_matches_bruteforce():
    rng = np.random.default_rng(101)
    cfg = ShallowScoreConfig(k_trunc=None, dnn_mode="exact")
    t0 = time.perf_counter()
    worst = 0.0
    n_inst = 60
    for i in range(n_inst):
        d = (4, 8, 64)[i % 3]
        ds = random_dataset(rng, int(rng.integers(2, 21)), int(rng.integers(1, 101)), d,
                            n_classes=int(rng.integers(1, 5)), scale=float(rng.uniform(0.3, 3)))
        if i % 4 == 0:
            ds = _with_shared_descriptors(ds)
        idx = build_index(ds, "keypoints", "exact")
        desc = np.vstack([s.keypoints.descriptors for s in ds])
        cls = [s.instance_label for s in ds for _ in range(len(s.keypoints))]
        sid = [s.subject_id for s in ds for _ in range(len(s.keypoints))]
        if i % 2:
            q_sub = ds.subjects[int(rng.integers(len(ds)))]
            query, exclude = q_sub.keypoints.descriptors, q_sub.subject_id
        else:
            query = rng.normal(size=(int(rng.integers(1, 101)), d))
            exclude = None
        for target in sorted(set(cls)):
            got = keypoint_log_likelihood(query, idx, target, cfg, query_subject=exclude)
            want = oracles.shallow_score_dense(query, desc, cls, sid, target, exclude)
            if want == 0.0:
                assert got == 0.0
                continue
            worst = max(worst, _rel(got, want))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 60
    report("C1", ok, f"{n_inst} instances, max rel err {worst:.2e} (tol 1e-9), "
                     f"{elapsed:.1f} s (limit 60 s)")
    assert ok


# -- C2 ---------------------------------------------------------------------

def test_c2_deep_kde_matches_bruteforce():
    rng = np.random.default_rng(202)
    worst = {"real": 0.0, "binarized": 0.0}
    n_inst = 60
    for i in range(n_inst):
        d = (4, 8, 64)[i % 3]
        n = int(rng.integers(2, 41))
        vals = rng.normal(size=(n, d)) * rng.uniform(0.2, 5)
        labels = [f"c{j}" for j in rng.integers(0, int(rng.integers(1, 5)), n)]
        ids = [f"T{j}" for j in range(n)]
        q_real = rng.normal(size=d) * rng.uniform(0.2, 5)
        exclude = ids[int(rng.integers(n))] if i % 2 else None
        table = fit_thresholds(vals, labels)
        variants = {
            "real": ([DeepVector(v) for v in vals], DeepVector(q_real)),
            "binarized": ([apply_thresholds(DeepVector(v), table) for v in vals],
                          apply_thresholds(DeepVector(q_real), table)),
        }
        for kind, (vecs, q) in variants.items():
            tr = DeepTraining(vecs, ids, {"instance": labels})
            train = [(v.values, c, s) for v, c, s in zip(vecs, labels, ids)]
            for mu_mode in MU_MODES:
                cfg = DeepScoreConfig(mu_mode=mu_mode)
                for target in sorted(set(labels)):
                    got = deep_log_likelihood(q, tr, target, cfg, query_subject=exclude)
                    want = oracles.deep_score(q.values, train, target, mu_mode, exclude)
                    if want == 0.0:
                        assert got == 0.0
                        continue
                    worst[kind] = max(worst[kind], _rel(got, want))
    ok = max(worst.values()) <= 1e-12
    report("C2", ok, f"{n_inst} instances x both mu modes, max rel err real "
                     f"{worst['real']:.2e}, binarized {worst['binarized']:.2e} (tol 1e-12)")
    assert ok


# -- C3 ---------------------------------------------------------------------

def _random_element(rng):
    n = int(rng.integers(2, 257))
    n_classes = int(rng.integers(1, 6))
    kind = rng.integers(0, 4)
    if kind == 0:
        x = rng.normal(size=n)
    elif kind == 1:
        x = rng.integers(0, 6, n).astype(float)       # heavy ties
    elif kind == 2:
        x = np.full(n, float(rng.normal()))            # constant
    else:
        x = np.round(rng.exponential(size=n), 1)
    y = [f"k{c}" for c in rng.integers(0, n_classes, n)]
    return x, y


def test_c3_mi_threshold_matches_exhaustive_scan():
    rng = np.random.default_rng(303)
    n_el = 150
    tau_bad = 0
    gain_err = 0.0
    for _ in range(n_el):
        x, y = _random_element(rng)
        table = fit_thresholds(x[:, None], y)
        tau, gain, degenerate = oracles.mi_scan(x.tolist(), y)
        tau_bad += table.taus[0] != tau or bool(table.degenerate_mask[0]) != degenerate
        gain_err = max(gain_err, abs(table.gains[0] - gain))

    sparse_bad = 0
    for n in range(2, 40):
        x = rng.normal(size=n)
        table = fit_thresholds(x[:, None], [f"only{i}" for i in range(n)])
        xs = np.sort(x)
        left = n // 2
        want_tau = midpoint(xs[left - 1], xs[left])
        want_gain = oracles.entropy([left, n - left])
        sparse_bad += table.taus[0] != want_tau or abs(table.gains[0] - want_gain) > 1e-12
    ok = tau_bad == 0 and gain_err <= 1e-12 and sparse_bad == 0
    report("C3", ok, f"{n_el} elements, tau mismatches {tau_bad}, max gain err "
                     f"{gain_err:.2e} (tol 1e-12), sparse median-split misses {sparse_bad}/38")
    assert ok


# -- C4 ---------------------------------------------------------------------

def test_c4_auc_equals_mann_whitney():
    rng = np.random.default_rng(404)
    n_sets = 150
    worst = 0.0
    for i in range(n_sets):
        n = int(rng.integers(2, 1001))
        labels = rng.random(n) < rng.uniform(0.05, 0.95)
        labels[0], labels[1] = True, False
        levels = int(rng.integers(1, max(2, n // 2)))
        scores = rng.integers(0, levels, n) + (labels * rng.uniform(0, 2))
        scores = np.round(scores, 1)                   # plenty of ties
        got = roc_auc(scores, labels).auc
        want = oracles.mann_whitney_dense(scores, labels)
        if n <= 200:
            assert want == pytest.approx(oracles.mann_whitney_auc(scores, labels), abs=1e-15)
        worst = max(worst, abs(got - want))
    ok = worst <= 1e-12
    report("C4", ok, f"{n_sets} label/score sets, max |auc - mann-whitney| {worst:.2e} "
                     f"(tol 1e-12)")
    assert ok


# -- C5 / C6 ----------------------------------------------------------------

def _family_scores(seed, comp):
    ds = generate_synthetic(SynthConfig(seed=seed, modality_complementarity=comp))
    return ds, all_pairs_scores(ds, ScoringConfig(threads=1))


@pytest.fixture(scope="module")
def complementary_runs():
    return {seed: _family_scores(seed, 0.5) for seed in SEEDS}


@pytest.mark.slow
def test_c5_interior_alpha_beats_endpoints(complementary_runs):
    wins, floor_ok, margins = 0, True, []
    for seed, (ds, sm) in complementary_runs.items():
        sweep = alpha_sweep(ds, sm=sm, grid_step=0.1)
        ends = max(sweep.auc_at(0.0), sweep.auc_at(1.0))
        inner = max(auc for a, auc in sweep.points if 0.0 < a < 1.0)
        floor_ok &= inner >= ends
        wins += inner - ends >= 0.01
        margins.append(inner - ends)
    ok = floor_ok and wins >= 8
    report("C5", ok, f"complementarity 0.5, interior >= endpoints on every seed: {floor_ok}, "
                     f"wins by >= 0.01 on {wins}/10 (need 8), "
                     f"min margin {min(margins):.4f}")
    assert ok


@pytest.mark.slow
def test_c6_independent_modalities_low_correlation(complementary_runs):
    rs = [independence_diagnostic(_family_scores(seed, 1.0)[1]) for seed in SEEDS]
    mean_abs = float(np.mean(np.abs(rs)))
    info = np.mean([independence_diagnostic(sm) for _, sm in complementary_runs.values()])
    ok = mean_abs <= 0.1
    report("C6", ok, f"complementarity 1.0, mean |r| over 10 seeds {mean_abs:.4f} "
                     f"(limit 0.1); for reference mean r at complementarity 0.5 is {info:.3f}")
    assert ok


# -- C7 ---------------------------------------------------------------------

@pytest.mark.slow
def test_c7_approximate_recall():
    ds = generate_synthetic(SynthConfig(n_families=250, keypoints_per_subject=200, seed=0))
    exact = build_index(ds, "keypoints", "exact")
    approx = build_index(ds, "keypoints", "approximate")
    assert approx.size == 100_000 and approx.dim == 64
    rng = np.random.default_rng(707)
    pick = rng.choice(approx.size, 1000, replace=False)
    queries, exclude = approx.points[pick], approx.owner[pick]
    t0 = time.perf_counter()
    got, _ = approx.search(queries, 1, exclude)
    per_query = (time.perf_counter() - t0) / len(pick)
    want, _ = exact.search(queries, 1, exclude)
    recall = float(np.mean(got[:, 0] == want[:, 0]))
    ok = recall >= 0.95
    report("C7", ok, f"recall@1 {recall:.3f} on 100k x 64 descriptors, 1000 queries "
                     f"(need 0.95), {1e3 * per_query:.2f} ms/query")
    assert ok


# -- C8 (soft) --------------------------------------------------------------

@pytest.mark.slow
def test_c8_throughput_soft():
    ds = generate_synthetic(SynthConfig(n_families=500, keypoints_per_subject=1000, seed=0))
    idx = build_index(ds, "keypoints", "approximate")
    # the query comes from an unrelated corpus, so every indexed subject is a candidate
    query = generate_synthetic(SynthConfig(n_families=1, members_per_family=1,
                                           keypoints_per_subject=500, seed=99)).subjects[0]
    candidates = ds.subject_ids
    cfg = ShallowScoreConfig()

    def run(threads):
        t0 = time.perf_counter()
        scores = batch_shallow_scores(query.keypoints, idx, candidates, cfg, "subject",
                                      threads=threads)
        return time.perf_counter() - t0, scores

    t1, s1 = run(1)
    t8, s8 = run(8)
    assert s1 == s8                                    # worker count never changes results
    speedup = t1 / t8
    ok_time, ok_speed = t1 <= 2.0, speedup >= 3.0
    detail = (f"500 keypoints vs {len(candidates)} candidates over {idx.size} points: "
              f"{t1:.2f} s single-threaded (target 2 s), speedup at 8 workers "
              f"{speedup:.2f}x (target 3x, {os.cpu_count()} CPU available)")
    report("C8", ok_time and ok_speed, detail, soft=True)
    if not (ok_time and ok_speed):
        warnings.warn(f"throughput target missed: {detail}", stacklevel=1)


# -- C9 ---------------------------------------------------------------------

def _pipeline(root, threads, monkeypatch):
    monkeypatch.setenv("MEMDEX_THREADS", str(threads))
    run = root / f"t{threads}"
    steps = [
        ["synth", "--out", str(run / "data"), "--seed", "9", "--families", "8",
         "--members", "2-3", "--keypoints", "40", "--d-kp", "16", "--d-dv", "24",
         "--complementarity", "0.5"],
        ["index", "--manifest", str(run / "data" / "manifest.csv"), "--out",
         str(run / "kp.idx"), "--trees", "4", "--leaf-size", "8", "--checks", "64"],
        ["score", "--manifest", str(run / "data" / "manifest.csv"), "--out",
         str(run / "scores.csv"), "--index", str(run / "kp.idx"), "--threads", str(threads)],
        ["eval", "--scores", str(run / "scores.csv"), "--manifest",
         str(run / "data" / "manifest.csv"), "--out", str(run / "roc.csv")],
    ]
    for argv in steps:
        assert cli.main(argv, out=open(os.devnull, "w")) == 0, argv
    return (run / "scores.csv").read_bytes(), (run / "roc.csv").read_bytes()


def test_c9_pipeline_is_deterministic(tmp_path, monkeypatch):
    a = _pipeline(tmp_path, 1, monkeypatch)
    b = _pipeline(tmp_path, 4, monkeypatch)
    ok = a == b
    report("C9", ok, f"synth -> index -> score -> eval at 1 and 4 workers: score files "
                     f"identical {a[0] == b[0]}, ROC files identical {a[1] == b[1]}")
    assert ok
