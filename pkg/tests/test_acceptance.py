"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary. Run alone with
``python3 -m pytest tests/test_acceptance.py -v``.
"""

import json
import math
import time

import numpy as np
import pytest

from ioh_tta import bank as bank_io
from ioh_tta import experiment as X
from ioh_tta import forecaster as fc
from ioh_tta import kshape, synth
from ioh_tta.cli import main
from ioh_tta.config import ExperimentConfig, save_config
from ioh_tta.detection import DetectorConfig, detect
from ioh_tta.errors import FormatError
from ioh_tta.evaluation import classification_metrics, regression_metrics
from ioh_tta.retrieval import Hit, sample_balance
from ioh_tta.series import Sample, WindowSpec, read_cohort
from ioh_tta.shape import dtw_distance, sbd
from ioh_tta.tta import STRATEGIES, TtaConfig, run_patient

from conftest import record_acceptance
from oracles import algorithm1, dtw_enumerate, rand_index, shape_classes


def test_c01_dtw_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        n, m = (int(v) for v in rng.integers(1, 13, 2))
        a, b = rng.normal(0, 10, n), rng.normal(0, 10, m)
        mismatches += dtw_distance(a, b) != dtw_enumerate(a, b, -1)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 60
    record_acceptance(1, ok, f"DTW vs path enumeration: {mismatches} mismatches / 200, {secs:.1f} s")
    assert ok


def test_c02_sbd_properties():
    rng = np.random.default_rng(7)
    worst_self = worst_affine = 0.0
    for _ in range(100):
        x = rng.normal(size=int(rng.integers(2, 64)))
        alpha, beta = rng.uniform(0.01, 100), rng.uniform(-100, 100)
        worst_self = max(worst_self, sbd(x, x))
        worst_affine = max(worst_affine, sbd(x, alpha * x + beta))
    lo, hi = math.inf, -math.inf
    for _ in range(1000):
        n = int(rng.integers(1, 64))
        d = sbd(rng.normal(size=n), rng.normal(size=n))
        lo, hi = min(lo, d), max(hi, d)
    ok = worst_self <= 1e-9 and worst_affine <= 1e-6 and lo >= 0 and hi <= 2
    record_acceptance(2, ok, f"SBD self {worst_self:.1e}, affine {worst_affine:.1e}, "
                             f"range [{lo:.3f}, {hi:.3f}]")
    assert ok


def test_c03_kshape_recovery():
    scores, monotone = [], True
    for seed in range(5):
        X_, y = shape_classes(20, 40, np.random.default_rng(seed))
        m = kshape.fit(X_, 3, seed=seed)
        scores.append(float(rand_index(m.assignments, y)))
        monotone &= bool(np.all(np.diff(m.cost_history) <= 1e-6))
    good = sum(s >= 0.9 for s in scores)
    ok = good >= 4 and monotone
    record_acceptance(3, ok, f"K-Shape Rand index {[round(s, 3) for s in scores]} "
                             f"({good}/5 >= 0.9), cost monotone: {monotone}")
    assert ok


def test_c04_gradients():
    rng = np.random.default_rng(99)
    worst = 0.0
    for draw in range(10):
        p = fc.init_params(12, 3, 4, hidden_dim=16, n_hidden=1, seed=draw,
                           scale_floor=float(rng.choice([0.0, 3.0])))
        p.blocks["ln_gain"] += rng.normal(0, 0.2, 16)
        p.blocks["ln_bias"] += rng.normal(0, 0.2, 16)
        X_ = rng.normal(80, 10, size=(8, 12, 3))
        Y = rng.normal(75, 10, size=(8, 4))
        masks = fc.make_masks(fc.MaskSpec(seed=draw), 8, 12, 3, 4)
        _, g = fc.grad_batch(p, X_, Y, masks)
        names = p.names()
        for _ in range(100):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(s)) for s in p.blocks[name].shape)
            q = p.copy()
            q.blocks[name][idx] += 1e-5
            up = fc.batch_loss(q, X_, Y, masks)
            q.blocks[name][idx] -= 2e-5
            down = fc.batch_loss(q, X_, Y, masks)
            num = (up - down) / 2e-5
            rel = abs(num - g[name][idx]) / max(abs(num), abs(g[name][idx]), 1e-6)
            worst = max(worst, rel)
    ok = worst < 1e-4
    record_acceptance(4, ok, f"finite differences, 1000 coordinates, worst relative error {worst:.2e}")
    assert ok


def test_c05_partial_update():
    rng = np.random.default_rng(5)
    violations = 0
    for trial in range(10):
        flags = rng.random(5) < 0.5
        if not flags.any():
            flags[0] = True
        mask = fc.UpdateMask(*map(bool, flags))
        p0 = fc.init_params(12, 3, 4, hidden_dim=16, seed=trial)
        p = p0
        X_ = rng.normal(80, 10, size=(6, 12, 3))
        Y = rng.normal(75, 10, size=(6, 4))
        for s in range(int(rng.integers(1, 60))):
            masks = fc.make_masks(fc.MaskSpec(seed=s), 6, 12, 3, 4)
            _, g = fc.grad_batch(p, X_, Y, masks, update=mask)
            p = fc.sgd_step(p, g, 1e-2, mask)
        for k in p0.names():
            if not mask.allows(k) and p.blocks[k].tobytes() != p0.blocks[k].tobytes():
                violations += 1
    # and through the streaming loop with the default mask (hidden layer frozen)
    cohort = synth.generate(synth.CohortSpec(n_patients=4, duration_steps=120, lookback_steps=12,
                                             horizon_steps=4, seed=8))
    bank = bank_io.build_bank(cohort, WindowSpec(12, 4, 4), 2, 2, seed=0, max_iters=10)
    p0 = fc.init_params(12, 3, 4, hidden_dim=16, seed=1)
    run = run_patient(cohort[0], p0, bank, TtaConfig(lr=1e-2), WindowSpec(12, 4, 4))
    adapted = sum(i.adapted for i in run.infos)
    for k in p0.names():
        frozen = not TtaConfig().update.allows(k)
        if frozen and run.final_params.blocks[k].tobytes() != p0.blocks[k].tobytes():
            violations += 1
    ok = violations == 0 and adapted > 0
    record_acceptance(5, ok, f"masked blocks bit-identical: {violations} violations "
                             f"(10 random masks + {adapted} streaming adaptations)")
    assert ok


def test_c06_algorithm1():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        w = int(rng.integers(1, min(n, 30) + 1))
        seq = rng.uniform(35, 110, n)
        cfg = DetectorConfig(window_size=w)
        rep = detect(seq, cfg)
        ref = algorithm1(list(seq), w, 65.0, 0.5, 1.0, 0.0, 0.5, 1.0, 0.5)
        worst = max(worst, abs(rep.p_final - ref[0]), abs(rep.p_hard - ref[1]),
                    abs(rep.p_soft - ref[2]))
    # hand-derived examples
    h1 = detect(np.full(10, 120.0), DetectorConfig()).p_final
    r40 = 1 / (1 + math.exp(-25))
    h2 = detect(np.full(4, 40.0), DetectorConfig(window_size=4))
    r_mix = (1 / (1 + math.exp(-5)) + 1 / (1 + math.exp(1))) / 2
    h3 = detect([60.0, 66.0, 60.0, 66.0, 60.0], DetectorConfig(window_size=2))
    hand = max(abs(h1 - 0.0), abs(h2.p_final - (1 - math.exp(-r40))),
               abs(h3.p_final - (1 - math.exp(-0.5 * 4 * r_mix))))
    branches = h2.p_final == h2.p_hard and h3.p_hard == 0.0 and h3.p_final == h3.p_soft
    ok = worst <= 1e-12 and hand <= 1e-9 and branches
    record_acceptance(6, ok, f"detector oracle worst diff {worst:.1e} on 1000 sequences; "
                             f"hand examples worst diff {hand:.1e}")
    assert ok


def test_c07_metrics():
    pred = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    truth = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0]
    m = classification_metrics(pred, truth)
    conf = (m["tp"], m["fp"], m["fn"], m["tn"]) == (2, 1, 1, 6)
    exact = (m["precision"] == 2 / 3 and m["recall"] == 2 / 3 and m["f1"] == 2 / 3
             and m["accuracy"] == 0.8)
    t = np.arange(40.0).reshape(8, 5) + 60
    shifts = (regression_metrics(t, t) == (0.0, 0.0)
              and regression_metrics(t + 2, t) == (2.0, 4.0)
              and regression_metrics(t - 2, t) == (2.0, 4.0))
    ok = conf and exact and shifts
    record_acceptance(7, ok, f"confusion {conf}, exact 2/3 and 0.8 {exact}, shift identities {shifts}")
    assert ok


def test_c08_balance():
    rng = np.random.default_rng(8)
    bad = attained = 0
    for trial in range(500):
        nh, nn = (int(v) for v in rng.integers(0, 25, 2))
        hits = []
        for i in range(nh + nn):
            lab = i < nh
            s = Sample(np.zeros((2, 1)), np.zeros(2), lab, f"b{trial}", i)
            hits.append(Hit(s, float(rng.uniform(0, 10)), "hypo" if lab else "nonhypo", 0, 0))
        rng.shuffle(hits)
        out = sample_balance(hits, 3, 4)
        h = sum(s.label for s in out)
        n = len(out) - h
        t = min(nh // 3, nn // 4)
        attained += t > 0
        good = (h, n) == (3 * t, 4 * t)
        # the kept samples are the closest of each class
        for lab, k in ((True, h), (False, n)):
            d_all = sorted(x.distance for x in hits if x.sample.label == lab)
            kept = {id(s) for s in out}
            d_kept = sorted(x.distance for x in hits if x.sample.label == lab and id(x.sample) in kept)
            good &= d_kept == d_all[:k]
        bad += not good
    ok = bad == 0
    record_acceptance(8, ok, f"balance exact 3:4 on 500 multisets ({attained} attainable), "
                             f"{bad} violations")
    assert ok


def test_c09_no_leakage(tmp_path):
    cfg = ExperimentConfig(n_patients=12, duration_steps=240, hidden_dim=16, train_epochs=3,
                           k_hypo=4, k_nonhypo=4, kshape_max_iters=30, top_k=8,
                           scale_floor=3.0, tta_lr=1e-3,
                           cohort_dir=str(tmp_path / "train"), test_dir=str(tmp_path / "test"),
                           bank_file=str(tmp_path / "bank.bin"),
                           checkpoint=str(tmp_path / "model.ckpt"), out_dir=str(tmp_path / "out"))
    cfg_path = tmp_path / "exp.txt"
    save_config(cfg, cfg_path)
    c = str(cfg_path)
    codes = [
        main(["synth", "--spec", c, "--out", cfg.cohort_dir, "--seed", "11", "--set", "id_prefix=tr"]),
        main(["synth", "--spec", c, "--out", cfg.test_dir, "--seed", "12", "--set", "id_prefix=te",
              "--set", "shift_strength=1", "--set", "n_patients=6"]),
        main(["build-bank", "--config", c, "--cohort", cfg.cohort_dir, "--out", cfg.bank_file,
              "--k-hypo", "4", "--k-nonhypo", "4"]),
        main(["train", "--config", c]),
    ]
    codes += [main(["adapt-eval", "--config", c, "--set", f"strategy={s}"]) for s in STRATEGIES]
    # independent provenance scan over a fresh evaluation of the same inputs
    test = read_cohort(cfg.test_dir)
    bank = bank_io.load_bank(cfg.bank_file)
    params = fc.load_checkpoint(cfg.checkpoint)
    spec = X.window_spec(cfg)
    test_ids = {s.patient_id for s in test}
    violations, checked = [], 0
    violations += [f"bank holds {p}" for p in bank.patient_ids & test_ids]
    for strategy in ("own_history_tta", "csa_tta"):
        res = X.evaluate_cohort(test, params, bank, X.tta_config(cfg, 0, strategy), spec,
                                X.detector_config(cfg))
        violations += X.audit_leakage(res.runs, bank, test_ids, spec)
        for run in res.runs:
            for info in run.infos:
                for pid, start in info.own_provenance:
                    checked += 1
                    if pid != run.patient_id or start + spec.length > info.window_start:
                        violations.append(f"{run.patient_id}@{info.window_start}")
                checked += len(info.retrieved_patients)
                violations += [p for p in info.retrieved_patients if p in test_ids]
    preds = [json.loads(x) for x in
             (tmp_path / "out" / "predictions_csa_tta_seed0.ndjson").read_text().splitlines()]
    retrieved = sum(r["adaptation"]["retrieved"] for r in preds)
    ok = all(code == 0 for code in codes) and not violations and checked > 0 and retrieved > 0
    record_acceptance(9, ok, f"exit codes {codes}; {checked} provenance checks, "
                             f"{len(violations)} violations; {retrieved} retrieved samples used")
    assert ok


def test_c10_directional():
    cfg = X.directional_config()
    t0 = time.perf_counter()
    mse = {s: [] for s in STRATEGIES}
    novel = {s: [] for s in STRATEGIES}
    novel_hits = {s: 0 for s in STRATEGIES}
    novel_total = 0
    for seed in range(5):
        res = X.run_directional(cfg, seed)
        for s, ev in res.items():
            mse[s].append(ev.metrics.mse)
            novel[s].append(ev.novel_recall)
            novel_hits[s] += int(np.sum(ev.pred_labels[ev.novel]))
        novel_total += int(np.sum(res["csa_tta"].novel))
    secs = time.perf_counter() - t0
    m = {s: float(np.mean(v)) for s, v in mse.items()}
    r = {s: float(np.mean(v)) for s, v in novel.items()}
    a = m["csa_tta"] < m["frozen"]
    b = r["csa_tta"] > r["own_history_tta"]
    ok = a and b and secs < 600
    record_acceptance(
        10, ok,
        f"(a) MSE csa {m['csa_tta']:.3f} vs frozen {m['frozen']:.3f} [{a}]; "
        f"(b) novel recall csa {r['csa_tta']:.4f} vs own {r['own_history_tta']:.4f} [{b}] "
        f"({novel_hits['csa_tta']} vs {novel_hits['own_history_tta']} of {novel_total} novel windows); "
        f"{secs:.0f} s")
    assert ok


def _corruption_caught(path, loader, positions):
    raw = path.read_bytes()
    missed = 0
    for pos in positions:
        bad = bytearray(raw)
        bad[pos] ^= 0xA5
        path.write_bytes(bytes(bad))
        try:
            loader(path)
            missed += 1
        except FormatError:
            pass
    path.write_bytes(raw)
    return missed


def test_c11_persistence(tmp_path):
    cohort = synth.generate(synth.CohortSpec(n_patients=6, duration_steps=150, seed=21))
    bank = X.make_bank(cohort, ExperimentConfig(k_hypo=3, k_nonhypo=4), 0)
    p = fc.init_params(30, 3, 10, hidden_dim=64, seed=3, scale_floor=3.0)
    results = []
    for name, obj, save, load in (("bank", bank, bank_io.save_bank, bank_io.load_bank),
                                  ("checkpoint", p, fc.save_checkpoint, fc.load_checkpoint)):
        a, b = tmp_path / f"{name}.1", tmp_path / f"{name}.2"
        save(obj, a)
        back = load(a)
        save(back, b)
        identical = a.read_bytes() == b.read_bytes() and back == obj
        size = a.stat().st_size
        rng = np.random.default_rng(len(name))
        positions = sorted(set(range(20)) | set(range(size - 4, size))
                           | set(rng.integers(20, size - 4, 400).tolist()))
        missed = _corruption_caught(a, load, positions)
        results.append((name, identical, missed, len(positions)))
    # exhaustive single-byte corruption on a small checkpoint
    small = tmp_path / "small.ckpt"
    fc.save_checkpoint(fc.init_params(4, 1, 2, hidden_dim=3, seed=0), small)
    n_small = small.stat().st_size
    missed_small = _corruption_caught(small, fc.load_checkpoint, range(n_small))
    ok = all(i and m == 0 for _, i, m, _ in results) and missed_small == 0
    detail = "; ".join(f"{n}: round-trip identical {i}, corruption missed {m}/{k}"
                       for n, i, m, k in results)
    record_acceptance(11, ok, f"{detail}; small checkpoint every byte: missed {missed_small}/{n_small}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
