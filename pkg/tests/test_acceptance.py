"""Acceptance criteria. Run with ``pytest tests/test_acceptance.py -s`` to see
one PASS/FAIL line per criterion."""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_SYNTH
from fuseid import embedding_store as es
from fuseid import netcore as nc
from fuseid import svm
from fuseid import two_branch as tb
from fuseid.cli import run_pipeline
from fuseid.config import resolve
from oracles import gradient_check, qp_dual_oracle, random_small_model, separable_instance

REPORT_FILES = ("voice_only_baseline.json", "fused_aided.json", "fused_masked.json", "comparison.json")


def report(number, name, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} [{number}] {name}: {detail}")
    assert ok, detail


def acceptance_config():
    return resolve({"seed": 7, "SynthConfig": vars(ACCEPTANCE_SYNTH).copy()}, env={})


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    runs = []
    for i in range(2):
        work = tmp_path_factory.mktemp(f"run{i}")
        t = time.perf_counter()
        out = run_pipeline(acceptance_config(), work)
        runs.append((work, out, time.perf_counter() - t))
    return runs


@pytest.mark.slow
def test_ordering_claim(pipeline_runs):
    _, out, seconds = pipeline_runs[0]
    r = out["reports"]
    base, aided, masked = (100 * r[c].top1 for c in ("voice_only_baseline", "fused_aided", "fused_masked"))
    ok = aided >= base + 5 and masked >= base - 2 and seconds < 300
    report(1, "ordering claim", ok,
           f"baseline {base:.2f}, aided {aided:.2f} (need >= {base + 5:.2f}), "
           f"masked {masked:.2f} (need >= {base - 2:.2f}), {seconds:.1f}s (need < 300s)")


def test_gradient_suite():
    t = time.perf_counter()
    errors = [gradient_check(random_small_model(seed), seed=seed) for seed in range(20)]
    seconds = time.perf_counter() - t
    worst = max(errors)
    report(2, "gradient suite", worst <= 1e-3 and seconds < 30,
           f"20 nets, worst relative error {worst:.2e} (need <= 1e-3), {seconds:.1f}s (need < 30s)")


def _svm_instance(seed):
    r = np.random.default_rng(seed)
    if seed % 2:
        X, y = separable_instance(seed, n_max=25, dim=int(r.integers(2, 5)))
    else:
        n = int(r.integers(4, 26))
        X = r.standard_normal((n, int(r.integers(2, 5))))
        y = np.where(r.random(n) < 0.5, 1.0, -1.0)
        y[:2] = [1.0, -1.0]
    kernel = svm.KernelSpec("poly", 3, float(r.uniform(0.2, 1.0)), float(r.uniform(0, 1)))
    return X, y, kernel, float(r.choice([0.5, 1.0, 10.0]))


def test_svm_oracle_suite():
    t = time.perf_counter()
    worst, mismatched = 0.0, 0
    for seed in range(50):
        X, y, kernel, C = _svm_instance(seed)
        m = svm.train_binary(X, y, kernel, regularization=C, tol=1e-6)
        K = svm.kernel_matrix(kernel, X, X)
        a_ref, obj_ref, b_ref = qp_dual_oracle(X, y, kernel, C)
        obj = svm.dual_objective(m.alpha, y, K)
        worst = max(worst, abs(obj - obj_ref) / max(abs(obj_ref), 1e-12))
        ref_pred = np.where(K @ (a_ref * y) + b_ref > 0, 1, -1)
        mismatched += int(np.any(m.predict(X) != ref_pred))
    seconds = time.perf_counter() - t
    report(3, "SVM oracle suite", worst <= 1e-3 and mismatched == 0 and seconds < 120,
           f"50 instances, worst relative dual gap {worst:.2e} (need <= 1e-3), "
           f"{mismatched} with differing predictions, {seconds:.1f}s (need < 120s)")


def test_masking_equivalence():
    r = np.random.default_rng(0)
    spec = tb.ArchitectureSpec(12, 10, 5, voice_hidden_dims=(16,), face_hidden_dims=(16,),
                               fusion_dim=16, post_fusion_hidden_dims=(16,))
    model = tb.build_model(spec, seed=1)
    bad = 0
    for _ in range(1000):
        v = r.standard_normal(12) * r.uniform(0.01, 10)
        absent = tb.extract_features(model, v).vector
        zero = tb.extract_features(model, v, np.zeros(10)).vector
        bad += int(absent.tobytes() != zero.tobytes())
    report(4, "masking equivalence", bad == 0, f"{bad}/1000 inputs differ bitwise")


@pytest.mark.slow
def test_determinism(pipeline_runs):
    (a, _, _), (b, _, _) = pipeline_runs
    differing = [name for name in REPORT_FILES
                 if (Path(a) / "reports" / name).read_bytes() != (Path(b) / "reports" / name).read_bytes()]
    report(5, "determinism", not differing,
           f"{len(REPORT_FILES) - len(differing)}/{len(REPORT_FILES)} report files byte-identical")


def test_analytic_checkpoints(tmp_path):
    C = 7
    p = nc.softmax(np.zeros((1, C)))
    uniform = bool(np.all(p == p[0, 0])) and abs(p[0, 0] - 1 / C) < 1e-15
    ce_err = abs(float(nc.cross_entropy(np.full(C, 1 / C), nc.one_hot(np.array([3]), C)[0])) - math.log(C))
    doc = {"seed": 7,
           "SynthConfig": dict(num_identities=8, latent_dim=4, voice_dim=8, face_dim=8,
                               clips_per_identity_train=5, clips_per_identity_test=3,
                               voice_noise_sigma=0.0, face_noise_sigma=0.0),
           "TrainConfig": {"epochs": 10}}
    reports = run_pipeline(resolve(doc, env={}), tmp_path)["reports"]
    tops = {c: r.top1 for c, r in reports.items()}
    ok = uniform and ce_err <= 1e-9 and tops["fused_aided"] == 1.0
    report(6, "analytic checkpoints", ok,
           f"softmax(0) uniform={uniform}, |CE(uniform) - ln C|={ce_err:.1e}, "
           f"zero-noise top-1 {tops}")


def test_format_round_trips(rng):
    cfg = es.SynthConfig(num_identities=4, latent_dim=3, voice_dim=5, face_dim=4,
                         clips_per_identity_train=3, clips_per_identity_test=2, seed=2)
    buf = es.encode_embeddings(es.generate_synthetic(cfg))
    ok_data = es.encode_embeddings(es.decode_embeddings(buf)[1]) == buf

    spec = tb.ArchitectureSpec(5, 4, 4, voice_hidden_dims=(8, 6), face_hidden_dims=(6,),
                               fusion_dim=6, post_fusion_hidden_dims=(6,))
    model = tb.build_model(spec, seed=3)
    model, _ = tb.train(model, es.pair_samples(es.decode_embeddings(buf)[1], "train")[0],
                        tb.TrainConfig(epochs=2))
    mbuf = tb.encode_model(model)
    back = tb.decode_model(mbuf)
    ok_model = tb.encode_model(back) == mbuf and all(
        a.tobytes() == b.tobytes() for a, b in zip(model.parameters(), back.parameters()))

    X = rng.standard_normal((40, 3))
    y = np.repeat(np.arange(4), 10)
    X += y[:, None]
    sm = svm.train_multiclass(X, y, svm.KernelSpec(), 1.0)
    sbuf = svm.encode_svm(sm)
    sback = svm.decode_svm(sbuf)
    ok_svm = svm.encode_svm(sback) == sbuf and \
        sback.decision_values(X).tobytes() == sm.decision_values(X).tobytes()
    report(7, "format round-trips", ok_data and ok_model and ok_svm,
           f"FUSEID1={ok_data}, FUSEMDL1={ok_model}, FUSESVM1={ok_svm}")
