"""Acceptance criteria 1-12. Each test prints one PASS/FAIL line; the lines are
repeated in the pytest terminal summary. Run alone with
``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``."""

import functools
import subprocess
import sys
import time

import numpy as np
import pytest

from helpers import ACCEPTANCE, brute_force_rtn, layer_gradient_instance, record
from paroquant.baselines import CompareConfig, compare_transforms, curves_to_csv, fwht, skew_to_orthogonal
from paroquant.calibrate import (
    OutlierModelSpec, TrainConfig, gen_calibration, gen_synthetic_model, model_forward, outlier_matrix,
    quantize_model, rtn_layer,
)
from paroquant.cli import main as cli_main
from paroquant.engine import (
    DeployedModel, bench_to_csv, bench_transforms, fused_inverse_transform, quantized_forward,
    random_bench_bundle, set_threads, timing_ratio,
)
from paroquant.optim import AdamW, LrSchedule, cosine_lr
from paroquant.quantizer import QuantSpec, dequantize_matrix, load_quantized, quantize_matrix, save_quantized
from paroquant.tensor_store import Rng, Tensor, load_tensors, save_tensors
from paroquant.transform import (
    apply_bundle_to_weights, apply_inverse_to_activations, bundle_load, bundle_save, make_bundle, materialize,
    select_pairs,
)


def criterion(n):
    """Run a body returning (ok, detail); any exception is recorded as a FAIL line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*a, **kw):
            t0 = time.perf_counter()
            try:
                ok, detail = fn(*a, **kw)
            except Exception as e:  # noqa: BLE001 - reported, then re-raised by record
                ok, detail = False, f"{type(e).__name__}: {e}"
            record(n, ok, f"{detail} [{time.perf_counter() - t0:.1f}s]")

        return run

    return wrap


def random_bundle(d_in, g, K, N, rng: Rng, alpha=(0.5, 2.0)):
    b = make_bundle(d_in, g, K, N, rng)
    gen = rng.numpy()
    b.angles[...] = gen.uniform(-np.pi, np.pi, b.angles.shape)
    b.alpha[...] = gen.uniform(*alpha, b.alpha.shape)
    return b


# ---------------------------------------------------------------------------


@criterion(1)
def test_c01_transform_exactness():
    t0 = time.perf_counter()
    rng = Rng(101)
    worst = 0.0
    for _ in range(100):
        gen = rng.numpy()
        X = gen.standard_normal((16, 128)).astype(np.float32)
        W = gen.standard_normal((128, 64)).astype(np.float32)
        b = random_bundle(128, 128, 8, 64, rng)
        ref = X.astype(np.float64) @ W
        got = apply_inverse_to_activations(X, b).astype(np.float64) @ apply_bundle_to_weights(W, b)
        worst = max(worst, np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
    dt = time.perf_counter() - t0
    return worst <= 1e-3 and dt < 10, f"100 instances, max relative error {worst:.2e} (<= 1e-3), {dt:.2f}s (< 10s)"


@criterion(2)
def test_c02_orthogonality():
    rng = Rng(202)
    worst_o, worst_d = 0.0, 0.0
    for g in (8, 32, 128):
        for _ in range(5):
            b = random_bundle(g, g, 8, g // 2, rng, alpha=(1.0, 1.0))
            M = materialize(b, 0)
            worst_o = max(worst_o, np.max(np.abs(M.T @ M - np.eye(g))))
            worst_d = max(worst_d, abs(np.linalg.det(M) - 1))
    return worst_o <= 1e-5 and worst_d <= 1e-4, f"g in {{8,32,128}}: max |R^T R - I| {worst_o:.1e}, max |det - 1| {worst_d:.1e}"


@criterion(3)
def test_c03_rtn_oracle():
    gen = np.random.default_rng(303)
    mismatches, worst, n = 0, -np.inf, 0
    for i in range(50):
        W = (gen.standard_normal((128, 16)) * gen.uniform(0.05, 5, 16)).astype(np.float32)
        g = 128 if i % 2 == 0 else 32
        for bits in (2, 3, 4, 8):
            qt = quantize_matrix(W, QuantSpec(bits, g))
            codes, S, Z = brute_force_rtn(W, bits, g)
            mismatches += int(np.sum(qt.codes.astype(np.int64) != codes))
            s = np.repeat(qt.scales, g, axis=0)[: W.shape[0]].astype(np.float64)
            z = np.repeat(qt.zeros, g, axis=0)[: W.shape[0]]
            u = W / s + z
            inside = (u >= -0.5) & (u <= qmax_of(bits) + 0.5)
            err = np.abs(dequantize_matrix(qt).astype(np.float64) - W)
            worst = max(worst, float(np.max((err - s / 2)[inside])))
            n += 1
    ok = mismatches == 0 and worst <= 1e-6
    return ok, f"{n} matrix/bit-width cases, code mismatches {mismatches}, max(err - s/2) {worst:.1e} (<= 1e-6)"


def qmax_of(bits):
    return 2**bits - 1


@criterion(4)
def test_c04_pair_selection():
    rng = Rng(404)
    bad = []
    for case in range(200):
        g = 2 + rng.below(127)
        K = 1 + rng.below(12)
        N = 1 + rng.below(g // 2)
        seed = rng.next_u64()
        rots = select_pairs(g, K, N, Rng(seed))
        again = select_pairs(g, K, N, Rng(seed))
        seen = set()
        for r in rots:
            ch = [c for p in r for c in (p.i, p.j)]
            pr = {(p.i, p.j) for p in r}
            if len(ch) != len(set(ch)) or len(r) > N or pr & seen or not all(0 <= c < g for c in ch):
                bad.append((g, K, N, seed))
            seen |= pr
        if rots != again:
            bad.append((g, K, N, seed, "nondeterministic"))
    first = len(select_pairs(128, 8, 64, Rng(0))[0])
    return not bad and first == 64, f"200 configs, violations {len(bad)}; g=128 K=8 N=64 first rotation has {first} pairs"


@criterion(5)
def test_c05_gradients():
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for i in range(50):
        stage = 1 if i < 25 else 2
        res, _ = layer_gradient_instance(5000 + i, stage)
        k = max(res, key=res.get)
        if res[k] > worst:
            worst, where = res[k], f"stage {stage} {k}"
    dt = time.perf_counter() - t0
    return worst <= 1 and dt < 30, (
        f"50 instances (theta, alpha, W in stage 1; W, s, z in stage 2), worst error/tolerance {worst:.2e} "
        f"at {where}, {dt:.1f}s (< 30s)")


@criterion(6)
def test_c06_transform_comparison(tmp_path_factory):
    t0 = time.perf_counter()
    gen = Rng(606).numpy()
    W = outlier_matrix(128, 512, 4, 50.0, gen)
    X = gen.standard_normal((128, 128)).astype(np.float32)
    cfg = CompareConfig(steps=200, full_block=64, seed=0)
    curves = compare_transforms(W, X, cfg)
    out = tmp_path_factory.mktemp("curves") / "curves.csv"
    out.write_text(curves_to_csv(curves, cfg.seed))
    f = {k: v[-1] for k, v in curves.items()}
    sp = f["scaled_pairwise"]
    dt = time.perf_counter() - t0
    ok = sp <= f["scaling"] and sp <= f["hadamard"] and sp <= 1.2 * f["full_rotation"] and dt < 300
    detail = ", ".join(f"{k} {v:.4g}" for k, v in f.items())
    return ok, f"final errors: {detail}; {dt:.0f}s (< 300s)"


# ---------------------------------------------------------------------------
# criteria 7 and 8 share one pipeline run


@pytest.fixture(scope="module")
def pipeline():
    t0 = time.perf_counter()
    layers = gen_synthetic_model(OutlierModelSpec(num_layers=2, D=128, H=256, seed=0))
    cfg = TrainConfig(bits=4, num_train=256, num_val=32, seed=0)
    calib = gen_calibration(128, cfg.num_train, cfg.num_val, cfg.seq_len, cfg.seed)
    run = quantize_model(layers, calib, cfg)
    X = Rng(777).numpy().standard_normal((2048, 128)).astype(np.float32)
    return layers, cfg, run, X, time.perf_counter() - t0


@criterion(7)
def test_c07_pipeline(pipeline):
    layers, cfg, run, X, dt = pipeline
    ref = model_forward(layers, X).astype(np.float64)
    mse_q = float(np.mean((model_forward(run.layers, X) - ref) ** 2))
    mse_r = float(np.mean((model_forward([rtn_layer(l, cfg.spec) for l in layers], X) - ref) ** 2))
    stages = [(r.stage1.best, r.stage2.best) for r in run.reports]
    gains = [1 - r.stage1.final_train_loss / r.stage1.init_train_loss for r in run.reports]
    ok = mse_q < mse_r and all(b2 <= b1 for b1, b2 in stages) and dt < 600
    st = "; ".join(f"layer {i} stage-1 best val {b1:.4g}, stage-2 {b2:.4g}" for i, (b1, b2) in enumerate(stages))
    return ok, (f"held-out MSE {mse_q:.4g} vs RTN {mse_r:.4g}; {st}; stage-1 train-loss reduction "
                f"{', '.join(f'{g:.0%}' for g in gains)}; {dt:.0f}s (< 600s)")


@criterion(8)
def test_c08_mode_equivalence(pipeline):
    _, _, run, X, _ = pipeline
    train_mode = model_forward(run.layers, X)
    deployed = quantized_forward(X, DeployedModel.freeze(run.layers))
    diff = float(np.max(np.abs(deployed - train_mode)))
    return diff <= 1e-4, f"max |deployed - training| {diff:.2e} over {X.shape[0]} tokens (<= 1e-4)"


# ---------------------------------------------------------------------------


@criterion(9)
def test_c09_optimizer_oracles():
    opt = AdamW(weight_decay=0.0)
    p = np.zeros(1)
    opt.step("p", p, np.ones(1), 0.05)
    e1 = abs(p[0] - (-0.05 / (1 + 1e-10)))
    opt = AdamW(weight_decay=0.01)
    q = np.ones(1)
    opt.step("q", q, np.zeros(1), 0.05)
    e2 = abs(q[0] - 0.9995)
    ends = all(cosine_lr(0, LrSchedule(b, 100)) == b and cosine_lr(100, LrSchedule(b, 100)) == b / 20
               for b in (0.05, 0.01, 0.001, 1e-5, 1e-6))
    ok = e1 <= 1e-7 and e2 <= 1e-7 and ends
    return ok, f"AdamW step error {e1:.1e}, decay-only error {e2:.1e}; cosine endpoints exact: {ends}"


@criterion(10)
def test_c10_baseline_oracles():
    gen = np.random.default_rng(1010)
    worst_h = 0.0
    H = np.ones((1, 1))
    for n in (2, 4, 8, 16, 32, 64, 128, 256):
        while H.shape[0] < n:
            H = np.block([[H, H], [H, -H]])
        v = gen.standard_normal((4, n)).astype(np.float32)
        worst_h = max(worst_h, float(np.max(np.abs(fwht(v) - v @ H.T))))
    worst_o = 0.0
    for n in (8, 64, 128):
        R = skew_to_orthogonal(gen.standard_normal((n, n)))
        worst_o = max(worst_o, float(np.max(np.abs(R.T @ R - np.eye(n)))), abs(np.linalg.det(R) - 1))
    worst_2 = 0.0
    for th in np.linspace(-6, 6, 25):
        R = skew_to_orthogonal(np.array([[0.0, th], [0.0, 0.0]]))
        ref = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]])
        worst_2 = max(worst_2, float(np.max(np.abs(R - ref))))
    ok = worst_h <= 1e-4 and worst_o <= 1e-5 and worst_2 <= 1e-6
    return ok, f"FWHT vs dense {worst_h:.1e}; orthogonality/det {worst_o:.1e}; 2x2 closed form {worst_2:.1e}"


@criterion(11)
def test_c11_benchmark_trend(tmp_path_factory):
    set_threads(1)
    gen = np.random.default_rng(1111)
    tokens = 64

    def runner(n, K):
        X = gen.standard_normal((tokens, n)).astype(np.float32)
        b = random_bench_bundle(n, K, seed=n + K)
        return lambda: fused_inverse_transform(X, b)

    n_ratios = {f"{n}->{2 * n}": timing_ratio(runner(n, 8), runner(2 * n, 8)) for n in (1024, 2048, 4096)}
    k_ratio = timing_ratio(runner(4096, 4), runner(4096, 8))
    rows = bench_transforms([1024, 2048, 4096, 8192], K=8, tokens=tokens, repeats=5, threads=1)
    out = tmp_path_factory.mktemp("bench") / "bench.csv"
    out.write_text(bench_to_csv(rows))
    set_threads()
    ok = all(1.6 <= r <= 2.6 for r in n_ratios.values()) and 1.5 <= k_ratio <= 2.5
    nr = ", ".join(f"{k}: {v:.2f}" for k, v in n_ratios.items())
    return ok, f"n doubling ratios {nr} (in [1.6, 2.6]); K8/K4 at n=4096 {k_ratio:.2f} (in [1.5, 2.5]); FWHT report {out}"


@criterion(12)
def test_c12_serialization(tmp_path, capsys):
    gen = np.random.default_rng(1212)
    ts = [Tensor("f", gen.standard_normal((7, 3)).astype(np.float32), "weight"),
          Tensor("i", gen.integers(-2**31, 2**31 - 1, (4,), dtype=np.int64).astype(np.int32)),
          Tensor("u", gen.integers(0, 256, (2, 2, 2), dtype=np.int64).astype(np.uint8))]
    save_tensors(tmp_path / "t.pqt", ts, {"x": 1})
    back, _ = load_tensors(tmp_path / "t.pqt")
    files_ok = all(back[t.name].data.tobytes() == t.data.tobytes() and back[t.name].data.dtype == t.data.dtype
                   for t in ts)
    b = random_bundle(200, 64, 8, 32, Rng(12))
    bundle_save(tmp_path / "b.pqt", b)
    bb = bundle_load(tmp_path / "b.pqt")
    bundle_ok = all(getattr(bb, k).tobytes() == getattr(b, k).tobytes() for k in ("alpha", "pairs", "angles"))
    qt = quantize_matrix(gen.standard_normal((200, 9)).astype(np.float32), QuantSpec(4, 64))
    save_quantized(tmp_path / "q.pqt", qt)
    qb = load_quantized(tmp_path / "q.pqt")[0]
    q_ok = qb.codes.tobytes() == qt.codes.tobytes() and qb.scales.tobytes() == qt.scales.tobytes()

    raw = (tmp_path / "b.pqt").read_bytes()
    (tmp_path / "magic.pqt").write_bytes(b"XXXX" + raw[4:])
    tensors, meta = load_tensors(tmp_path / "b.pqt")
    tensors["pairs"].data[0, 0, 1] = tensors["pairs"].data[0, 0, 0]  # channel reused within a rotation
    save_tensors(tmp_path / "dup.pqt", list(tensors.values()), meta)
    codes = [cli_main(["inspect", "--bundle", str(tmp_path / p)]) for p in ("magic.pqt", "dup.pqt")]
    proc = subprocess.run([sys.executable, "-m", "paroquant", "inspect", "--bundle", str(tmp_path / "dup.pqt")],
                          capture_output=True, text=True)
    capsys.readouterr()
    ok = files_ok and bundle_ok and q_ok and all(c != 0 for c in codes) and proc.returncode != 0
    return ok, (f"roundtrips bit-exact: tensors {files_ok}, bundle {bundle_ok}, quantized {q_ok}; "
                f"exit codes bad-magic {codes[0]}, duplicate-channel {codes[1]}, subprocess {proc.returncode}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
