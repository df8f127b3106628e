"""Command-line entry point: ``paroquant <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .calibrate import CalibrationError
from .tensor_store import FormatError, Rng, load_tensors


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return cfg


def _build(cls, d: dict | None, **over):
    d = dict(d or {})
    d.update({k: v for k, v in over.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------


def cmd_pairs(a) -> None:
    from .transform import select_pairs

    rots = select_pairs(a.g, a.K, a.N, Rng(a.seed))
    doc = {"g": a.g, "K": a.K, "N": a.N, "seed": a.seed, "rotations": [[[p.i, p.j] for p in r] for r in rots]}
    _emit(json.dumps(doc) + "\n", a.out)


def cmd_quantize(a) -> None:
    from .calibrate import (OutlierModelSpec, TrainConfig, gen_calibration, gen_synthetic_model, load_model,
                            quantize_model, save_model)
    from .engine import DeployedModel

    cfg = _load_json(a.config) if a.config else {}
    unknown = set(cfg) - {"model", "train", "model_file"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    train = _build(TrainConfig, cfg.get("train"), seed=a.seed)
    if cfg.get("model_file"):
        layers = load_model(cfg["model_file"])
    else:
        layers = gen_synthetic_model(_build(OutlierModelSpec, cfg.get("model"), seed=a.seed))
    D = layers[0].w_up.shape[0]
    calib = gen_calibration(D, train.num_train, train.num_val, train.seq_len, train.seed)
    run = quantize_model(layers, calib, train)

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "fp_model.pqt", layers)
    DeployedModel.freeze(run.layers).save(out)
    report = []
    for i, rep in enumerate(run.reports):
        report.append({"layer": i, "stage1": rep.stage1.to_dict(), "stage2": rep.stage2.to_dict()})
        for k, st in ((1, rep.stage1), (2, rep.stage2)):
            if st.optimizer is not None:
                st.optimizer.save(out / f"layer{i}_stage{k}.adam.pqt")
    (out / "config.json").write_text(json.dumps({"train": dataclasses.asdict(train), **{
        k: v for k, v in cfg.items() if k != "train"}}, indent=2))
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps({"out": str(out), "layers": len(layers),
                      "best_val": [[r["stage1"]["best_val_loss"][-1], r["stage2"]["best_val_loss"][-1]] for r in report]}))


def evaluate(model_dir, X: np.ndarray) -> dict:
    from .calibrate import load_model, model_forward, rtn_layer
    from .engine import DeployedModel, quantized_forward
    from .quantizer import QuantSpec

    d = Path(model_dir)
    fp = load_model(d / "fp_model.pqt")
    deployed = DeployedModel.load(d)
    train = _load_json(d / "config.json").get("train", {})
    spec = QuantSpec(int(train.get("bits", 4)), int(train.get("group_size", 128)))
    ref = model_forward(fp, X)
    q = quantized_forward(X, deployed)
    r = model_forward([rtn_layer(l, spec) for l in fp], X)
    var = float(np.var(ref.astype(np.float64)))
    mse_q = float(np.mean((q.astype(np.float64) - ref) ** 2))
    mse_r = float(np.mean((r.astype(np.float64) - ref) ** 2))
    return {"tokens": int(X.shape[0]), "mse_quantized": mse_q, "mse_rtn": mse_r, "signal_var": var,
            "relative_mse_quantized": mse_q / var if var else float("nan")}


def cmd_eval(a) -> None:
    if a.inputs:
        tensors, _ = load_tensors(a.inputs)
        if "X" not in tensors:
            raise FormatError(f"{a.inputs}: missing tensor 'X'")
        X = tensors["X"].data.astype(np.float32)
        X = X.reshape(-1, X.shape[-1])
    else:
        from .calibrate import load_model

        D = load_model(Path(a.model) / "fp_model.pqt")[0].w_up.shape[0]
        X = Rng(a.seed + 2_000_029).numpy().standard_normal((a.tokens, D)).astype(np.float32)
    print(json.dumps(evaluate(a.model, X)))


def cmd_compare(a) -> None:
    from .baselines import CompareConfig, compare_transforms, curves_to_csv
    from .calibrate import outlier_matrix

    cfg = _load_json(a.config) if a.config else {}
    setup = {k: cfg.pop(k) for k in ("d_in", "d_out", "rows", "outliers", "gain", "kinds", "weights") if k in cfg}
    cc = _build(CompareConfig, cfg, seed=a.seed, steps=a.steps)
    if "weights" in setup:
        tensors, _ = load_tensors(setup["weights"])
        W = tensors["W"].data.astype(np.float32)
        X = tensors["X"].data.astype(np.float32) if "X" in tensors else None
    else:
        gen = Rng(cc.seed).numpy()
        W = outlier_matrix(setup.get("d_in", 128), setup.get("d_out", 512), setup.get("outliers", 4),
                           setup.get("gain", 50.0), gen)
        X = None
    if X is None:
        X = Rng(cc.seed + 1).numpy().standard_normal((setup.get("rows", 128), W.shape[0])).astype(np.float32)
    curves = compare_transforms(W, X, cc, setup.get("kinds"))
    _emit(curves_to_csv(curves, cc.seed), a.out)


def cmd_bench(a) -> None:
    from .engine import bench_to_csv, bench_transforms

    dims = [int(x) for x in a.dims.split(",") if x]
    rows = bench_transforms(dims, a.K, a.tokens, a.repeats, a.threads, seed=a.seed)
    _emit(bench_to_csv(rows), a.out)


def inspect_bundle(path) -> str:
    from .transform import bundle_load, materialize

    b = bundle_load(path)
    layout = b.layout
    live = b.pairs[..., 0] >= 0
    per_rot = live.sum(axis=2)
    ang = b.angles[live]
    resid = 0.0
    unit = b.copy()
    unit.alpha[...] = 1.0
    for k in range(layout.num_groups):
        M = materialize(unit, k)
        resid = max(resid, float(np.abs(M.T @ M - np.eye(M.shape[0])).max()))
    lines = [
        f"bundle: {path}",
        f"D_in={b.d_in} g={b.group_size} groups={layout.num_groups} K={b.K} N={b.N} padded={layout.padded}",
        f"pairs: total={int(live.sum())} per-rotation min={int(per_rot.min()) if per_rot.size else 0} "
        f"max={int(per_rot.max()) if per_rot.size else 0}",
        "angles: " + (f"mean={ang.mean():.6g} std={ang.std():.6g} min={ang.min():.6g} max={ang.max():.6g}"
                      if ang.size else "none"),
        f"alpha: min={b.alpha.min():.6g} max={b.alpha.max():.6g} mean={b.alpha.mean():.6g}",
        f"orthogonality residual (alpha=1): {resid:.3e}",
    ]
    return "\n".join(lines) + "\n"


def cmd_inspect(a) -> None:
    sys.stdout.write(inspect_bundle(a.bundle))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paroquant", description="Pairwise rotation weight quantization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("pairs", help="select independent channel pairs")
    s.add_argument("--g", type=int, required=True)
    s.add_argument("--K", type=int, required=True)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_pairs)

    s = sub.add_parser("quantize", help="run layer-wise calibration and write a deployed model")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("eval", help="compare full-precision, quantized and RTN outputs")
    s.add_argument("--model", required=True)
    s.add_argument("--inputs")
    s.add_argument("--tokens", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("compare-transforms", help="loss curves of the transform baselines (CSV)")
    s.add_argument("--config")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("bench", help="time the fused pairwise transform against the FWHT (CSV)")
    s.add_argument("--dims", default="256,1024,4096,8192")
    s.add_argument("--K", type=int, default=8)
    s.add_argument("--tokens", type=int, default=64)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--threads", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("inspect", help="summarize a bundle file")
    s.add_argument("--bundle", required=True)
    s.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (FormatError, CalibrationError, ValueError, KeyError, OSError) as e:
        print(f"paroquant {args.cmd}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
