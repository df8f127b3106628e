#!/usr/bin/env python3
"""Quantize the toy outlier model layer by layer and compare against RTN.

Prints per-layer stage losses and held-out output MSE for the quantized
model, plain RTN, and (optionally) a run with the alternative X' propagation.
"""

import argparse
import json
import logging

import numpy as np

from paroquant.calibrate import (OutlierModelSpec, TrainConfig, gen_calibration, gen_synthetic_model,
                                 model_forward, quantize_model, rtn_layer)
from paroquant.engine import DeployedModel, quantized_forward
from paroquant.tensor_store import Rng


def held_out(layers, qlayers, spec, X):
    ref = model_forward(layers, X).astype(np.float64)
    mse = lambda y: float(np.mean((y - ref) ** 2))
    return {
        "signal_var": float(np.var(ref)),
        "mse_quantized": mse(quantized_forward(X, DeployedModel.freeze(qlayers))),
        "mse_rtn": mse(model_forward([rtn_layer(l, spec) for l in layers], X)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--compare-propagation", action="store_true",
                    help="also run with X' <- q(X); the two flavours first differ at the third layer")
    ap.add_argument("-v", "--verbose", action="store_true")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")

    layers = gen_synthetic_model(OutlierModelSpec(num_layers=a.layers, seed=a.seed))
    X = Rng(a.seed + 12345).numpy().standard_normal((2048, layers[0].w_up.shape[0])).astype(np.float32)
    modes = ["quantized", "original"] if a.compare_propagation else ["quantized"]
    for mode in modes:
        cfg = TrainConfig(bits=a.bits, epochs_per_stage=a.epochs, propagate=mode, seed=a.seed)
        calib = gen_calibration(layers[0].w_up.shape[0], cfg.num_train, cfg.num_val, cfg.seq_len, cfg.seed)
        run = quantize_model(layers, calib, cfg)
        print(f"propagate={mode}")
        for i, r in enumerate(run.reports):
            print(f"  layer {i}: stage 1 train {r.stage1.init_train_loss:.4g} -> {r.stage1.final_train_loss:.4g}, "
                  f"best val {r.stage1.best:.4g}; stage 2 best val {r.stage2.best:.4g}")
        print("  " + json.dumps(held_out(layers, run.layers, cfg.spec, X)))


if __name__ == "__main__":
    main()
