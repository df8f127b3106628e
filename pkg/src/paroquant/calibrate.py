"""Layer-wise two-stage calibration of a toy decoder stack.

Each toy layer is a residual MLP block ``y = x + down(silu(up(x)))``. Every
linear gets a scaled pairwise rotation and a group-wise quantizer. Stage 1
learns rotation angles and channel scales with (scale, zero) recomputed from
the transformed weights on every forward. Stage 2 folds the transform into
the weights and fine-tunes the folded weights together with (scale, zero).
After every epoch the validation loss decides whether the parameters are kept
as the new best snapshot.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .optim import AdamW, LrSchedule, ParamKind, DEFAULT_LR, cosine_lr, huber_loss
from .quantizer import (
    EPS,
    QuantSpec,
    QuantizedTensor,
    fake_quant,
    fake_quant_backward,
    fake_quant_dynamic,
    fake_quant_dynamic_backward,
    quantize_with,
    rtn_params,
)
from .tensor_store import FormatError, Rng, Tensor, load_tensors, save_tensors
from .transform import (
    TransformBundle,
    activations_backward,
    apply_bundle_to_weights,
    apply_inverse_to_activations,
    identity_bundle,
    make_bundle,
    weights_backward,
)

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    pass


def silu(h):
    return h * expit(h)


def silu_grad(h):
    sig = expit(h)
    return sig * (1 + h * (1 - sig))


def matmul64(a, b):
    """Matrix product with float64 accumulation, returned in ``a``'s dtype."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


# ---------------------------------------------------------------------------
# model


@dataclass
class ToyDecoderLayer:
    w_up: np.ndarray  # (D, H)
    w_down: np.ndarray  # (H, D)
    b_up: np.ndarray | None = None
    b_down: np.ndarray | None = None
    residual: bool = True

    def __post_init__(self):
        if self.w_up.shape[1] != self.w_down.shape[0] or self.w_up.shape[0] != self.w_down.shape[1]:
            raise ValueError(f"dimensions do not chain: {self.w_up.shape} -> {self.w_down.shape}")

    def forward(self, X: np.ndarray) -> np.ndarray:
        h = matmul64(X, self.w_up)
        if self.b_up is not None:
            h = h + self.b_up
        o = matmul64(silu(h), self.w_down)
        if self.b_down is not None:
            o = o + self.b_down
        return X + o if self.residual else o

    __call__ = forward


@dataclass
class OutlierModelSpec:
    num_layers: int = 2
    D: int = 128
    H: int = 256
    outlier_channels_per_linear: int = 4
    outlier_gain: float = 50.0
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.outlier_channels_per_linear >= min(self.D, self.H):
            raise ValueError("more outlier channels than input channels")


def outlier_matrix(d_in: int, d_out: int, n_outliers: int, gain: float, gen: np.random.Generator) -> np.ndarray:
    W = gen.standard_normal((d_in, d_out)) / np.sqrt(d_in)
    if n_outliers:
        W[gen.choice(d_in, n_outliers, replace=False)] *= gain
    return W.astype(np.float32)


def gen_synthetic_model(spec: OutlierModelSpec) -> list[ToyDecoderLayer]:
    gen = Rng(spec.seed).numpy()
    layers = []
    for _ in range(spec.num_layers):
        up = outlier_matrix(spec.D, spec.H, spec.outlier_channels_per_linear, spec.outlier_gain, gen)
        # keep the residual stream bounded: the down projection is shrunk by the gain
        down = outlier_matrix(spec.H, spec.D, spec.outlier_channels_per_linear, spec.outlier_gain, gen)
        down /= np.float32(max(1.0, np.sqrt(spec.outlier_gain)))
        b_up = b_down = None
        if spec.bias:
            b_up = (0.1 * gen.standard_normal(spec.H)).astype(np.float32)
            b_down = (0.1 * gen.standard_normal(spec.D)).astype(np.float32)
        layers.append(ToyDecoderLayer(up, down, b_up, b_down))
    return layers


@dataclass
class CalibrationData:
    train: np.ndarray  # (samples, seq_len, D)
    val: np.ndarray

    def batches(self, X: np.ndarray, batch_size: int) -> list[slice]:
        return [slice(i, min(i + batch_size, X.shape[0])) for i in range(0, X.shape[0], batch_size)]


def gen_calibration(D: int, num_train: int = 256, num_val: int = 32, seq_len: int = 64, seed: int = 0) -> CalibrationData:
    """Standard-normal token activations; the validation stream uses an offset seed."""
    train = Rng(seed).numpy().standard_normal((num_train, seq_len, D)).astype(np.float32)
    val = Rng(seed + 1_000_003).numpy().standard_normal((num_val, seq_len, D)).astype(np.float32)
    return CalibrationData(train, val)


def flat(X: np.ndarray) -> np.ndarray:
    return X.reshape(-1, X.shape[-1])


# ---------------------------------------------------------------------------
# quantized layer (training mode)


@dataclass
class QuantLinear:
    """One linear layer with its transform and quantizer.

    While ``folded`` is False, ``weight`` holds the original weights and the
    bundle is applied on every forward with dynamic (scale, zero). Once folded,
    ``weight`` holds T(W) and ``scales``/``zeros`` are trainable.
    """

    weight: np.ndarray
    bias: np.ndarray | None
    bundle: TransformBundle
    spec: QuantSpec
    folded: bool = False
    scales: np.ndarray | None = None
    zeros: np.ndarray | None = None

    def forward(self, X, rnd=np.rint, cache: dict | None = None):
        xt_tape = [] if cache is not None else None
        XT = apply_inverse_to_activations(X, self.bundle, tape=xt_tape)
        if self.folded:
            TW, tw_tape = self.weight, None
            Wq, qc = fake_quant(TW, self.scales, self.zeros, self.spec, rnd=rnd, cache=True)
        else:
            tw_tape = [] if cache is not None else None
            TW = apply_bundle_to_weights(self.weight, self.bundle, tape=tw_tape)
            Wq, qc = fake_quant_dynamic(TW, self.spec, rnd=rnd, cache=True)
        out = matmul64(XT, Wq)
        if self.bias is not None:
            out = out + self.bias
        if cache is not None:
            cache.update(XT=XT, Wq=Wq, qc=qc, xt_tape=xt_tape, tw_tape=tw_tape)
        return out

    def backward(self, dout, cache: dict) -> tuple[np.ndarray, dict]:
        XT, Wq = cache["XT"], cache["Wq"]
        dWq = matmul64(XT.T, dout)
        dXT = matmul64(dout, Wq.T)
        dX, dang_x, dal_x = activations_backward(dXT, self.bundle, cache["xt_tape"])
        grads = {}
        if self.folded:
            dW, ds, dz = fake_quant_backward(dWq, cache["qc"])
            grads[ParamKind.WEIGHTS] = dW
            grads[ParamKind.SCALES] = ds
            grads[ParamKind.ZERO_POINTS] = dz
            grads[ParamKind.ANGLES] = dang_x
            grads[ParamKind.ALPHA] = dal_x
        else:
            dTW = fake_quant_dynamic_backward(dWq, cache["qc"])
            dW, dang_w, dal_w = weights_backward(dTW, self.weight, self.bundle, cache["tw_tape"])
            grads[ParamKind.WEIGHTS] = dW
            grads[ParamKind.ANGLES] = dang_w + dang_x
            grads[ParamKind.ALPHA] = dal_w + dal_x
        return dX, grads

    def fold(self) -> None:
        """Replace W by T(W) and initialise (scale, zero) from it by min/max."""
        if self.folded:
            return
        self.weight = apply_bundle_to_weights(self.weight, self.bundle)
        self.scales, self.zeros = rtn_params(self.weight, self.spec)
        self.folded = True

    def quantized(self) -> QuantizedTensor:
        if self.folded:
            return quantize_with(self.weight, self.scales, self.zeros, self.spec)
        TW = apply_bundle_to_weights(self.weight, self.bundle)
        s, z = rtn_params(TW, self.spec)
        return quantize_with(TW, s, z, self.spec)

    def params(self, stage: int) -> dict[ParamKind, np.ndarray]:
        if stage == 1:
            return {ParamKind.ANGLES: self.bundle.angles, ParamKind.ALPHA: self.bundle.alpha}
        return {ParamKind.WEIGHTS: self.weight, ParamKind.SCALES: self.scales, ParamKind.ZERO_POINTS: self.zeros}


@dataclass
class QuantizedLayer:
    up: QuantLinear
    down: QuantLinear
    residual: bool = True

    @property
    def linears(self) -> dict[str, QuantLinear]:
        return {"up": self.up, "down": self.down}

    def forward(self, X, rnd=np.rint, cache: dict | None = None):
        cu = {} if cache is not None else None
        cd = {} if cache is not None else None
        h = self.up.forward(X, rnd=rnd, cache=cu)
        a = silu(h)
        o = self.down.forward(a, rnd=rnd, cache=cd)
        if cache is not None:
            cache.update(up=cu, down=cd, h=h)
        return X + o if self.residual else o

    __call__ = forward

    def fold(self) -> None:
        self.up.fold()
        self.down.fold()

    def clone(self) -> "QuantizedLayer":
        return copy.deepcopy(self)


def backward_layer(layer: QuantizedLayer, cache: dict, dout: np.ndarray) -> dict[str, dict]:
    """Gradients for every parameter of both linears, keyed by linear name then kind."""
    da, g_down = layer.down.backward(dout, cache["down"])
    dh = da * silu_grad(cache["h"]).astype(da.dtype)
    _, g_up = layer.up.backward(dh, cache["up"])
    return {"up": g_up, "down": g_down}


def init_quantized_layer(layer: ToyDecoderLayer, spec: QuantSpec, K: int, N: int, rng: Rng) -> QuantizedLayer:
    def lin(W, b):
        d_in = W.shape[0]
        bundle = make_bundle(d_in, spec.group_size, K, N, rng) if K > 0 else identity_bundle(d_in, spec.group_size)
        return QuantLinear(W.copy(), None if b is None else b.copy(), bundle, spec)

    return QuantizedLayer(lin(layer.w_up, layer.b_up), lin(layer.w_down, layer.b_down), layer.residual)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainConfig:
    bits: int = 4
    group_size: int = 128
    K: int = 8
    N: int = 64
    epochs_per_stage: int = 10
    batch_size: int = 16
    lr_angles: float = DEFAULT_LR[ParamKind.ANGLES]
    lr_alpha: float = DEFAULT_LR[ParamKind.ALPHA]
    lr_weights: float = DEFAULT_LR[ParamKind.WEIGHTS]
    lr_scales: float = DEFAULT_LR[ParamKind.SCALES]
    lr_zeros: float = DEFAULT_LR[ParamKind.ZERO_POINTS]
    num_train: int = 256
    num_val: int = 32
    seq_len: int = 64
    # "quantized": X' <- q(X') ; "original": X' <- q(X)
    propagate: str = "quantized"
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs_per_stage", "batch_size", "num_train", "num_val", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.propagate not in ("quantized", "original"):
            raise ValueError("propagate must be 'quantized' or 'original'")

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits, self.group_size)

    def lr(self, kind: ParamKind) -> float:
        return {
            ParamKind.ANGLES: self.lr_angles,
            ParamKind.ALPHA: self.lr_alpha,
            ParamKind.WEIGHTS: self.lr_weights,
            ParamKind.SCALES: self.lr_scales,
            ParamKind.ZERO_POINTS: self.lr_zeros,
        }[kind]


@dataclass
class StageReport:
    init_train_loss: float
    init_val_loss: float
    train_loss: list[float] = field(default_factory=list)  # mean batch loss per epoch
    val_loss: list[float] = field(default_factory=list)  # per epoch, raw
    best_val_loss: list[float] = field(default_factory=list)  # per epoch, best so far
    final_train_loss: float = float("nan")  # best snapshot on the training set
    optimizer: AdamW | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("init_train_loss", "init_val_loss", "train_loss", "val_loss",
                                              "best_val_loss", "final_train_loss")}

    @property
    def best(self) -> float:
        return self.best_val_loss[-1] if self.best_val_loss else self.init_val_loss


@dataclass
class LayerReport:
    stage1: StageReport
    stage2: StageReport


def _eval_loss(q: QuantizedLayer, Xs: np.ndarray, Ys: np.ndarray, batch_size: int) -> float:
    tot, n = 0.0, 0
    for i in range(0, Xs.shape[0], batch_size):
        X, Y = flat(Xs[i : i + batch_size]), flat(Ys[i : i + batch_size])
        loss, _ = huber_loss(q(X), Y)
        tot += loss * X.shape[0]
        n += X.shape[0]
    return tot / n


def _run_stage(q: QuantizedLayer, stage: int, Xp, Y, Xv, Yv, cfg: TrainConfig, rng_seed: int) -> tuple[QuantizedLayer, StageReport]:
    nb = -(-Xp.shape[0] // cfg.batch_size)
    total = cfg.epochs_per_stage * nb
    report = StageReport(_eval_loss(q, Xp, Y, cfg.batch_size), _eval_loss(q, Xv, Yv, cfg.batch_size))
    best, best_val = q.clone(), report.init_val_loss
    opt = AdamW()
    step = 0
    for epoch in range(cfg.epochs_per_stage):
        order = Rng(rng_seed * 1_000_033 + epoch).shuffle(range(nb))
        losses = []
        for b in order:
            sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
            X, target = flat(Xp[sl]), flat(Y[sl])
            cache: dict = {}
            loss, dout = huber_loss(q.forward(X, cache=cache), target)
            if not np.isfinite(loss):
                raise CalibrationError(f"stage {stage} epoch {epoch}: non-finite loss {loss}")
            grads = backward_layer(q, cache, dout)
            for name, lin in q.linears.items():
                for kind, p in lin.params(stage).items():
                    lr = cosine_lr(step, LrSchedule(cfg.lr(kind), total))
                    opt.step(f"{name}/{kind.value}", p, grads[name][kind], lr)
                np.maximum(lin.bundle.alpha, 1e-4, out=lin.bundle.alpha)
                if lin.scales is not None:
                    np.maximum(lin.scales, EPS, out=lin.scales)
            losses.append(loss)
            step += 1
        val = _eval_loss(q, Xv, Yv, cfg.batch_size)
        if not np.isfinite(val):
            raise CalibrationError(f"stage {stage} epoch {epoch}: non-finite validation loss")
        if val < best_val:
            best, best_val = q.clone(), val
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(val)
        report.best_val_loss.append(best_val)
        log.info("stage %d epoch %d train %.6g val %.6g best %.6g", stage, epoch, report.train_loss[-1], val, best_val)
    report.final_train_loss = _eval_loss(best, Xp, Y, cfg.batch_size)
    report.optimizer = opt
    return best, report


def optimize_layer(layer: ToyDecoderLayer, Xp, Y, Xv, Yv, cfg: TrainConfig, rng: Rng) -> tuple[QuantizedLayer, LayerReport]:
    """Two-stage optimization of one layer.

    ``Xp``/``Xv`` are (samples, seq, D) inputs from the already-quantized prefix;
    ``Y``/``Yv`` are the full-precision layer's outputs on the original inputs.
    """
    q = init_quantized_layer(layer, cfg.spec, cfg.K, cfg.N, rng)
    seed = rng.next_u64() & 0xFFFFFFFF
    q, r1 = _run_stage(q, 1, Xp, Y, Xv, Yv, cfg, seed)
    q.fold()
    q, r2 = _run_stage(q, 2, Xp, Y, Xv, Yv, cfg, seed + 1)
    return q, LayerReport(r1, r2)


def _apply(f, Xs: np.ndarray, chunk: int = 16) -> np.ndarray:
    out = np.empty_like(Xs)
    for i in range(0, Xs.shape[0], chunk):
        sl = Xs[i : i + chunk]
        out[i : i + chunk] = f(flat(sl)).reshape(sl.shape)
    return out


@dataclass
class ModelRun:
    layers: list[QuantizedLayer]
    reports: list[LayerReport]
    layer_inputs: list[np.ndarray]  # X' fed to each layer during training


def quantize_model(layers: list[ToyDecoderLayer], calib: CalibrationData, cfg: TrainConfig) -> ModelRun:
    rng = Rng(cfg.seed)
    X, Xp = calib.train, calib.train
    Xv, Xvp = calib.val, calib.val
    out, reports, inputs = [], [], []
    for idx, layer in enumerate(layers):
        Y, Yv = _apply(layer, X), _apply(layer, Xv)
        inputs.append(Xp)
        q, rep = optimize_layer(layer, Xp, Y, Xvp, Yv, cfg, rng)
        log.info("layer %d: stage1 best val %.6g, stage2 best val %.6g", idx, rep.stage1.best, rep.stage2.best)
        out.append(q)
        reports.append(rep)
        if cfg.propagate == "quantized":
            Xp, Xvp = _apply(q, Xp), _apply(q, Xvp)
        else:
            Xp, Xvp = _apply(q, X), _apply(q, Xv)
        X, Xv = Y, Yv
    return ModelRun(out, reports, inputs)


def rtn_layer(layer: ToyDecoderLayer, spec: QuantSpec) -> QuantizedLayer:
    """Plain RTN baseline: identity transform, min/max quantizer, no tuning."""
    q = init_quantized_layer(layer, spec, 0, 1, Rng(0))
    q.fold()
    return q


def model_forward(layers, X: np.ndarray) -> np.ndarray:
    for l in layers:
        X = l(X)
    return X


def config_dict(cfg) -> dict:
    return asdict(cfg)


def save_model(path, layers: list[ToyDecoderLayer]) -> None:
    tensors = []
    for i, l in enumerate(layers):
        tensors += [Tensor(f"layer{i}.w_up", l.w_up, "weight"), Tensor(f"layer{i}.w_down", l.w_down, "weight")]
        if l.b_up is not None:
            tensors.append(Tensor(f"layer{i}.b_up", l.b_up, "bias"))
        if l.b_down is not None:
            tensors.append(Tensor(f"layer{i}.b_down", l.b_down, "bias"))
    save_tensors(path, tensors, {"num_layers": len(layers), "residual": [l.residual for l in layers]})


def load_model(path) -> list[ToyDecoderLayer]:
    tensors, meta = load_tensors(path)
    try:
        n = int(meta["num_layers"])
        residual = meta.get("residual", [True] * n)

        def get(name):
            t = tensors.get(name)
            return None if t is None else t.data.astype(np.float32)

        return [
            ToyDecoderLayer(get(f"layer{i}.w_up"), get(f"layer{i}.w_down"), get(f"layer{i}.b_up"),
                            get(f"layer{i}.b_down"), bool(residual[i]))
            for i in range(n)
        ]
    except (KeyError, AttributeError, ValueError, IndexError) as e:
        raise FormatError(f"{path}: not a model file ({e})") from None
