"""The three trainable components.

* ConditionEncoder: a causal gated recurrent cell over per-frame features,
  projected through an affine + softmax onto the class simplex.  Row i of the
  output depends only on frames 1..i, bit-identically.
* NoisePredictor: consumes [y_t, z] plus a learned embedding of the
  normalized timestep; the first hidden layer is gated by the timestep
  embedding (elementwise product, then softplus).
* MetaWeightNet: scalar per-frame loss -> weight in (0, 1) via one hidden
  rectifier layer and a sigmoid output.

Each component exists twice: the fused kernel route used by training and
inference, and a tape-graph route used as the differentiation oracle.  Tests
pin the two against each other and against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import numerics as nm
from .errors import PhasediffError, ShapeError

__all__ = [
    "EncoderSpec", "PredictorSpec", "WeightNetSpec",
    "init_params", "init_theta", "init_weightnet",
    "encoder_params", "predictor_params", "weightnet_params",
    "encode_sequence", "encoder_apply", "predict_noise", "predict_noise_batch",
    "frame_weight", "frame_weights", "cross_entropy", "cross_entropy_batch",
    "encoder_graph", "frame_loss_graph", "predictor_loss_graph", "weightnet_graph",
    "CE_PROB_FLOOR",
]

CE_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EncoderSpec:
    feature_dim: int
    classes: int
    hidden: int = 512

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, c = self.feature_dim, self.hidden, self.classes
        return {
            "gru.wz": (h, d), "gru.uz": (h, h), "gru.bz": (h,),
            "gru.wr": (h, d), "gru.ur": (h, h), "gru.br": (h,),
            "gru.wh": (h, d), "gru.uh": (h, h), "gru.bh": (h,),
            "proj.w": (c, h), "proj.b": (c,),
        }


@dataclass(frozen=True)
class PredictorSpec:
    classes: int
    width: int = 512

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c, w = self.classes, self.width
        return {
            "temb.w": (w, 1), "temb.b": (w,),
            "l1.w": (w, 2 * c), "l1.b": (w,),
            "l2.w": (w, w), "l2.b": (w,),
            "l3.w": (w, w), "l3.b": (w,),
            "out.w": (c, w), "out.b": (c,),
        }


@dataclass(frozen=True)
class WeightNetSpec:
    hidden: int = 100

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden
        return {"h.w": (h, 1), "h.b": (h,), "out.w": (1, h), "out.b": (1,)}


def init_params(shapes: dict, rng: np.random.Generator, dtype=np.float64) -> nm.ParamVector:
    """Weights uniform in +-1/sqrt(fan_in), biases zero, in layout order."""
    pv = nm.ParamVector.zeros(shapes, dtype=dtype)
    for name, shape in shapes.items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            pv.view(name)[...] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return pv


def init_theta(enc: EncoderSpec, pred: PredictorSpec, rng: np.random.Generator,
               dtype=np.float64) -> nm.ParamVector:
    """Encoder and predictor packaged into one parameter vector."""
    shapes = {f"enc.{k}": v for k, v in enc.shapes().items()}
    shapes.update({f"pred.{k}": v for k, v in pred.shapes().items()})
    return init_params(shapes, rng, dtype)


def init_weightnet(spec: WeightNetSpec, rng: np.random.Generator, dtype=np.float64) -> nm.ParamVector:
    return init_params(spec.shapes(), rng, dtype)


def _tuple(params: nm.ParamVector, prefix: str, names) -> tuple:
    return tuple(params.view(prefix + n) for n in names)


def encoder_params(params: nm.ParamVector, prefix: str = "enc."):
    gru = _tuple(params, prefix, ["gru.wz", "gru.uz", "gru.bz", "gru.wr", "gru.ur",
                                  "gru.br", "gru.wh", "gru.uh", "gru.bh"])
    return gru, params.view(prefix + "proj.w"), params.view(prefix + "proj.b")


def predictor_params(params: nm.ParamVector, prefix: str = "pred."):
    return _tuple(params, prefix, ["temb.w", "temb.b", "l1.w", "l1.b", "l2.w", "l2.b",
                                   "l3.w", "l3.b", "out.w", "out.b"])


def weightnet_params(params: nm.ParamVector):
    return _tuple(params, "", ["h.w", "h.b", "out.w", "out.b"])


# ---------------------------------------------------------------------------
# kernel-backed forward ops
# ---------------------------------------------------------------------------

def encoder_apply(spec: EncoderSpec, params: nm.ParamVector, x: np.ndarray, prefix: str = "enc."):
    """Batched encoder pass: x (B, L, D) -> (hidden states, simplex rows, gru cache)."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != spec.feature_dim:
        raise ShapeError("encoder_apply", f"expected (B, L, {spec.feature_dim}), got {x.shape}")
    gru, pw, pb = encoder_params(params, prefix)
    hs, cache = K.gru_forward(x, gru)
    z = K.proj_forward(hs, pw, pb)
    return hs, z, cache


def encode_sequence(spec: EncoderSpec, params: nm.ParamVector, features: np.ndarray,
                    prefix: str = "enc.") -> np.ndarray:
    """Coarse phase representations z for one sequence: (L, D) -> (L, C) simplex rows."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ShapeError("encode_sequence", f"expected (L, D), got {features.shape}")
    if features.shape[0] < 1:
        raise ShapeError("encode_sequence", "empty sequence")
    if not np.all(np.isfinite(features)):
        raise PhasediffError("encode_sequence: non-finite features")
    _, z, _ = encoder_apply(spec, params, features[None], prefix)
    return z[0]


def predict_noise_batch(spec: PredictorSpec, params: nm.ParamVector, y_t: np.ndarray,
                        z: np.ndarray, t: int, T: int, prefix: str = "pred."):
    """(B, C) x (B, C) x timestep -> predicted noise (B, C) plus kernel cache."""
    y_t = np.asarray(y_t)
    z = np.asarray(z)
    if y_t.shape != z.shape or y_t.ndim != 2 or y_t.shape[1] != spec.classes:
        raise ShapeError("predict_noise", f"y_t {y_t.shape} vs z {z.shape}, classes {spec.classes}")
    if not (1 <= int(t) <= int(T)):
        raise ShapeError("predict_noise", f"timestep {t} outside [1, {T}]")
    u = np.concatenate([y_t, z], axis=1)
    tfrac = np.full(y_t.shape[0], float(t) / float(T), dtype=u.dtype)
    out, cache = K.mlp_forward(u, tfrac, predictor_params(params, prefix))
    return out, cache


def predict_noise(spec: PredictorSpec, params: nm.ParamVector, y_t: np.ndarray, z: np.ndarray,
                  t: int, T: int, prefix: str = "pred.") -> np.ndarray:
    out, _ = predict_noise_batch(spec, params, np.asarray(y_t)[None], np.asarray(z)[None],
                                 t, T, prefix)
    return out[0]


def frame_weights(spec: WeightNetSpec, params: nm.ParamVector, losses: np.ndarray):
    """Per-frame weights in (0,1) plus cache for the w-gradient."""
    losses = np.asarray(losses, dtype=params.dtype)
    if not np.all(np.isfinite(losses)):
        raise PhasediffError("frame_weight: non-finite loss input")
    return K.wnet_forward(losses, weightnet_params(params))


def frame_weight(spec: WeightNetSpec, params: nm.ParamVector, loss: float) -> float:
    w, _ = frame_weights(spec, params, np.asarray([loss]))
    return float(w[0])


def cross_entropy(z_row: np.ndarray, label: int) -> float:
    """-log z[label], with probabilities clamped at CE_PROB_FLOOR."""
    z_row = np.asarray(z_row)
    label = int(label)
    if not (0 <= label < z_row.shape[-1]):
        raise ShapeError("cross_entropy", f"label {label} out of range for {z_row.shape[-1]} classes")
    return float(-np.log(max(float(z_row[label]), CE_PROB_FLOOR)))


def cross_entropy_batch(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ShapeError("cross_entropy", f"labels out of range for {z.shape[1]} classes")
    probs = z[np.arange(z.shape[0]), labels]
    return -np.log(np.maximum(probs, CE_PROB_FLOOR))


# ---------------------------------------------------------------------------
# tape-graph builders (differentiation oracle route)
# ---------------------------------------------------------------------------

def _cell(p, xv, hv, prefix, zeros_h):
    az = nm.affine(xv, p[prefix + "gru.wz"], p[prefix + "gru.bz"]) + nm.affine(hv, p[prefix + "gru.uz"], zeros_h)
    zg = nm.sigmoid(az)
    ar = nm.affine(xv, p[prefix + "gru.wr"], p[prefix + "gru.br"]) + nm.affine(hv, p[prefix + "gru.ur"], zeros_h)
    rg = nm.sigmoid(ar)
    ah = nm.affine(xv, p[prefix + "gru.wh"], p[prefix + "gru.bh"]) + nm.affine(rg * hv, p[prefix + "gru.uh"], zeros_h)
    hc = nm.tanh(ah)
    one = hv.tape.leaf(np.ones_like(hv.val))
    return (one - zg) * hv + zg * hc


def _encode_vars(spec, p, inputs, prefix):
    tape = inputs[0].tape
    h = tape.leaf(np.zeros(spec.hidden))
    zeros_h = tape.leaf(np.zeros(spec.hidden))
    zs = []
    for xv in inputs:
        h = _cell(p, xv, h, prefix, zeros_h)
        zs.append(nm.softmax(nm.affine(h, p[prefix + "proj.w"], p[prefix + "proj.b"])))
    return zs


def encoder_graph(spec: EncoderSpec, length: int, frame: int | None = None,
                  prefix: str = "enc.") -> nm.Graph:
    """Graph producing z at `frame` (default: the last) from `length` feature rows."""
    frame = length - 1 if frame is None else int(frame)

    def build(p, inputs):
        return _encode_vars(spec, p, inputs, prefix)[frame]

    return nm.Graph({f"{prefix}{k}": v for k, v in spec.shapes().items()}, build, n_inputs=length)


def predictor_loss_graph(spec: PredictorSpec, t: int, T: int, eps: np.ndarray,
                         prefix: str = "pred.") -> nm.Graph:
    """Scalar ||eps - predicted eps||^2 with inputs (y_t, z)."""
    eps = np.asarray(eps, dtype=np.float64)

    def build(p, inputs):
        y_t, z = inputs
        out = _predictor_vars(spec, p, y_t, z, t, T, prefix)
        return nm.square_sum(y_t.tape.leaf(eps) - out)

    return nm.Graph({f"{prefix}{k}": v for k, v in spec.shapes().items()}, build, n_inputs=2)


def _predictor_vars(spec, p, y_t, z, t, T, prefix):
    tape = y_t.tape
    u = nm.concat(y_t, z)
    tfrac = tape.leaf(np.array([float(t) / float(T)]))
    e = nm.affine(tfrac, p[prefix + "temb.w"], p[prefix + "temb.b"])
    s1 = nm.softplus(nm.affine(u, p[prefix + "l1.w"], p[prefix + "l1.b"]) * e)
    s2 = nm.softplus(nm.affine(s1, p[prefix + "l2.w"], p[prefix + "l2.b"]))
    s3 = nm.softplus(nm.affine(s2, p[prefix + "l3.w"], p[prefix + "l3.b"]))
    return nm.affine(s3, p[prefix + "out.w"], p[prefix + "out.b"])


def weightnet_graph(spec: WeightNetSpec) -> nm.Graph:
    """Scalar frame weight from a scalar loss input (shape (1,))."""

    def build(p, inputs):
        (loss,) = inputs
        hidden = nm.relu(nm.affine(loss, p["h.w"], p["h.b"]))
        return nm.pick(nm.sigmoid(nm.affine(hidden, p["out.w"], p["out.b"])), 0)

    return nm.Graph(spec.shapes(), build, n_inputs=1)


def frame_loss_graph(enc: EncoderSpec, pred: PredictorSpec, length: int, label: int,
                     t: int, T: int, marg: tuple[float, float, float], eps: np.ndarray,
                     with_noise_term: bool = True) -> nm.Graph:
    """Full per-frame training loss at the last of `length` frames.

    marg is (sqrt cum alpha, 1 - sqrt, noise std) at timestep t; eps is the
    drawn noise.  Mirrors the fused kernel loss exactly, including both
    routes by which z enters the noise term (the y_t construction and the
    conditioning input).
    """
    eps = np.asarray(eps, dtype=np.float64)
    root, one_minus_root, sd = marg
    y0 = np.zeros(enc.classes)
    y0[int(label)] = 1.0
    const = root * y0 + sd * eps

    shapes = {f"enc.{k}": v for k, v in enc.shapes().items()}
    shapes.update({f"pred.{k}": v for k, v in pred.shapes().items()})

    def build(p, inputs):
        tape = inputs[0].tape
        z = _encode_vars(enc, p, inputs, "enc.")[length - 1]
        ce = -nm.log_clamped(nm.pick(z, int(label)), CE_PROB_FLOOR)
        if not with_noise_term:
            return ce
        y_t = tape.leaf(const) + nm.scale(z, one_minus_root)
        out = _predictor_vars(pred, p, y_t, z, t, T, "pred.")
        return nm.square_sum(tape.leaf(eps) - out) + ce

    return nm.Graph(shapes, build, n_inputs=length)
