"""Bilevel re-weighting trainer.

One training step runs three updates on a window of n frames and a balanced
meta batch of m frames:

  1. virtual step    theta_hat = theta - (alpha/n) sum_i h(L_i; w) grad L_i
  2. weight-net step w' = w - (beta/m) * hyper, with the exact one-step
     unrolled hypergradient  hyper = -(alpha/n) sum_i (G . grad L_i) dh/dw(L_i)
     where G is the meta-loss gradient at theta_hat
  3. actual step     theta' = theta - (alpha/n) sum_i h(L_i; w') grad L_i
     (optionally routed through Adam moments on the mean gradient)

Per-frame gradients grad L_i all share one forward pass; the weighted sums
in 1 and 3 are single backward passes with the weights folded into the loss
adjoints (exact, since the weights are constants there), and the inner
products G . grad L_i for every frame come from one forward-tangent pass
with direction G.  Tests pin these fused routes against materialized
per-example gradients and finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import rng as prng
from .data import MASKED, Corpus, MetaSet, PhaseSequence
from .errors import ConfigError, DataError, DivergenceError
from .networks import (
    CE_PROB_FLOOR,
    EncoderSpec,
    PredictorSpec,
    WeightNetSpec,
    encoder_params,
    frame_weights,
    init_theta,
    init_weightnet,
    predictor_params,
    weightnet_params,
)
from .numerics import ParamVector
from .schedule import DiffusionSchedule

__all__ = [
    "TrainerConfig", "AdamState", "ModelState", "SeqBatch", "InnerState",
    "init_model_state", "window_batch", "meta_context_batch",
    "forward_losses", "weighted_loss_grad", "loss_tangents", "hypergradient",
    "inner_virtual_update", "meta_weight_update", "outer_update",
    "train", "frame_weight_report",
]


@dataclass
class TrainerConfig:
    alpha: float = 1e-5            # step size for theta
    beta: float = 1e-3             # step size for w
    train_window: int = 256        # frames per training window (batch of 1 window)
    meta_batch: int = 32           # meta frames per step
    use_cdm: bool = True           # diffusion head on/off (ablation toggle)
    use_mlo: bool = True           # meta re-weighting on/off (ablation toggle)
    optimizer: str = "sgd"         # outer theta step: "sgd" | "adam"
    pretrain_steps: int = 0        # cross-entropy-only warmup for the encoder
    train_steps: int = 100
    meta_context_cap: int | None = None  # cap on meta-frame context length
    divergence_limit: float = 1e6

    def validate(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError(f"step sizes must be positive, got alpha={self.alpha}, beta={self.beta}")
        if self.train_window < 1 or self.meta_batch < 1:
            raise ConfigError("train_window and meta_batch must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.pretrain_steps < 0 or self.train_steps < 0:
            raise ConfigError("step counts must be non-negative")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Consume one (mean) gradient, return the update to subtract."""
        self.count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.count)
        vhat = self.v / (1.0 - self.beta2**self.count)
        return lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class ModelState:
    enc_spec: EncoderSpec
    pred_spec: PredictorSpec
    wnet_spec: WeightNetSpec
    theta: ParamVector
    w: ParamVector
    opt: AdamState | None = None
    step: int = 0


def init_model_state(enc_spec: EncoderSpec, pred_spec: PredictorSpec,
                     wnet_spec: WeightNetSpec, seed: int, optimizer: str = "sgd") -> ModelState:
    theta = init_theta(enc_spec, pred_spec, prng.stream(seed, "init", "theta"))
    w = init_weightnet(wnet_spec, prng.stream(seed, "init", "w"))
    opt = AdamState.zeros(theta.size) if optimizer == "adam" else None
    return ModelState(enc_spec, pred_spec, wnet_spec, theta, w, opt)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class SeqBatch:
    """Padded feature sequences with the positions that carry a loss."""

    feats: np.ndarray     # (B, Lmax, D)
    pos_b: np.ndarray     # (n,) sequence index of each loss position
    pos_t: np.ndarray     # (n,) time index of each loss position
    labels: np.ndarray    # (n,)

    @property
    def n(self) -> int:
        return self.labels.shape[0]


def window_batch(video: PhaseSequence, start: int, length: int) -> SeqBatch:
    """One contiguous window of a video; losses at its labeled frames."""
    stop = min(start + length, video.length)
    feats = video.features[start:stop][None]
    labels = video.labels[start:stop]
    pos_t = np.nonzero(labels != MASKED)[0].astype(np.int64)
    return SeqBatch(feats, np.zeros(pos_t.size, dtype=np.int64), pos_t,
                    labels[pos_t].astype(np.int64))


def meta_context_batch(videos: list[PhaseSequence], frames, cap: int | None) -> SeqBatch:
    """Per-frame causal contexts, padded to the longest; loss at each last frame."""
    ctxs = []
    labels = []
    for f in frames:
        v = videos[f.video_index]
        lo = 0 if cap is None else max(0, f.frame_index + 1 - int(cap))
        ctxs.append(v.features[lo : f.frame_index + 1])
        labels.append(f.label)
    lmax = max(c.shape[0] for c in ctxs)
    feats = np.zeros((len(ctxs), lmax, ctxs[0].shape[1]))
    pos_t = np.empty(len(ctxs), dtype=np.int64)
    for j, c in enumerate(ctxs):
        feats[j, : c.shape[0]] = c
        pos_t[j] = c.shape[0] - 1
    return SeqBatch(feats, np.arange(len(ctxs), dtype=np.int64), pos_t,
                    np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# fused loss engine
# ---------------------------------------------------------------------------

@dataclass
class ForwardPass:
    """Everything one forward pass caches for the backward/tangent passes."""

    batch: SeqBatch
    t: int
    T: int
    use_cdm: bool
    hs: np.ndarray
    z: np.ndarray
    gru_cache: tuple
    z_loss: np.ndarray          # (n, C) simplex rows at the loss positions
    ce: np.ndarray              # (n,)
    losses: np.ndarray          # (n,)
    marg: tuple[float, float, float] = (1.0, 0.0, 0.0)
    eps: np.ndarray | None = None
    eps_hat: np.ndarray | None = None
    mlp_cache: tuple | None = None


def forward_losses(ms: ModelState, sched: DiffusionSchedule, theta: ParamVector,
                   batch: SeqBatch, t: int, eps: np.ndarray | None,
                   use_cdm: bool) -> ForwardPass:
    """Per-frame losses (noise term + cross entropy) for every loss position."""
    gru, pw, pb = encoder_params(theta)
    hs, gru_cache = K.gru_forward(batch.feats, gru)
    z = K.proj_forward(hs, pw, pb)
    z_loss = z[batch.pos_b, batch.pos_t]
    probs = z_loss[np.arange(batch.n), batch.labels]
    ce = -np.log(np.maximum(probs, CE_PROB_FLOOR))
    fp = ForwardPass(batch, int(t), sched.T, use_cdm, hs, z, gru_cache, z_loss, ce, ce.copy())
    if use_cdm and batch.n > 0:
        marg = sched.marginal(t)
        root, one_minus_root, sd = marg
        y0 = np.zeros_like(z_loss)
        y0[np.arange(batch.n), batch.labels] = 1.0
        y_t = root * y0 + one_minus_root * z_loss + sd * eps
        u = np.concatenate([y_t, z_loss], axis=1)
        tfrac = np.full(batch.n, float(t) / float(sched.T))
        eps_hat, mlp_cache = K.mlp_forward(u, tfrac, predictor_params(theta))
        fp.marg = marg
        fp.eps = eps
        fp.eps_hat = eps_hat
        fp.mlp_cache = mlp_cache
        fp.losses = np.sum((eps - eps_hat) ** 2, axis=1) + ce
    return fp


def _gradient_segments(fp: ForwardPass, theta: ParamVector, weights: np.ndarray) -> dict:
    batch = fp.batch
    gru, pw, pb = encoder_params(theta)
    n = batch.n
    idx = np.arange(n)
    dz_loss = np.zeros_like(fp.z_loss)
    segs = {}
    if fp.use_cdm and n > 0:
        deps_hat = -2.0 * weights[:, None] * (fp.eps - fp.eps_hat)
        pred_grads, du = K.mlp_backward(fp.mlp_cache, predictor_params(theta), deps_hat)
        c = fp.z_loss.shape[1]
        dz_loss += du[:, c:] + fp.marg[1] * du[:, :c]
        for name, g in zip(K.MLP_PARAMS, pred_grads):
            segs[_MLP_SEG[name]] = g
    probs = fp.z_loss[idx, batch.labels]
    live = probs >= CE_PROB_FLOOR
    dz_loss[idx, batch.labels] += -weights * live / np.maximum(probs, CE_PROB_FLOOR)
    dz_full = np.zeros_like(fp.z)
    dz_full[batch.pos_b, batch.pos_t] = dz_loss
    gpw, gpb, dh = K.proj_backward(fp.hs, fp.z, pw, dz_full)
    gru_grads = K.gru_backward(fp.gru_cache, gru, dh)
    for name, g in zip(K.GRU_PARAMS, gru_grads):
        segs[f"enc.gru.{name}"] = g
    segs["enc.proj.w"] = gpw
    segs["enc.proj.b"] = gpb
    return segs


_MLP_SEG = {
    "wt": "pred.temb.w", "bt": "pred.temb.b",
    "w1": "pred.l1.w", "b1": "pred.l1.b",
    "w2": "pred.l2.w", "b2": "pred.l2.b",
    "w3": "pred.l3.w", "b3": "pred.l3.b",
    "w4": "pred.out.w", "b4": "pred.out.b",
}


def weighted_loss_grad(fp: ForwardPass, theta: ParamVector, weights: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_i weights_i * L_i at the forward pass's theta.

    Exact: weights are constants, so folding them into the loss adjoints is
    the same as summing weighted per-example gradients.
    """
    return theta.flatten_segments(_gradient_segments(fp, theta, np.asarray(weights, dtype=np.float64)))


def _tangent_tuple(theta: ParamVector, tangent: np.ndarray, prefix: str, names, seg_map=None):
    out = []
    for n in names:
        key = seg_map[n] if seg_map else f"{prefix}{n}"
        offset, shape = theta.layout[key]
        out.append(tangent[offset : offset + int(np.prod(shape))].reshape(shape))
    return tuple(out)


def loss_tangents(fp: ForwardPass, theta: ParamVector, tangent: np.ndarray) -> np.ndarray:
    """Directional derivatives (tangent . grad L_i) for every loss frame, one pass."""
    batch = fp.batch
    gru, pw, pb = encoder_params(theta)
    dgru = _tangent_tuple(theta, tangent, "enc.gru.", K.GRU_PARAMS)
    dhs = K.gru_jvp(fp.gru_cache, gru, dgru)
    dpw_off, dpw_shape = theta.layout["enc.proj.w"]
    dpw = tangent[dpw_off : dpw_off + pw.size].reshape(pw.shape)
    dpb_off, _ = theta.layout["enc.proj.b"]
    dpb = tangent[dpb_off : dpb_off + pb.size]
    dz = K.proj_jvp(fp.hs, fp.z, pw, dpw, dpb, dhs)
    dz_loss = dz[batch.pos_b, batch.pos_t]
    idx = np.arange(batch.n)
    probs = fp.z_loss[idx, batch.labels]
    live = probs >= CE_PROB_FLOOR
    d = -(live * dz_loss[idx, batch.labels]) / np.maximum(probs, CE_PROB_FLOOR)
    if fp.use_cdm and batch.n > 0:
        dpred = _tangent_tuple(theta, tangent, "", K.MLP_PARAMS, seg_map=_MLP_SEG)
        du = np.concatenate([fp.marg[1] * dz_loss, dz_loss], axis=1)
        deps_hat = K.mlp_jvp(fp.mlp_cache, predictor_params(theta), dpred, du)
        d = d + 2.0 * np.sum((fp.eps_hat - fp.eps) * deps_hat, axis=1)
    return d


def hypergradient(alpha: float, n: int, inner_products: np.ndarray,
                  weight_grads: np.ndarray) -> np.ndarray:
    """-(alpha/n) sum_i (G . grad L_i) * dh/dw(L_i); linear in alpha by construction."""
    return -(alpha / float(n)) * (inner_products @ weight_grads)


# ---------------------------------------------------------------------------
# the three updates
# ---------------------------------------------------------------------------

@dataclass
class InnerState:
    fp: ForwardPass
    weights: np.ndarray
    wnet_cache: tuple | None
    theta_hat: ParamVector
    alpha: float


def _check_finite(losses: np.ndarray, limit: float, step: int | None = None):
    if losses.size and (not np.all(np.isfinite(losses)) or np.max(losses) > limit):
        where = f" at step {step}" if step is not None else ""
        raise DivergenceError(
            f"training diverged{where}: max loss {np.max(losses):.3e}, "
            f"finite={bool(np.all(np.isfinite(losses)))}"
        )


def inner_virtual_update(ms: ModelState, sched: DiffusionSchedule, batch: SeqBatch,
                         t: int, eps: np.ndarray | None, cfg: TrainerConfig,
                         fixed_weights: float | None = None) -> InnerState:
    """Virtual step: theta_hat = theta - (alpha/n) sum h(L_i; w) grad L_i."""
    fp = forward_losses(ms, sched, ms.theta, batch, t, eps, cfg.use_cdm)
    _check_finite(fp.losses, cfg.divergence_limit)
    if fixed_weights is None:
        weights, wcache = frame_weights(ms.wnet_spec, ms.w, fp.losses)
    else:
        weights, wcache = np.full(batch.n, float(fixed_weights)), None
    if batch.n == 0:
        return InnerState(fp, weights, wcache, ms.theta.copy(), cfg.alpha)
    grad = weighted_loss_grad(fp, ms.theta, weights)
    theta_hat = ms.theta.like(ms.theta.data - (cfg.alpha / batch.n) * grad)
    return InnerState(fp, weights, wcache, theta_hat, cfg.alpha)


def meta_weight_update(ms: ModelState, sched: DiffusionSchedule, inner: InnerState,
                       meta_batch: SeqBatch, eps_meta: np.ndarray,
                       cfg: TrainerConfig) -> tuple[ParamVector, dict]:
    """Weight-net step from the exact one-step-unrolled hypergradient."""
    if inner.wnet_cache is None:
        raise ConfigError("meta_weight_update requires an inner state with learned weights")
    fp_meta = forward_losses(ms, sched, inner.theta_hat, meta_batch, inner.fp.t,
                             eps_meta, cfg.use_cdm)
    _check_finite(fp_meta.losses, cfg.divergence_limit)
    g_meta = weighted_loss_grad(fp_meta, inner.theta_hat, np.ones(meta_batch.n))
    d = loss_tangents(inner.fp, ms.theta, g_meta)
    gw = K.wnet_grad_w(inner.wnet_cache, weightnet_params(ms.w))
    hyper = hypergradient(inner.alpha, inner.fp.batch.n, d, gw)
    w_new = ms.w.like(ms.w.data - (cfg.beta / meta_batch.n) * hyper)
    diag = {"meta_loss": float(np.mean(fp_meta.losses)), "hyper_norm": float(np.linalg.norm(hyper))}
    return w_new, diag


def outer_update(ms: ModelState, inner: InnerState, w_new: ParamVector,
                 cfg: TrainerConfig, fixed_weights: float | None = None) -> np.ndarray:
    """Actual theta step, re-weighting the cached losses with the updated w."""
    n = inner.fp.batch.n
    if n == 0:
        return inner.weights
    if fixed_weights is None:
        weights, _ = frame_weights(ms.wnet_spec, w_new, inner.fp.losses)
    else:
        weights = np.full(n, float(fixed_weights))
    grad = weighted_loss_grad(inner.fp, ms.theta, weights)
    if cfg.optimizer == "adam":
        ms.theta.data -= ms.opt.step(grad / n, cfg.alpha)
    else:
        ms.theta.data = ms.theta.data - (cfg.alpha / n) * grad
    return weights


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def train(ms: ModelState, corpus: Corpus, meta_set: MetaSet | None,
          sched: DiffusionSchedule, cfg: TrainerConfig, seed: int,
          rng_state: dict | None = None, on_step=None) -> tuple[list[dict], dict]:
    """Run (pretrain + joint) steps, mutating ms in place.

    Draw order per step is fixed: video, window start, timestep t, window
    noise, then (joint phase with re-weighting only) meta indices and meta
    noise.  Returns (per-step log records, final RNG state); the RNG state
    plus ms.step make a resumed run bitwise identical to an uninterrupted one.
    """
    cfg.validate()
    train_videos = corpus.split("train")
    if not train_videos:
        raise DataError("corpus has no train split")
    if sum(int(np.sum(v.labels != MASKED)) for v in train_videos) == 0:
        raise DataError("no labeled frames in the train split; nothing to learn from")
    if cfg.use_mlo and cfg.train_steps > 0 and meta_set is None:
        raise ConfigError("re-weighting is enabled but no meta set was provided")

    gen = np.random.Generator(np.random.PCG64(prng.spawn_seed(seed, "train-loop")))
    if rng_state is not None:
        gen.bit_generator.state = rng_state

    total = cfg.pretrain_steps + cfg.train_steps
    logs = []
    classes = corpus.classes
    while ms.step < total:
        step = ms.step
        started = time.perf_counter()
        pretrain = step < cfg.pretrain_steps

        vi = int(gen.integers(len(train_videos)))
        video = train_videos[vi]
        span = min(cfg.train_window, video.length)
        start = int(gen.integers(0, video.length - span + 1))
        t = int(gen.integers(1, sched.T + 1))
        eps_window = gen.standard_normal((span, classes))
        batch = window_batch(video, start, span)
        eps = eps_window[batch.pos_t] if batch.n else None

        record = {"step": step, "phase": "pretrain" if pretrain else "joint",
                  "video": video.video_id, "t": t, "n": int(batch.n)}
        if batch.n == 0:
            record["skipped"] = True
            logs.append(record)
            ms.step += 1
            continue

        reweight = (not pretrain) and cfg.use_mlo
        use_cdm_now = (not pretrain) and cfg.use_cdm
        step_cfg = cfg if use_cdm_now == cfg.use_cdm else _with_cdm(cfg, use_cdm_now)

        if reweight:
            m = min(cfg.meta_batch, len(meta_set.frames))
            midx = gen.choice(len(meta_set.frames), size=m, replace=False)
            meta_frames = [meta_set.frames[int(j)] for j in midx]
            eps_meta = gen.standard_normal((m, classes))
            # meta sets index into the train split, matching build_meta_set
            meta_batch = meta_context_batch(train_videos, meta_frames, cfg.meta_context_cap)

            inner = inner_virtual_update(ms, sched, batch, t, eps, step_cfg)
            w_new, diag = meta_weight_update(ms, sched, inner, meta_batch, eps_meta, step_cfg)
            ms.w = w_new
            weights = outer_update(ms, inner, w_new, step_cfg)
            record.update(diag)
        else:
            inner = inner_virtual_update(ms, sched, batch, t, eps, step_cfg, fixed_weights=1.0)
            weights = outer_update(ms, inner, ms.w, step_cfg, fixed_weights=1.0)

        _check_finite(inner.fp.losses, cfg.divergence_limit, step)
        record.update({
            "loss_mean": float(np.mean(inner.fp.losses)),
            "ce_mean": float(np.mean(inner.fp.ce)),
            "weight_median": float(np.median(weights)),
            "weight_min": float(np.min(weights)),
            "weight_max": float(np.max(weights)),
            "wall_time_s": time.perf_counter() - started,
        })
        logs.append(record)
        ms.step += 1
        if on_step is not None:
            on_step(ms, record, gen.bit_generator.state)
    return logs, gen.bit_generator.state


def _with_cdm(cfg: TrainerConfig, use_cdm: bool) -> TrainerConfig:
    import dataclasses

    return dataclasses.replace(cfg, use_cdm=use_cdm)


def frame_weight_report(ms: ModelState, sched: DiffusionSchedule, corpus: Corpus,
                        per_phase: int, seed: int, cap: int | None = None,
                        use_cdm: bool = True) -> list[dict]:
    """Learned weights on a balanced sample of train frames (for weight exports).

    Uses a fixed mid-schedule timestep and keyed noise so the report is a
    deterministic function of (model, corpus, seed).
    """
    from .data import build_meta_set

    sample = build_meta_set(corpus.split("train"), corpus.classes, per_phase, seed)
    videos = corpus.split("train")
    batch = meta_context_batch(videos, sample.frames, cap)
    t = max(1, sched.T // 2)
    eps = prng.noise_block(seed, ("weight-report",), (batch.n, corpus.classes))
    fp = forward_losses(ms, sched, ms.theta, batch, t, eps, use_cdm)
    weights, _ = frame_weights(ms.wnet_spec, ms.w, fp.losses)
    rows = []
    for j, f in enumerate(sample.frames):
        rows.append({
            "phase": int(f.label),
            "video": videos[f.video_index].video_id,
            "frame": int(f.frame_index),
            "loss": float(fp.losses[j]),
            "weight": float(weights[j]),
        })
    return rows
