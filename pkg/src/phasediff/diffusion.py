"""Classification diffusion over label embeddings, conditioned on z.

Forward: y_t = sqrt(a_t) y_0 + (1 - sqrt(a_t)) z + sqrt(1 - a_t) eps, so the
chain interpolates between the one-hot label and the encoder's coarse
estimate instead of decaying to zero.  Reverse: trajectories start at
y_T ~ N(z, I); each step predicts the noise, inverts the marginal to get an
estimate of y_0, and draws the conjugate posterior step toward it.  The final
step emits the y_0 estimate directly.

m independent trajectories per frame form the predictive distribution; their
noise comes from counter-based streams keyed by (seed, video, frame,
timestep) with the trajectory index selecting the row, so a frame's
trajectories are identical whether it is processed inside a prefix or the
full sequence, serially or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import rng as prng
from .errors import PhasediffError, ShapeError
from .networks import (
    EncoderSpec,
    PredictorSpec,
    cross_entropy,
    encode_sequence,
    predictor_params,
)
from .numerics import ParamVector
from .schedule import DiffusionSchedule, pair_coefficients, timestep_subsequence

__all__ = [
    "DiffusionSample", "TrajectorySet", "one_hot",
    "forward_sample", "invert_marginal", "noise_loss", "frame_loss",
    "ElboTerms", "gaussian_kl", "elbo_terms",
    "reverse_infer", "aggregate_prediction", "infer_video", "InferenceResult",
]


def one_hot(label: int, classes: int) -> np.ndarray:
    label = int(label)
    if not (0 <= label < classes):
        raise ShapeError("one_hot", f"label {label} out of range for {classes} classes")
    out = np.zeros(classes)
    out[label] = 1.0
    return out


@dataclass(frozen=True)
class DiffusionSample:
    """One draw of the forward marginal, with the noise that produced it."""

    y_t: np.ndarray
    t: int
    eps: np.ndarray


@dataclass
class TrajectorySet:
    """m reverse-process outcomes (raw y_0 estimates) for one frame.

    Rows are exchangeable: trajectory r is a pure function of the stream
    keyed by (seed, video, frame, timestep) at row r.
    """

    outcomes: np.ndarray  # (m, C)
    stream_key: tuple = field(default=())

    @property
    def m(self) -> int:
        return self.outcomes.shape[0]

    def probs(self) -> np.ndarray:
        """Softmax-normalized rows (trajectory-level class probabilities)."""
        return K.softmax_rows(self.outcomes)


def forward_sample(s: DiffusionSchedule, y0: np.ndarray, z: np.ndarray, t: int,
                   rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> DiffusionSample:
    """Draw y_t | y_0, z at an arbitrary timestep; eps can be forced for tests."""
    y0 = np.asarray(y0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y0.shape != z.shape:
        raise ShapeError("forward_sample", f"y0 {y0.shape} vs z {z.shape}")
    root, one_minus_root, sd = s.marginal(t)
    if eps is None:
        if rng is None:
            raise PhasediffError("forward_sample: provide rng or eps")
        eps = rng.standard_normal(y0.shape)
    eps = np.asarray(eps, dtype=np.float64)
    y_t = root * y0 + one_minus_root * z + sd * eps
    return DiffusionSample(y_t=y_t, t=int(t), eps=eps)


def invert_marginal(s: DiffusionSchedule, t: int, y_t: np.ndarray, z: np.ndarray,
                    eps_hat: np.ndarray) -> np.ndarray:
    """Recover the y_0 estimate from y_t and a noise estimate (exact inverse)."""
    root, one_minus_root, sd = s.marginal(t)
    return (np.asarray(y_t) - one_minus_root * np.asarray(z) - sd * np.asarray(eps_hat)) / root


def noise_loss(s: DiffusionSchedule, predict_fn, y0: np.ndarray, z: np.ndarray, t: int,
               rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> float:
    """Squared error between drawn and predicted noise for one frame."""
    sample = forward_sample(s, y0, z, t, rng=rng, eps=eps)
    eps_hat = np.asarray(predict_fn(sample.y_t, z, t))
    if eps_hat.shape != sample.eps.shape:
        raise ShapeError("noise_loss", f"prediction {eps_hat.shape} vs noise {sample.eps.shape}")
    diff = sample.eps - eps_hat
    return float(diff @ diff)


def frame_loss(s: DiffusionSchedule, predict_fn, z: np.ndarray, label: int, t: int,
               rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> float:
    """Per-frame training objective: noise loss plus cross entropy."""
    y0 = one_hot(label, np.asarray(z).shape[0])
    return noise_loss(s, predict_fn, y0, z, t, rng=rng, eps=eps) + cross_entropy(z, label)


# ---------------------------------------------------------------------------
# evidence-bound diagnostics (small T only)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElboTerms:
    reconstruction: float
    step_kls: np.ndarray  # index 0 corresponds to t = 2
    terminal_kl: float

    def total(self) -> float:
        return float(self.reconstruction + np.sum(self.step_kls) + self.terminal_kl)


def gaussian_kl(mu_q: np.ndarray, var_q: float, mu_p: np.ndarray, var_p: float) -> float:
    """KL between diagonal Gaussians with scalar variances."""
    mu_q = np.atleast_1d(np.asarray(mu_q, dtype=np.float64))
    mu_p = np.atleast_1d(np.asarray(mu_p, dtype=np.float64))
    if mu_q.shape != mu_p.shape:
        raise ShapeError("gaussian_kl", f"means {mu_q.shape} vs {mu_p.shape}")
    d = mu_q.size
    ratio = var_q / var_p
    sq = float(np.sum((mu_q - mu_p) ** 2))
    return 0.5 * (d * ratio + sq / var_p - d - d * np.log(ratio))


def elbo_terms(s: DiffusionSchedule, y0: np.ndarray, z: np.ndarray, y_chain: np.ndarray,
               pred_means: np.ndarray, recon_mean: np.ndarray) -> ElboTerms:
    """Evidence-bound terms for one frame, given concrete chain samples.

    y_chain[t-1] is a sample of y_t (t = 1..T); pred_means[t-2] is the model's
    posterior mean at t (t = 2..T); recon_mean is its y_0 estimate at t = 1.
    The t = 1 decoder is taken as N(recon_mean, beta_1 I).
    """
    y0 = np.asarray(y0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    T = s.T
    if y_chain.shape != (T, y0.size) or pred_means.shape != (T - 1, y0.size):
        raise ShapeError("elbo_terms", f"chain {y_chain.shape}, means {pred_means.shape}, T={T}")
    step_kls = np.empty(T - 1)
    for t in range(2, T + 1):
        g0, g1, g2, g3 = s.gamma0[t], s.gamma1[t], s.gamma2[t], s.gamma3[t]
        mu_q = g0 * y0 + g1 * y_chain[t - 1] + g2 * z
        var = float(g3 * s.beta[t])
        step_kls[t - 2] = gaussian_kl(mu_q, var, pred_means[t - 2], var)
    a, b, _ = s.marginal(T)
    terminal = gaussian_kl(a * y0 + b * z, float(s.one_minus_cum[T]), z, 1.0)
    beta1 = float(s.beta[1])
    sq = float(np.sum((y0 - recon_mean) ** 2))
    recon = 0.5 * (y0.size * np.log(2.0 * np.pi * beta1) + sq / beta1)
    return ElboTerms(recon, step_kls, terminal)


# ---------------------------------------------------------------------------
# reverse inference
# ---------------------------------------------------------------------------

def _subsequence_tables(s: DiffusionSchedule, steps) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = s.T if steps in (None, "full") else int(steps)
    ts = timestep_subsequence(s.T, k)
    S = len(ts)
    marg = np.empty((S, 3))
    for j, t in enumerate(ts):
        marg[j] = s.marginal(int(t))
    pair = np.empty((max(S - 1, 0), 4))
    for j in range(S - 1):
        pair[j] = pair_coefficients(s, int(ts[j]), int(ts[j + 1]))
    return ts, marg, pair


def reverse_infer(s: DiffusionSchedule, pred_spec: PredictorSpec, params: ParamVector,
                  z: np.ndarray, m: int, steps="full", stream_key: tuple = (0, "video", 0),
                  prefix: str = "pred.", predict_override=None) -> TrajectorySet:
    """Run m reverse trajectories for one frame.

    `steps` is "full" for the whole chain or an integer subsequence length.
    `stream_key` is (seed, video id, frame index); update noise at timestep t
    comes from the stream keyed by (*stream_key, t), row = trajectory index.
    `predict_override(y_t, z, t)` replaces the noise net (testing hook).
    """
    if m < 1:
        raise PhasediffError("reverse_infer: need at least one trajectory")
    z = np.asarray(z, dtype=np.float64)
    ts, marg, pair = _subsequence_tables(s, steps)
    seed, video, frame = stream_key
    noise_init = prng.noise_block(seed, ("traj-init", video, frame), (m, z.size))
    noise_steps = np.empty((len(ts) - 1, m, z.size))
    for j in range(len(ts) - 1):
        noise_steps[j] = prng.noise_block(seed, ("traj-step", video, frame, int(ts[j + 1])),
                                          (m, z.size))
    if predict_override is not None:
        out = _reverse_chain_callable(z, predict_override, ts, marg, pair, noise_init, noise_steps)
    else:
        tfracs = ts.astype(np.float64) / float(s.T)
        out = K.reverse_chain(z, predictor_params(params, prefix), tfracs, marg, pair,
                              noise_init, noise_steps)
    return TrajectorySet(outcomes=out, stream_key=tuple(stream_key) + (int(m),))


def _reverse_chain_callable(z, predict_fn, ts, marg, pair, noise_init, noise_steps):
    m = noise_init.shape[0]
    zb = np.repeat(z[None, :], m, axis=0)
    y = zb + noise_init
    for j, t in enumerate(ts):
        eps_hat = np.stack([np.asarray(predict_fn(y[r], z, int(t))) for r in range(m)])
        root, one_minus_root, sd = marg[j]
        y0 = (y - one_minus_root * zb - sd * eps_hat) / root
        if j == len(ts) - 1:
            return y0
        g0, g1, g2, std = pair[j]
        y = g0 * y0 + g1 * y + g2 * zb + std * noise_steps[j]
    return y0


def aggregate_prediction(ts: TrajectorySet, rule: str = "majority"):
    """Reduce a trajectory set to (label, mean class probabilities).

    majority: vote over per-trajectory argmax, ties to the smaller class id.
    max_prob: class holding the single highest probability across rows.
    """
    if ts.outcomes.shape[0] < 1:
        raise PhasediffError("aggregate_prediction: empty trajectory set")
    probs = ts.probs()
    mean_probs = probs.mean(axis=0)
    if rule == "majority":
        votes = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1])
        label = int(np.argmax(votes))
    elif rule == "max_prob":
        label = int(np.argmax(np.max(probs, axis=0)))
    else:
        raise PhasediffError(f"aggregate_prediction: unknown rule {rule!r}")
    return label, mean_probs


@dataclass
class InferenceResult:
    """Per-frame predictions for one video (streaming order preserved)."""

    video_id: str
    labels: np.ndarray                 # (L,) predicted class ids
    mean_probs: np.ndarray             # (L, C)
    trajectories: list | None          # list[TrajectorySet] when diffusion ran
    z: np.ndarray                      # (L, C) encoder output


def infer_video(s: DiffusionSchedule, enc_spec: EncoderSpec, pred_spec: PredictorSpec,
                theta: ParamVector, features: np.ndarray, m: int, steps="full",
                seed: int = 0, video_id: str = "video", use_cdm: bool = True,
                rule: str = "majority") -> InferenceResult:
    """Online inference over one feature sequence.

    z is computed causally; each frame's trajectories depend only on its own
    keyed streams, so predictions for a prefix equal the prefix of the full
    run's predictions.
    """
    z = encode_sequence(enc_spec, theta, features)
    L = z.shape[0]
    if not use_cdm:
        return InferenceResult(video_id, np.argmax(z, axis=1).astype(np.int64),
                               z.copy(), None, z)
    labels = np.empty(L, dtype=np.int64)
    mean_probs = np.empty_like(z)
    trajs = []
    for i in range(L):
        ts_set = reverse_infer(s, pred_spec, theta, z[i], m, steps,
                               stream_key=(seed, video_id, i))
        labels[i], mean_probs[i] = aggregate_prediction(ts_set, rule)
        trajs.append(ts_set)
    return InferenceResult(video_id, labels, mean_probs, trajs, z)
