"""Backend parity: compiled core vs numpy reference on identical inputs."""

import numpy as np
import pytest

from phasediff._kernels import pyref

_core = pytest.importorskip("phasediff._kernels._core",
                            reason="compiled core not built")

RNG = np.random.default_rng(42)


def _gru_setup(B=3, L=9, D=4, H=6):
    x = RNG.standard_normal((B, L, D))
    shapes = [(H, D), (H, H), (H,), (H, D), (H, H), (H,), (H, D), (H, H), (H,)]
    params = tuple(RNG.standard_normal(s) * 0.4 for s in shapes)
    return x, params, shapes


def _mlp_setup(B=5, C=3, W=8):
    shapes = [(W, 1), (W,), (W, 2 * C), (W,), (W, W), (W,), (W, W), (W,), (C, W), (C,)]
    params = tuple(RNG.standard_normal(s) * 0.5 for s in shapes)
    u = RNG.standard_normal((B, 2 * C))
    tfrac = np.full(B, 0.37)
    return u, tfrac, params, shapes


def _close(a, b, tol=1e-12):
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


class TestGruParity:
    def test_forward(self):
        x, params, _ = _gru_setup()
        h_ref, _ = pyref.gru_forward(x, params)
        h_core, _ = _core.gru_forward(x, params)
        _close(h_ref, h_core)

    def test_backward(self):
        x, params, _ = _gru_setup()
        _, c_ref = pyref.gru_forward(x, params)
        _, c_core = _core.gru_forward(x, params)
        dh = RNG.standard_normal(c_ref[1].shape)
        for a, b in zip(pyref.gru_backward(c_ref, params, dh),
                        _core.gru_backward(c_core, params, dh)):
            _close(a, b)

    def test_jvp(self):
        x, params, shapes = _gru_setup()
        _, c_ref = pyref.gru_forward(x, params)
        _, c_core = _core.gru_forward(x, params)
        dparams = tuple(RNG.standard_normal(s) * 0.3 for s in shapes)
        _close(pyref.gru_jvp(c_ref, params, dparams),
               _core.gru_jvp(c_core, params, dparams))

    def test_cross_backend_cache(self):
        # a forward cache from one backend feeds the other's backward
        x, params, _ = _gru_setup()
        _, c_core = _core.gru_forward(x, params)
        dh = RNG.standard_normal(c_core[1].shape)
        ref = pyref.gru_backward(c_core, params, dh)
        core = _core.gru_backward(c_core, params, dh)
        for a, b in zip(ref, core):
            _close(a, b)


class TestMlpParity:
    def test_forward(self):
        u, tfrac, params, _ = _mlp_setup()
        o_ref, _ = pyref.mlp_forward(u, tfrac, params)
        o_core, _ = _core.mlp_forward(u, tfrac, params)
        _close(o_ref, o_core)

    def test_backward(self):
        u, tfrac, params, _ = _mlp_setup()
        _, c_ref = pyref.mlp_forward(u, tfrac, params)
        _, c_core = _core.mlp_forward(u, tfrac, params)
        dout = RNG.standard_normal((u.shape[0], params[-1].shape[0]))
        g_ref, du_ref = pyref.mlp_backward(c_ref, params, dout)
        g_core, du_core = _core.mlp_backward(c_core, params, dout)
        for a, b in zip(g_ref, g_core):
            _close(a, b)
        _close(du_ref, du_core)

    def test_jvp(self):
        u, tfrac, params, shapes = _mlp_setup()
        _, c_ref = pyref.mlp_forward(u, tfrac, params)
        _, c_core = _core.mlp_forward(u, tfrac, params)
        dparams = tuple(RNG.standard_normal(s) * 0.2 for s in shapes)
        du = RNG.standard_normal(u.shape)
        _close(pyref.mlp_jvp(c_ref, params, dparams, du),
               _core.mlp_jvp(c_core, params, dparams, du))


class TestChainParity:
    def test_reverse_chain(self):
        u, tfrac, params, _ = _mlp_setup(C=4, W=10)
        C = 4
        S, m = 7, 6
        z = RNG.standard_normal(C)
        tfracs = np.linspace(1.0, 0.1, S)
        marg = np.abs(RNG.standard_normal((S, 3))) * 0.3 + 0.5
        pair = RNG.standard_normal((S - 1, 4)) * 0.2 + 0.4
        noise_init = RNG.standard_normal((m, C))
        noise_steps = RNG.standard_normal((S - 1, m, C))
        r_ref = pyref.reverse_chain(z, params, tfracs, marg, pair, noise_init, noise_steps)
        r_core = _core.reverse_chain(z, params, tfracs, marg, pair, noise_init, noise_steps)
        _close(r_ref, r_core, tol=1e-11)


class TestDispatch:
    def test_float32_falls_back_to_python(self):
        from phasediff import _kernels as K

        x, params, _ = _gru_setup(B=1, L=3)
        x32 = x.astype(np.float32)
        params32 = tuple(p.astype(np.float32) for p in params)
        hs, _ = K.gru_forward(x32, params32)
        assert hs.dtype == np.float32

    def test_training_step_matches_between_backends(self):
        # one full fused training-gradient pass through both backends
        import phasediff.meta_opt as mo
        import phasediff.data as pdata
        from phasediff import rng as prng
        from phasediff.networks import EncoderSpec, PredictorSpec, WeightNetSpec
        from phasediff.schedule import build_linear_schedule
        import phasediff._kernels as K

        sched = build_linear_schedule(8, 1e-2, 0.1)
        ms = mo.init_model_state(EncoderSpec(4, 3, 6), PredictorSpec(3, 8),
                                 WeightNetSpec(5), seed=0)
        g = prng.stream(0, "par")
        video = pdata.PhaseSequence("v", g.standard_normal((7, 4)),
                                    g.integers(0, 3, size=7))
        batch = mo.window_batch(video, 0, 7)
        eps = g.standard_normal((batch.n, 3))
        grads = {}
        originals = (K._core,)
        try:
            for name, core in (("python", None), ("cython", originals[0])):
                K._core = core
                fp = mo.forward_losses(ms, sched, ms.theta, batch, 3, eps, True)
                grads[name] = mo.weighted_loss_grad(fp, ms.theta, np.ones(batch.n))
        finally:
            K._core = originals[0]
        np.testing.assert_allclose(grads["python"], grads["cython"], rtol=1e-11, atol=1e-13)
