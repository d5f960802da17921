# Compiled kernels: same math and cache layout as pyref.py, with the
# sequence loops and elementwise work in C and the matrix products on BLAS.
# Float64 only; the dispatcher in __init__.py falls back to pyref otherwise.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log1p, sqrt, tanh as ctanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double ONE = 1.0


cdef inline double _sigmoid(double x) nogil:
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    cdef double e = exp(x)
    return e / (1.0 + e)


cdef inline double _softplus(double x) nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


# y (B,O; row stride ldy) = beta*y + x (B,I; row stride ldx) @ w (O,I; contiguous).T
cdef inline void _xwt(double* x, int ldx, double* w, double* y, int ldy,
                      int B, int I, int O, double beta) nogil:
    dgemm("T", "N", &O, &B, &I, &ONE, w, &I, x, &ldx, &beta, y, &ldy)


# g (O,I; contiguous) = beta*g + d (B,O; row stride ldd).T @ x (B,I; row stride ldx)
cdef inline void _dtx(double* d, int ldd, double* x, int ldx, double* g,
                      int B, int O, int I, double beta) nogil:
    dgemm("N", "T", &I, &O, &B, &ONE, x, &ldx, d, &ldd, &beta, g, &I)


# y (B,I; row stride ldy) = beta*y + d (B,O; row stride ldd) @ w (O,I; contiguous)
cdef inline void _dw(double* d, int ldd, double* w, double* y, int ldy,
                     int B, int O, int I, double beta) nogil:
    dgemm("N", "N", &I, &B, &O, &ONE, w, &I, d, &ldd, &beta, y, &ldy)


# ---------------------------------------------------------------------------
# gated recurrent cell
# ---------------------------------------------------------------------------

def gru_forward(cnp.ndarray[double, ndim=3] x, params):
    cdef cnp.ndarray[double, ndim=2] wz = params[0], uz = params[1]
    cdef cnp.ndarray[double, ndim=1] bz = params[2]
    cdef cnp.ndarray[double, ndim=2] wr = params[3], ur = params[4]
    cdef cnp.ndarray[double, ndim=1] br = params[5]
    cdef cnp.ndarray[double, ndim=2] wh = params[6], uh = params[7]
    cdef cnp.ndarray[double, ndim=1] bh = params[8]

    cdef int B = x.shape[0], L = x.shape[1], D = x.shape[2], H = bz.shape[0]
    cdef cnp.ndarray[double, ndim=3] hs = np.empty((B, L, H))
    cdef cnp.ndarray[double, ndim=3] zgs = np.empty((B, L, H))
    cdef cnp.ndarray[double, ndim=3] rgs = np.empty((B, L, H))
    cdef cnp.ndarray[double, ndim=3] hcs = np.empty((B, L, H))
    cdef cnp.ndarray[double, ndim=2] h = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2] az = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] ar = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] ah = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] rh = np.empty((B, H))

    cdef int t, b, j, ldx = L * D
    cdef double zg, rg, hc
    with nogil:
        for t in range(L):
            _xwt(&x[0, t, 0], ldx, &wz[0, 0], &az[0, 0], H, B, D, H, 0.0)
            _xwt(&h[0, 0], H, &uz[0, 0], &az[0, 0], H, B, H, H, 1.0)
            _xwt(&x[0, t, 0], ldx, &wr[0, 0], &ar[0, 0], H, B, D, H, 0.0)
            _xwt(&h[0, 0], H, &ur[0, 0], &ar[0, 0], H, B, H, H, 1.0)
            for b in range(B):
                for j in range(H):
                    zg = _sigmoid(az[b, j] + bz[j])
                    rg = _sigmoid(ar[b, j] + br[j])
                    zgs[b, t, j] = zg
                    rgs[b, t, j] = rg
                    rh[b, j] = rg * h[b, j]
            _xwt(&x[0, t, 0], ldx, &wh[0, 0], &ah[0, 0], H, B, D, H, 0.0)
            _xwt(&rh[0, 0], H, &uh[0, 0], &ah[0, 0], H, B, H, H, 1.0)
            for b in range(B):
                for j in range(H):
                    hc = ctanh(ah[b, j] + bh[j])
                    hcs[b, t, j] = hc
                    h[b, j] = (1.0 - zgs[b, t, j]) * h[b, j] + zgs[b, t, j] * hc
                    hs[b, t, j] = h[b, j]
    return hs, (np.asarray(x), hs, zgs, rgs, hcs)


def gru_backward(cache, params, cnp.ndarray[double, ndim=3] dh_up):
    cdef cnp.ndarray[double, ndim=3] x = cache[0], hs = cache[1]
    cdef cnp.ndarray[double, ndim=3] zgs = cache[2], rgs = cache[3], hcs = cache[4]
    cdef cnp.ndarray[double, ndim=2] uz = params[1], ur = params[4], uh = params[7]

    cdef int B = x.shape[0], L = x.shape[1], D = x.shape[2], H = hs.shape[2]
    cdef cnp.ndarray[double, ndim=2] gwz = np.zeros((H, D)), guz = np.zeros((H, H))
    cdef cnp.ndarray[double, ndim=1] gbz = np.zeros(H)
    cdef cnp.ndarray[double, ndim=2] gwr = np.zeros((H, D)), gur = np.zeros((H, H))
    cdef cnp.ndarray[double, ndim=1] gbr = np.zeros(H)
    cdef cnp.ndarray[double, ndim=2] gwh = np.zeros((H, D)), guh = np.zeros((H, H))
    cdef cnp.ndarray[double, ndim=1] gbh = np.zeros(H)

    cdef cnp.ndarray[double, ndim=2] dnext = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2] dprev = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] dah = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] dar = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] daz = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] rh = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] hprev = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] drh = np.empty((B, H))

    cdef int t, b, j, ldx = L * D, ldh = L * H
    cdef double zg, rg, hc, hp, dcur, dzg, dhc
    with nogil:
        for t in range(L - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    hp = hs[b, t - 1, j] if t > 0 else 0.0
                    hprev[b, j] = hp
                    zg = zgs[b, t, j]
                    rg = rgs[b, t, j]
                    hc = hcs[b, t, j]
                    dcur = dh_up[b, t, j] + dnext[b, j]
                    dzg = dcur * (hc - hp)
                    dhc = dcur * zg
                    dprev[b, j] = dcur * (1.0 - zg)
                    dah[b, j] = dhc * (1.0 - hc * hc)
                    daz[b, j] = dzg * zg * (1.0 - zg)
                    rh[b, j] = rg * hp
            _dtx(&dah[0, 0], H, &x[0, t, 0], ldx, &gwh[0, 0], B, H, D, 1.0)
            _dtx(&dah[0, 0], H, &rh[0, 0], H, &guh[0, 0], B, H, H, 1.0)
            _dw(&dah[0, 0], H, &uh[0, 0], &drh[0, 0], H, B, H, H, 0.0)
            for b in range(B):
                for j in range(H):
                    gbh[j] += dah[b, j]
                    rg = rgs[b, t, j]
                    dar[b, j] = (drh[b, j] * hprev[b, j]) * rg * (1.0 - rg)
                    dprev[b, j] += drh[b, j] * rg
            _dtx(&dar[0, 0], H, &x[0, t, 0], ldx, &gwr[0, 0], B, H, D, 1.0)
            _dtx(&dar[0, 0], H, &hprev[0, 0], H, &gur[0, 0], B, H, H, 1.0)
            _dw(&dar[0, 0], H, &ur[0, 0], &dprev[0, 0], H, B, H, H, 1.0)
            _dtx(&daz[0, 0], H, &x[0, t, 0], ldx, &gwz[0, 0], B, H, D, 1.0)
            _dtx(&daz[0, 0], H, &hprev[0, 0], H, &guz[0, 0], B, H, H, 1.0)
            _dw(&daz[0, 0], H, &uz[0, 0], &dprev[0, 0], H, B, H, H, 1.0)
            for b in range(B):
                for j in range(H):
                    gbr[j] += dar[b, j]
                    gbz[j] += daz[b, j]
                    dnext[b, j] = dprev[b, j]
    return (gwz, guz, gbz, gwr, gur, gbr, gwh, guh, gbh)


def gru_jvp(cache, params, dparams):
    cdef cnp.ndarray[double, ndim=3] x = cache[0], hs = cache[1]
    cdef cnp.ndarray[double, ndim=3] zgs = cache[2], rgs = cache[3], hcs = cache[4]
    cdef cnp.ndarray[double, ndim=2] uz = params[1], ur = params[4], uh = params[7]
    cdef cnp.ndarray[double, ndim=2] dwz = dparams[0], duz = dparams[1]
    cdef cnp.ndarray[double, ndim=1] dbz = dparams[2]
    cdef cnp.ndarray[double, ndim=2] dwr = dparams[3], dur = dparams[4]
    cdef cnp.ndarray[double, ndim=1] dbr = dparams[5]
    cdef cnp.ndarray[double, ndim=2] dwh = dparams[6], duh = dparams[7]
    cdef cnp.ndarray[double, ndim=1] dbh = dparams[8]

    cdef int B = x.shape[0], L = x.shape[1], D = x.shape[2], H = hs.shape[2]
    cdef cnp.ndarray[double, ndim=3] dhs = np.empty((B, L, H))
    cdef cnp.ndarray[double, ndim=2] dh = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2] hprev = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2] daz = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] dar = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] dah = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] rh = np.empty((B, H))
    cdef cnp.ndarray[double, ndim=2] drh = np.empty((B, H))

    cdef int t, b, j, ldx = L * D
    cdef double zg, rg, hc, dzg, drg, dhc
    with nogil:
        for t in range(L):
            # daz = x dwz' + dh uz' + hprev duz' + dbz   (dar likewise)
            _xwt(&x[0, t, 0], ldx, &dwz[0, 0], &daz[0, 0], H, B, D, H, 0.0)
            _xwt(&dh[0, 0], H, &uz[0, 0], &daz[0, 0], H, B, H, H, 1.0)
            _xwt(&hprev[0, 0], H, &duz[0, 0], &daz[0, 0], H, B, H, H, 1.0)
            _xwt(&x[0, t, 0], ldx, &dwr[0, 0], &dar[0, 0], H, B, D, H, 0.0)
            _xwt(&dh[0, 0], H, &ur[0, 0], &dar[0, 0], H, B, H, H, 1.0)
            _xwt(&hprev[0, 0], H, &dur[0, 0], &dar[0, 0], H, B, H, H, 1.0)
            for b in range(B):
                for j in range(H):
                    rg = rgs[b, t, j]
                    drg = rg * (1.0 - rg) * (dar[b, j] + dbr[j])
                    rh[b, j] = rg * hprev[b, j]
                    drh[b, j] = drg * hprev[b, j] + rg * dh[b, j]
                    dar[b, j] = drg  # reuse as the rg tangent
            _xwt(&x[0, t, 0], ldx, &dwh[0, 0], &dah[0, 0], H, B, D, H, 0.0)
            _xwt(&drh[0, 0], H, &uh[0, 0], &dah[0, 0], H, B, H, H, 1.0)
            _xwt(&rh[0, 0], H, &duh[0, 0], &dah[0, 0], H, B, H, H, 1.0)
            for b in range(B):
                for j in range(H):
                    zg = zgs[b, t, j]
                    hc = hcs[b, t, j]
                    dzg = zg * (1.0 - zg) * (daz[b, j] + dbz[j])
                    dhc = (1.0 - hc * hc) * (dah[b, j] + dbh[j])
                    dh[b, j] = (-dzg) * hprev[b, j] + (1.0 - zg) * dh[b, j] \
                        + dzg * hc + zg * dhc
                    dhs[b, t, j] = dh[b, j]
                    hprev[b, j] = hs[b, t, j]
    return dhs


# ---------------------------------------------------------------------------
# noise-predictor MLP
# ---------------------------------------------------------------------------

def mlp_forward(cnp.ndarray[double, ndim=2] u, cnp.ndarray[double, ndim=1] tfrac, params):
    cdef cnp.ndarray[double, ndim=2] wt = params[0]
    cdef cnp.ndarray[double, ndim=1] bt = params[1]
    cdef cnp.ndarray[double, ndim=2] w1 = params[2]
    cdef cnp.ndarray[double, ndim=1] b1 = params[3]
    cdef cnp.ndarray[double, ndim=2] w2 = params[4]
    cdef cnp.ndarray[double, ndim=1] b2 = params[5]
    cdef cnp.ndarray[double, ndim=2] w3 = params[6]
    cdef cnp.ndarray[double, ndim=1] b3 = params[7]
    cdef cnp.ndarray[double, ndim=2] w4 = params[8]
    cdef cnp.ndarray[double, ndim=1] b4 = params[9]

    cdef int B = u.shape[0], U = u.shape[1], W = b1.shape[0], C = b4.shape[0]
    cdef cnp.ndarray[double, ndim=2] e = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] a1 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] m1 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] s1 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] a2 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] s2 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] a3 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] s3 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] out = np.empty((B, C))
    cdef int b, j
    with nogil:
        _xwt(&u[0, 0], U, &w1[0, 0], &a1[0, 0], W, B, U, W, 0.0)
        for b in range(B):
            for j in range(W):
                e[b, j] = tfrac[b] * wt[j, 0] + bt[j]
                a1[b, j] = a1[b, j] + b1[j]
                m1[b, j] = a1[b, j] * e[b, j]
                s1[b, j] = _softplus(m1[b, j])
        _xwt(&s1[0, 0], W, &w2[0, 0], &a2[0, 0], W, B, W, W, 0.0)
        for b in range(B):
            for j in range(W):
                a2[b, j] = a2[b, j] + b2[j]
                s2[b, j] = _softplus(a2[b, j])
        _xwt(&s2[0, 0], W, &w3[0, 0], &a3[0, 0], W, B, W, W, 0.0)
        for b in range(B):
            for j in range(W):
                a3[b, j] = a3[b, j] + b3[j]
                s3[b, j] = _softplus(a3[b, j])
        _xwt(&s3[0, 0], W, &w4[0, 0], &out[0, 0], C, B, W, C, 0.0)
        for b in range(B):
            for j in range(C):
                out[b, j] = out[b, j] + b4[j]
    return out, (np.asarray(u), np.asarray(tfrac), e, a1, m1, s1, a2, s2, a3, s3)


def mlp_backward(cache, params, cnp.ndarray[double, ndim=2] dout):
    cdef cnp.ndarray[double, ndim=2] u = cache[0]
    cdef cnp.ndarray[double, ndim=1] tfrac = cache[1]
    cdef cnp.ndarray[double, ndim=2] e = cache[2], a1 = cache[3], m1 = cache[4]
    cdef cnp.ndarray[double, ndim=2] s1 = cache[5], a2 = cache[6], s2 = cache[7]
    cdef cnp.ndarray[double, ndim=2] a3 = cache[8], s3 = cache[9]
    cdef cnp.ndarray[double, ndim=2] w1 = params[2], w2 = params[4]
    cdef cnp.ndarray[double, ndim=2] w3 = params[6], w4 = params[8]

    cdef int B = u.shape[0], U = u.shape[1], W = a1.shape[1], C = dout.shape[1]
    cdef cnp.ndarray[double, ndim=2] gwt = np.zeros((W, 1))
    cdef cnp.ndarray[double, ndim=1] gbt = np.zeros(W)
    cdef cnp.ndarray[double, ndim=2] gw1 = np.empty((W, U))
    cdef cnp.ndarray[double, ndim=1] gb1 = np.zeros(W)
    cdef cnp.ndarray[double, ndim=2] gw2 = np.empty((W, W))
    cdef cnp.ndarray[double, ndim=1] gb2 = np.zeros(W)
    cdef cnp.ndarray[double, ndim=2] gw3 = np.empty((W, W))
    cdef cnp.ndarray[double, ndim=1] gb3 = np.zeros(W)
    cdef cnp.ndarray[double, ndim=2] gw4 = np.empty((C, W))
    cdef cnp.ndarray[double, ndim=1] gb4 = np.zeros(C)
    cdef cnp.ndarray[double, ndim=2] ds = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] da3 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] da2 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] da1 = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] du = np.empty((B, U))
    cdef int b, j
    cdef double dm1, de
    with nogil:
        _dtx(&dout[0, 0], C, &s3[0, 0], W, &gw4[0, 0], B, C, W, 0.0)
        _dw(&dout[0, 0], C, &w4[0, 0], &ds[0, 0], W, B, C, W, 0.0)
        for b in range(B):
            for j in range(C):
                gb4[j] += dout[b, j]
        for b in range(B):
            for j in range(W):
                da3[b, j] = ds[b, j] * _sigmoid(a3[b, j])
        _dtx(&da3[0, 0], W, &s2[0, 0], W, &gw3[0, 0], B, W, W, 0.0)
        _dw(&da3[0, 0], W, &w3[0, 0], &ds[0, 0], W, B, W, W, 0.0)
        for b in range(B):
            for j in range(W):
                gb3[j] += da3[b, j]
                da2[b, j] = ds[b, j] * _sigmoid(a2[b, j])
        _dtx(&da2[0, 0], W, &s1[0, 0], W, &gw2[0, 0], B, W, W, 0.0)
        _dw(&da2[0, 0], W, &w2[0, 0], &ds[0, 0], W, B, W, W, 0.0)
        for b in range(B):
            for j in range(W):
                gb2[j] += da2[b, j]
                dm1 = ds[b, j] * _sigmoid(m1[b, j])
                da1[b, j] = dm1 * e[b, j]
                de = dm1 * a1[b, j]
                gwt[j, 0] += de * tfrac[b]
                gbt[j] += de
                gb1[j] += da1[b, j]
        _dtx(&da1[0, 0], W, &u[0, 0], U, &gw1[0, 0], B, W, U, 0.0)
        _dw(&da1[0, 0], W, &w1[0, 0], &du[0, 0], U, B, W, U, 0.0)
    return (gwt, gbt, gw1, gb1, gw2, gb2, gw3, gb3, gw4, gb4), du


def mlp_jvp(cache, params, dparams, cnp.ndarray[double, ndim=2] du):
    cdef cnp.ndarray[double, ndim=2] u = cache[0]
    cdef cnp.ndarray[double, ndim=1] tfrac = cache[1]
    cdef cnp.ndarray[double, ndim=2] e = cache[2], a1 = cache[3], m1 = cache[4]
    cdef cnp.ndarray[double, ndim=2] s1 = cache[5], a2 = cache[6], s2 = cache[7]
    cdef cnp.ndarray[double, ndim=2] a3 = cache[8], s3 = cache[9]
    cdef cnp.ndarray[double, ndim=2] w1 = params[2], w2 = params[4]
    cdef cnp.ndarray[double, ndim=2] w3 = params[6], w4 = params[8]
    cdef cnp.ndarray[double, ndim=2] dwt = dparams[0]
    cdef cnp.ndarray[double, ndim=1] dbt = dparams[1]
    cdef cnp.ndarray[double, ndim=2] dw1 = dparams[2]
    cdef cnp.ndarray[double, ndim=1] db1 = dparams[3]
    cdef cnp.ndarray[double, ndim=2] dw2 = dparams[4]
    cdef cnp.ndarray[double, ndim=1] db2 = dparams[5]
    cdef cnp.ndarray[double, ndim=2] dw3 = dparams[6]
    cdef cnp.ndarray[double, ndim=1] db3 = dparams[7]
    cdef cnp.ndarray[double, ndim=2] dw4 = dparams[8]
    cdef cnp.ndarray[double, ndim=1] db4 = dparams[9]

    cdef int B = u.shape[0], U = u.shape[1], W = a1.shape[1], C = dw4.shape[0]
    cdef cnp.ndarray[double, ndim=2] da = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] dsp = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] scratch = np.empty((B, W))
    cdef cnp.ndarray[double, ndim=2] dout = np.empty((B, C))
    cdef int b, j
    cdef double de, dm1
    with nogil:
        # first layer: da1 = u dw1' + du w1' + db1; dm1 = da1*e + a1*de
        _xwt(&u[0, 0], U, &dw1[0, 0], &da[0, 0], W, B, U, W, 0.0)
        _xwt(&du[0, 0], U, &w1[0, 0], &da[0, 0], W, B, U, W, 1.0)
        for b in range(B):
            for j in range(W):
                de = tfrac[b] * dwt[j, 0] + dbt[j]
                dm1 = (da[b, j] + db1[j]) * e[b, j] + a1[b, j] * de
                dsp[b, j] = _sigmoid(m1[b, j]) * dm1
        _xwt(&s1[0, 0], W, &dw2[0, 0], &da[0, 0], W, B, W, W, 0.0)
        _xwt(&dsp[0, 0], W, &w2[0, 0], &da[0, 0], W, B, W, W, 1.0)
        for b in range(B):
            for j in range(W):
                dsp[b, j] = _sigmoid(a2[b, j]) * (da[b, j] + db2[j])
        _xwt(&s2[0, 0], W, &dw3[0, 0], &da[0, 0], W, B, W, W, 0.0)
        _xwt(&dsp[0, 0], W, &w3[0, 0], &da[0, 0], W, B, W, W, 1.0)
        for b in range(B):
            for j in range(W):
                dsp[b, j] = _sigmoid(a3[b, j]) * (da[b, j] + db3[j])
        _xwt(&s3[0, 0], W, &dw4[0, 0], &dout[0, 0], C, B, W, C, 0.0)
        _xwt(&dsp[0, 0], W, &w4[0, 0], &dout[0, 0], C, B, W, C, 1.0)
        for b in range(B):
            for j in range(C):
                dout[b, j] = dout[b, j] + db4[j]
    return dout


# ---------------------------------------------------------------------------
# reverse-diffusion chain (m trajectories for one frame)
# ---------------------------------------------------------------------------

def reverse_chain(cnp.ndarray[double, ndim=1] z, mlp_params,
                  cnp.ndarray[double, ndim=1] tfracs,
                  cnp.ndarray[double, ndim=2] marg,
                  cnp.ndarray[double, ndim=2] pair,
                  cnp.ndarray[double, ndim=2] noise_init,
                  cnp.ndarray[double, ndim=3] noise_steps):
    cdef cnp.ndarray[double, ndim=2] wt = mlp_params[0]
    cdef cnp.ndarray[double, ndim=1] bt = mlp_params[1]
    cdef cnp.ndarray[double, ndim=2] w1 = mlp_params[2]
    cdef cnp.ndarray[double, ndim=1] b1 = mlp_params[3]
    cdef cnp.ndarray[double, ndim=2] w2 = mlp_params[4]
    cdef cnp.ndarray[double, ndim=1] b2 = mlp_params[5]
    cdef cnp.ndarray[double, ndim=2] w3 = mlp_params[6]
    cdef cnp.ndarray[double, ndim=1] b3 = mlp_params[7]
    cdef cnp.ndarray[double, ndim=2] w4 = mlp_params[8]
    cdef cnp.ndarray[double, ndim=1] b4 = mlp_params[9]

    cdef int m = noise_init.shape[0], C = z.shape[0], S = tfracs.shape[0]
    cdef int W = b1.shape[0], U = 2 * C
    cdef cnp.ndarray[double, ndim=2] y = np.empty((m, C))
    cdef cnp.ndarray[double, ndim=2] y0 = np.empty((m, C))
    cdef cnp.ndarray[double, ndim=2] uin = np.empty((m, U))
    cdef cnp.ndarray[double, ndim=1] evec = np.empty(W)
    cdef cnp.ndarray[double, ndim=2] h1 = np.empty((m, W))
    cdef cnp.ndarray[double, ndim=2] h2 = np.empty((m, W))
    cdef cnp.ndarray[double, ndim=2] eps_hat = np.empty((m, C))

    cdef int j, r, c
    cdef double root, one_minus_root, sd, g0, g1, g2, std, tf
    with nogil:
        for r in range(m):
            for c in range(C):
                y[r, c] = z[c] + noise_init[r, c]
        for j in range(S):
            tf = tfracs[j]
            for c in range(W):
                evec[c] = tf * wt[c, 0] + bt[c]
            for r in range(m):
                for c in range(C):
                    uin[r, c] = y[r, c]
                    uin[r, C + c] = z[c]
            _xwt(&uin[0, 0], U, &w1[0, 0], &h1[0, 0], W, m, U, W, 0.0)
            for r in range(m):
                for c in range(W):
                    h1[r, c] = _softplus((h1[r, c] + b1[c]) * evec[c])
            _xwt(&h1[0, 0], W, &w2[0, 0], &h2[0, 0], W, m, W, W, 0.0)
            for r in range(m):
                for c in range(W):
                    h2[r, c] = _softplus(h2[r, c] + b2[c])
            _xwt(&h2[0, 0], W, &w3[0, 0], &h1[0, 0], W, m, W, W, 0.0)
            for r in range(m):
                for c in range(W):
                    h1[r, c] = _softplus(h1[r, c] + b3[c])
            _xwt(&h1[0, 0], W, &w4[0, 0], &eps_hat[0, 0], C, m, W, C, 0.0)
            root = marg[j, 0]
            one_minus_root = marg[j, 1]
            sd = marg[j, 2]
            for r in range(m):
                for c in range(C):
                    y0[r, c] = (y[r, c] - one_minus_root * z[c]
                                - sd * (eps_hat[r, c] + b4[c])) / root
            if j < S - 1:
                g0 = pair[j, 0]
                g1 = pair[j, 1]
                g2 = pair[j, 2]
                std = pair[j, 3]
                for r in range(m):
                    for c in range(C):
                        y[r, c] = g0 * y0[r, c] + g1 * y[r, c] + g2 * z[c] \
                            + std * noise_steps[j, r, c]
    return y0
