# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for quadratic-drift systems and Monte Carlo sampling.

The drift is ``L x + N(x)`` with diagonal ``L`` and
``N_k(x) = 1/2 sum_ij qs[k,i,j] x_i x_j`` for a tensor ``qs`` symmetric in
its last two indices. Argument conventions mirror the pure-Python sweeps in
``propagators``; ``heun`` selects the Heun scheme and ``use_if`` the
integrating factor.
"""
import numpy as np
from cython.parallel cimport parallel, prange
from libc.math cimport exp, fabs, isfinite, log, sqrt
from libc.stdint cimport uint64_t
from libc.stdlib cimport free, malloc

ctypedef const double[::1] cvec
ctypedef const double[:, ::1] cmat
ctypedef const double[:, :, ::1] ctens

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL


# ---------------------------------------------------------------------------
# counter-based normals

cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t stream_key(uint64_t seed, uint64_t sample) noexcept nogil:
    return mix64(mix64(seed) + sample * GOLDEN)


cdef inline double ppnd16(double p) noexcept nogil:
    # Wichura's AS241 rational approximations to the normal quantile
    cdef double q = p - 0.5
    cdef double r, val
    if fabs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r
                         + 6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r
                       + 1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r
                     + 1.3314166789178437745e+2) * r + 3.3871328727963666080e0) / \
            (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r
                  + 3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r
                + 5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r
              + 4.2313330701600911252e+1) * r + 1.0)
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    r = sqrt(-log(r))
    if r <= 5.0:
        r = r - 1.6
        val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0) / \
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                  + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
              + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0) / \
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                  + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
              + 5.99832206555887937690e-1) * r + 1.0)
    if q < 0.0:
        val = -val
    return val


cdef inline double draw_normal(uint64_t key, uint64_t j) noexcept nogil:
    cdef uint64_t x = mix64(key + (j + 1) * GOLDEN)
    return ppnd16(((<double>(x >> 11)) + 0.5) * 1.1102230246251565e-16)


def counter_normals(uint64_t seed, long start, long count, long n_draws):
    """Standard normals ``Z[i, j]`` for samples ``start + i`` and draws ``j``."""
    out = np.empty((count, n_draws))
    cdef double[:, ::1] o = out
    cdef long i, j
    cdef uint64_t key
    with nogil:
        for i in range(count):
            key = stream_key(seed, <uint64_t>(start + i))
            for j in range(n_draws):
                o[i, j] = draw_normal(key, <uint64_t>j)
    return out


def normal_quantile(p):
    """Vectorized AS241 normal quantile (used in tests)."""
    a = np.ascontiguousarray(p, dtype=np.float64)
    out = np.empty_like(a)
    cdef double[::1] x = a.reshape(-1)
    cdef double[::1] y = out.reshape(-1)
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        y[i] = ppnd16(x[i])
    return out


# ---------------------------------------------------------------------------
# model evaluation on raw buffers

cdef struct Model:
    int n
    int r
    int use_if
    const double* ldiag
    const double* qs
    const double* sigma
    const double* etab


cdef inline void bilinear(Model* m, const double* a, const double* b, double* out) noexcept nogil:
    # out_k = sum_ij qs[k,i,j] a_i b_j
    cdef int n = m.n
    cdef int k, i, j
    cdef double acc, ai
    cdef const double* q
    for k in range(n):
        acc = 0.0
        q = m.qs + k * n * n
        for i in range(n):
            ai = a[i]
            if ai != 0.0:
                for j in range(n):
                    acc += q[i * n + j] * ai * b[j]
        out[k] = acc


cdef inline void bilinear_t(Model* m, const double* th, const double* g, double* out) noexcept nogil:
    # out_i = sum_kj qs[k,i,j] th_k g_j
    cdef int n = m.n
    cdef int k, i, j
    cdef double acc
    cdef const double* q
    for i in range(n):
        out[i] = 0.0
    for k in range(n):
        if th[k] == 0.0:
            continue
        q = m.qs + k * n * n
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += q[i * n + j] * g[j]
            out[i] += th[k] * acc


cdef inline void drift_n(Model* m, const double* x, double* out) noexcept nogil:
    cdef int k
    bilinear(m, x, x, out)
    for k in range(m.n):
        out[k] *= 0.5
        if not m.use_if:
            out[k] += m.ldiag[k] * x[k]


cdef inline void jac(Model* m, const double* x, const double* v, double* out) noexcept nogil:
    cdef int k
    bilinear(m, v, x, out)
    if not m.use_if:
        for k in range(m.n):
            out[k] += m.ldiag[k] * v[k]


cdef inline void jac_t(Model* m, const double* x, const double* a, double* out) noexcept nogil:
    cdef int k
    bilinear_t(m, a, x, out)
    if not m.use_if:
        for k in range(m.n):
            out[k] += m.ldiag[k] * a[k]


cdef inline void force(Model* m, const double* w, double* out) noexcept nogil:
    cdef int k, l
    cdef double acc
    for k in range(m.n):
        acc = 0.0
        for l in range(m.r):
            acc += m.sigma[k * m.r + l] * w[l]
        out[k] = acc


cdef inline double efac(Model* m, int k, int i) noexcept nogil:
    return m.etab[i * m.n + k]


def _etable(ldiag, h, use_if):
    if use_if:
        return np.ascontiguousarray(np.exp(np.outer(h, ldiag)))
    return np.ones((len(h), len(ldiag)))


cdef Model make_model(cvec ldiag, ctens qs, cmat sigma, int use_if, cmat etab):
    cdef Model m
    m.etab = &etab[0, 0]
    m.n = ldiag.shape[0]
    m.r = sigma.shape[1]
    m.use_if = use_if
    m.ldiag = &ldiag[0]
    m.qs = &qs[0, 0, 0]
    m.sigma = &sigma[0, 0]
    return m


# ---------------------------------------------------------------------------
# deterministic sweeps

def qs_forward(cvec ldiag, ctens qs, cmat sigma, cvec h, int heun, int use_if, cvec x0, cmat eta):
    etab = _etable(ldiag, h, use_if)
    cdef Model m = make_model(ldiag, qs, sigma, use_if, etab)
    cdef int n = m.n
    cdef int nt = h.shape[0]
    X = np.empty((nt + 1, n))
    cdef double[:, ::1] Xv = X
    cdef double* s0 = <double*> malloc(6 * n * sizeof(double))
    cdef double* s1 = s0 + n
    cdef double* k1 = s0 + 2 * n
    cdef double* y = s0 + 3 * n
    cdef double* k2 = s0 + 4 * n
    cdef double* x = s0 + 5 * n
    cdef int i, k, bad = -1
    cdef double hi, e
    for k in range(n):
        x[k] = x0[k]
        Xv[0, k] = x[k]
    with nogil:
        force(&m, &eta[0, 0], s0)
        for i in range(nt):
            hi = h[i]
            force(&m, &eta[i + 1, 0], s1)
            drift_n(&m, x, k1)
            if not heun:
                for k in range(n):
                    x[k] = efac(&m, k, i) * (x[k] + hi * (k1[k] + s0[k]))
            else:
                for k in range(n):
                    k1[k] = k1[k] + s0[k]
                    y[k] = efac(&m, k, i) * (x[k] + hi * k1[k])
                drift_n(&m, y, k2)
                for k in range(n):
                    e = efac(&m, k, i)
                    x[k] = e * (x[k] + (0.5 * hi) * k1[k]) + (0.5 * hi) * (k2[k] + s1[k])
            for k in range(n):
                Xv[i + 1, k] = x[k]
                if not isfinite(x[k]) and bad < 0:
                    bad = i + 1
            if bad >= 0:
                break
            for k in range(n):
                s0[k] = s1[k]
    free(s0)
    return X, bad


def qs_adjoint(cvec ldiag, ctens qs, cmat sigma, cvec h, int heun, int use_if,
               cmat X, cmat eta, cvec pT):
    etab = _etable(ldiag, h, use_if)
    cdef Model m = make_model(ldiag, qs, sigma, use_if, etab)
    cdef int n = m.n
    cdef int nt = h.shape[0]
    dS = np.zeros((nt + 1, n))
    P = np.empty((nt + 1, n))
    cdef double[:, ::1] dv = dS
    cdef double[:, ::1] Pv = P
    cdef double* buf = <double*> malloc(9 * n * sizeof(double))
    cdef double* p = buf
    cdef double* q = buf + n
    cdef double* t = buf + 2 * n
    cdef double* s0 = buf + 3 * n
    cdef double* y = buf + 4 * n
    cdef double* a2 = buf + 5 * n
    cdef double* py = buf + 6 * n
    cdef double* b = buf + 7 * n
    cdef double* a1 = buf + 8 * n
    cdef int i, k
    cdef double hi, e
    for k in range(n):
        p[k] = pT[k]
        Pv[nt, k] = p[k]
    with nogil:
        for i in range(nt - 1, -1, -1):
            hi = h[i]
            if not heun:
                for k in range(n):
                    q[k] = efac(&m, k, i) * p[k]
                    dv[i, k] += hi * q[k]
                jac_t(&m, &X[i, 0], q, t)
                for k in range(n):
                    p[k] = q[k] + hi * t[k]
            else:
                force(&m, &eta[i, 0], s0)
                drift_n(&m, &X[i, 0], t)
                for k in range(n):
                    y[k] = efac(&m, k, i) * (X[i, k] + hi * (t[k] + s0[k]))
                    a2[k] = (0.5 * hi) * p[k]
                    dv[i + 1, k] += a2[k]
                jac_t(&m, y, a2, py)
                for k in range(n):
                    e = efac(&m, k, i)
                    b[k] = e * p[k]
                    q[k] = e * py[k]
                    a1[k] = (0.5 * hi) * b[k] + hi * q[k]
                    dv[i, k] += a1[k]
                jac_t(&m, &X[i, 0], a1, t)
                for k in range(n):
                    p[k] = b[k] + q[k] + t[k]
            for k in range(n):
                Pv[i, k] = p[k]
    free(buf)
    return dS, P


def qs_tangent(cvec ldiag, ctens qs, cmat sigma, cvec h, int heun, int use_if,
               cmat X, cmat eta, cmat deta):
    etab = _etable(ldiag, h, use_if)
    cdef Model m = make_model(ldiag, qs, sigma, use_if, etab)
    cdef int n = m.n
    cdef int nt = h.shape[0]
    G = np.empty((nt + 1, n))
    cdef double[:, ::1] Gv = G
    cdef double* buf = <double*> malloc(9 * n * sizeof(double))
    cdef double* g = buf
    cdef double* d0 = buf + n
    cdef double* d1 = buf + 2 * n
    cdef double* k1 = buf + 3 * n
    cdef double* t = buf + 4 * n
    cdef double* y = buf + 5 * n
    cdef double* yd = buf + 6 * n
    cdef double* k2 = buf + 7 * n
    cdef double* s0 = buf + 8 * n
    cdef int i, k
    cdef double hi, e
    for k in range(n):
        g[k] = 0.0
        Gv[0, k] = 0.0
    with nogil:
        for i in range(nt):
            hi = h[i]
            force(&m, &deta[i, 0], d0)
            jac(&m, &X[i, 0], g, k1)
            if not heun:
                for k in range(n):
                    g[k] = efac(&m, k, i) * (g[k] + hi * (k1[k] + d0[k]))
            else:
                force(&m, &deta[i + 1, 0], d1)
                force(&m, &eta[i, 0], s0)
                drift_n(&m, &X[i, 0], t)
                for k in range(n):
                    e = efac(&m, k, i)
                    k1[k] = k1[k] + d0[k]
                    y[k] = e * (X[i, k] + hi * (t[k] + s0[k]))
                    yd[k] = e * (g[k] + hi * k1[k])
                jac(&m, y, yd, k2)
                for k in range(n):
                    e = efac(&m, k, i)
                    g[k] = e * (g[k] + (0.5 * hi) * k1[k]) + (0.5 * hi) * (k2[k] + d1[k])
            for k in range(n):
                Gv[i + 1, k] = g[k]
    free(buf)
    return G


def qs_second(cvec ldiag, ctens qs, cmat sigma, cvec h, int heun, int use_if,
              cmat X, cmat eta, cmat deta, cmat G, cvec pT, cvec rT):
    etab = _etable(ldiag, h, use_if)
    cdef Model m = make_model(ldiag, qs, sigma, use_if, etab)
    cdef int n = m.n
    cdef int nt = h.shape[0]
    dS2 = np.zeros((nt + 1, n))
    R = np.empty((nt + 1, n))
    cdef double[:, ::1] dv = dS2
    cdef double[:, ::1] Rv = R
    cdef double* buf = <double*> malloc(20 * n * sizeof(double))
    cdef double* p = buf
    cdef double* r = buf + n
    cdef double* q = buf + 2 * n
    cdef double* qr = buf + 3 * n
    cdef double* t = buf + 4 * n
    cdef double* t2 = buf + 5 * n
    cdef double* s0 = buf + 6 * n
    cdef double* d0 = buf + 7 * n
    cdef double* y = buf + 8 * n
    cdef double* yd = buf + 9 * n
    cdef double* a2 = buf + 10 * n
    cdef double* b2 = buf + 11 * n
    cdef double* py = buf + 12 * n
    cdef double* pyd = buf + 13 * n
    cdef double* bb = buf + 14 * n
    cdef double* cc = buf + 15 * n
    cdef double* bd = buf + 16 * n
    cdef double* cd = buf + 17 * n
    cdef double* a1 = buf + 18 * n
    cdef double* b1 = buf + 19 * n
    cdef int i, k
    cdef double hi, e
    for k in range(n):
        p[k] = pT[k]
        r[k] = rT[k]
        Rv[nt, k] = r[k]
    with nogil:
        for i in range(nt - 1, -1, -1):
            hi = h[i]
            if not heun:
                for k in range(n):
                    e = efac(&m, k, i)
                    q[k] = e * p[k]
                    qr[k] = e * r[k]
                    dv[i, k] += hi * qr[k]
                jac_t(&m, &X[i, 0], q, t)
                jac_t(&m, &X[i, 0], qr, t2)
                bilinear_t(&m, q, &G[i, 0], py)
                for k in range(n):
                    p[k] = q[k] + hi * t[k]
                    r[k] = qr[k] + hi * (t2[k] + py[k])
            else:
                force(&m, &eta[i, 0], s0)
                force(&m, &deta[i, 0], d0)
                drift_n(&m, &X[i, 0], t)
                jac(&m, &X[i, 0], &G[i, 0], t2)
                for k in range(n):
                    e = efac(&m, k, i)
                    y[k] = e * (X[i, k] + hi * (t[k] + s0[k]))
                    yd[k] = e * (G[i, k] + hi * (t2[k] + d0[k]))
                    a2[k] = (0.5 * hi) * p[k]
                    b2[k] = (0.5 * hi) * r[k]
                    dv[i + 1, k] += b2[k]
                jac_t(&m, y, a2, py)
                jac_t(&m, y, b2, pyd)
                bilinear_t(&m, a2, yd, t)
                for k in range(n):
                    pyd[k] += t[k]
                    e = efac(&m, k, i)
                    bb[k] = e * p[k]
                    cc[k] = e * py[k]
                    bd[k] = e * r[k]
                    cd[k] = e * pyd[k]
                    a1[k] = (0.5 * hi) * bb[k] + hi * cc[k]
                    b1[k] = (0.5 * hi) * bd[k] + hi * cd[k]
                    dv[i, k] += b1[k]
                jac_t(&m, &X[i, 0], a1, t)
                jac_t(&m, &X[i, 0], b1, t2)
                bilinear_t(&m, a1, &G[i, 0], py)
                for k in range(n):
                    p[k] = bb[k] + cc[k] + t[k]
                    r[k] = bd[k] + cd[k] + t2[k] + py[k]
            for k in range(n):
                Rv[i, k] = r[k]
    free(buf)
    return dS2, R


# ---------------------------------------------------------------------------
# Monte Carlo

cdef inline void sde_step(Model* m, double* x, const double* inc, double hi, int i, int heun,
                          double* k1, double* y, double* k2) noexcept nogil:
    # one Euler-Maruyama or stochastic Heun step with integrating factor;
    # inc is the state-space noise increment over the step
    cdef int k
    cdef int n = m.n
    cdef double e
    drift_n(m, x, k1)
    if not heun:
        for k in range(n):
            x[k] = efac(m, k, i) * (x[k] + hi * k1[k] + inc[k])
        return
    for k in range(n):
        y[k] = efac(m, k, i) * (x[k] + hi * k1[k] + inc[k])
    drift_n(m, y, k2)
    for k in range(n):
        e = efac(m, k, i)
        x[k] = e * (x[k] + (0.5 * hi) * k1[k] + inc[k]) + (0.5 * hi) * k2[k]


def mc_endpoints(cvec ldiag, ctens qs, cmat sigma, cvec h, int heun, int use_if, cvec x0,
                 double eps, uint64_t seed, long start, long count, int nthreads=1):
    """Final states of ``count`` direct SDE samples; non-finite ones flagged."""
    etab = _etable(ldiag, h, use_if)
    cdef Model m = make_model(ldiag, qs, sigma, use_if, etab)
    cdef int n = m.n
    cdef int rr = m.r
    cdef int nt = h.shape[0]
    XT = np.empty((count, n))
    ok = np.ones(count, dtype=np.uint8)
    cdef double[:, ::1] out = XT
    cdef unsigned char[::1] okv = ok
    cdef double se = sqrt(eps)
    cdef long s
    cdef int i, k, l
    cdef double* buf
    cdef uint64_t key
    cdef double sh
    with nogil, parallel(num_threads=nthreads):
        buf = <double*> malloc((5 * n + rr) * sizeof(double))
        for s in prange(count, schedule="static"):
            key = stream_key(seed, <uint64_t>(start + s))
            for k in range(n):
                buf[k] = x0[k]
            for i in range(nt):
                sh = se * sqrt(h[i])
                for l in range(rr):
                    buf[5 * n + l] = sh * draw_normal(key, <uint64_t>(i * rr + l))
                force(&m, buf + 5 * n, buf + n)
                sde_step(&m, buf, buf + n, h[i], i, heun, buf + 2 * n, buf + 3 * n, buf + 4 * n)
            for k in range(n):
                out[s, k] = buf[k]
                if not isfinite(buf[k]):
                    okv[s] = 0
        free(buf)
    return XT, ok


def mc_shifted(cvec ldiag, ctens qs, cmat sigma, cvec h, int heun, int use_if, cvec x0,
               double eps, uint64_t seed, long start, long count,
               cmat shift, cmat phi, cmat theta, cvec wts, double lam, cmat obs_quad,
               const long[::1] record, int nthreads=1):
    """Instanton-shifted samples.

    Each path is driven by ``sqrt(eps) dW + h shift_i`` with ``dW`` the
    sampled increments. Returns the scaled fluctuations
    ``Y = (X - phi) / sqrt(eps)`` at the ``record`` nodes and at final time,
    the log of the tube reweighting factor and the log of the exact
    likelihood ratio of the shifted against the original increments.
    """
    etab = _etable(ldiag, h, use_if)
    cdef Model m = make_model(ldiag, qs, sigma, use_if, etab)
    cdef int n = m.n
    cdef int rr = m.r
    cdef int nt = h.shape[0]
    cdef int nrec = record.shape[0]
    Yrec = np.empty((count, nrec, n))
    YT = np.empty((count, n))
    logw = np.empty(count)
    loglr = np.empty(count)
    cdef double[:, :, ::1] yr = Yrec
    cdef double[:, ::1] yt = YT
    cdef double[::1] lw = logw
    cdef double[::1] llr = loglr
    cdef double se = sqrt(eps)
    cdef long s
    cdef int i, k, l, c
    cdef double* buf
    cdef uint64_t key
    cdef double sh, z, acc, lr, tq
    with nogil, parallel(num_threads=nthreads):
        buf = <double*> malloc((7 * n + rr) * sizeof(double))
        for s in prange(count, schedule="static"):
            key = stream_key(seed, <uint64_t>(start + s))
            for k in range(n):
                buf[k] = x0[k]
            acc = 0.0
            lr = 0.0
            c = 0
            for i in range(nt + 1):
                # fluctuation and tube weight at node i
                for k in range(n):
                    buf[5 * n + k] = (buf[k] - phi[i, k]) / se
                if wts[i] != 0.0:
                    bilinear(&m, buf + 5 * n, buf + 5 * n, buf + 6 * n)
                    tq = 0.0
                    for k in range(n):
                        tq = tq + 0.5 * buf[6 * n + k] * theta[i, k]
                    acc = acc + wts[i] * tq
                while c < nrec and record[c] == i:
                    for k in range(n):
                        yr[s, c, k] = buf[5 * n + k]
                    c = c + 1
                if i == nt:
                    break
                sh = sqrt(h[i])
                for l in range(rr):
                    z = draw_normal(key, <uint64_t>(i * rr + l))
                    buf[7 * n + l] = se * sh * z + h[i] * shift[i, l]
                    lr = lr - shift[i, l] * sh * z / se - h[i] * shift[i, l] * shift[i, l] / (2.0 * eps)
                force(&m, buf + 7 * n, buf + n)
                sde_step(&m, buf, buf + n, h[i], i, heun, buf + 2 * n, buf + 3 * n, buf + 4 * n)
            tq = 0.0
            for k in range(n):
                z = 0.0
                for l in range(n):
                    z = z + obs_quad[k, l] * buf[5 * n + l]
                tq = tq + buf[5 * n + k] * z
                yt[s, k] = buf[5 * n + k]
            lw[s] = acc + 0.5 * lam * tq
            llr[s] = lr
        free(buf)
    return Yrec, YT, logw, loglr
