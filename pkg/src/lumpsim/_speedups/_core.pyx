# cython: boundscheck=False, wraparound=False, nonecheck=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled kernels; mirrors the pure-Python module `_core_py` exactly.

All hot loops run without the GIL so independent simulations can execute
concurrently from Python threads.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, cos, fabs, hypot, isfinite, pow, sin, sqrt
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset

cnp.import_array()

BACKEND_NAME = "compiled"

DEF REV = 0
DEF SLIDE = 1
DEF XY = 2

DEF FD_H = 1e-6
DEF PROJ_TOL = 1e-11
DEF PROJ_ITERS = 3

# status codes, shared with _core_py
DEF OK = 0
DEF STEP_FAIL = 1
DEF NON_FINITE = 2
DEF SINGULAR_MASS = 3
DEF SINGULAR_SOLVE = 4
DEF DRIFT_FAIL = 5


# ---------------------------------------------------------------------------
# small dense LU with partial pivoting
# ---------------------------------------------------------------------------

cdef int lu_factor(double* a, int* piv, int n) noexcept nogil:
    cdef int i, j, k, p
    cdef double amax, tmp
    for k in range(n):
        p = k
        amax = fabs(a[k * n + k])
        for i in range(k + 1, n):
            if fabs(a[i * n + k]) > amax:
                amax = fabs(a[i * n + k])
                p = i
        if amax < 1e-300:
            return 1
        piv[k] = p
        if p != k:
            for j in range(n):
                tmp = a[k * n + j]
                a[k * n + j] = a[p * n + j]
                a[p * n + j] = tmp
        for i in range(k + 1, n):
            a[i * n + k] /= a[k * n + k]
            tmp = a[i * n + k]
            for j in range(k + 1, n):
                a[i * n + j] -= tmp * a[k * n + j]
    return 0


cdef void lu_solve(double* a, int* piv, double* b, int n) noexcept nogil:
    cdef int i, j
    cdef double tmp
    for i in range(n):
        if piv[i] != i:
            tmp = b[i]
            b[i] = b[piv[i]]
            b[piv[i]] = tmp
    for i in range(n):
        for j in range(i):
            b[i] -= a[i * n + j] * b[j]
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            b[i] -= a[i * n + j] * b[j]
        b[i] /= a[i * n + i]


# ---------------------------------------------------------------------------
# tree description + forward kinematics buffers
# ---------------------------------------------------------------------------

cdef struct Tree:
    int nb
    int nm
    int nq
    const int* btype
    const int* bparent
    const int* bcoord
    const double* banchor
    const double* baxis
    const double* binertia
    const double* jw
    const int* mbody
    const double* mlocal
    const double* mmass

cdef struct FkBuf:
    double* th
    double* w
    double* o       # 2*nb
    double* od
    double* a0
    double* pivot
    double* axisw
    double* r       # 2*nm
    double* rd
    double* ra0
    double* J       # nm*2*nq

cdef int fkbuf_doubles(int nb, int nm, int nq) noexcept nogil:
    return 12 * nb + 6 * nm + 2 * nm * nq

cdef void fkbuf_attach(FkBuf* f, double* mem, int nb, int nm, int nq) noexcept nogil:
    f.th = mem
    f.w = mem + nb
    f.o = mem + 2 * nb
    f.od = mem + 4 * nb
    f.a0 = mem + 6 * nb
    f.pivot = mem + 8 * nb
    f.axisw = mem + 10 * nb
    f.r = mem + 12 * nb
    f.rd = f.r + 2 * nm
    f.ra0 = f.rd + 2 * nm
    f.J = f.ra0 + 2 * nm


cdef void tree_fk(Tree* T, const double* q, const double* v, bint with_vel,
                  bint want_jac, FkBuf* F) noexcept nogil:
    cdef int b, m, p, a, btype, c0, k
    cdef double th_p, w_p, cs, sn, ax, ay, ux, uy, dx, dy, relx, rely
    cdef double opx, opy, odx, ody, a0x, a0y, rmx, rmy, qc, vc
    cdef int nq = T.nq

    for b in range(T.nb):
        p = T.bparent[b]
        if p < 0:
            th_p = 0.0; w_p = 0.0
            opx = opy = odx = ody = a0x = a0y = 0.0
        else:
            th_p = F.th[p]; w_p = F.w[p]
            opx = F.o[2 * p]; opy = F.o[2 * p + 1]
            odx = F.od[2 * p]; ody = F.od[2 * p + 1]
            a0x = F.a0[2 * p]; a0y = F.a0[2 * p + 1]
        cs = cos(th_p); sn = sin(th_p)
        ax = cs * T.banchor[2 * b] - sn * T.banchor[2 * b + 1]
        ay = sn * T.banchor[2 * b] + cs * T.banchor[2 * b + 1]
        btype = T.btype[b]
        c0 = T.bcoord[b]
        if btype == REV:
            qc = q[c0]
            F.th[b] = th_p + qc
            F.o[2 * b] = opx + ax
            F.o[2 * b + 1] = opy + ay
            F.pivot[2 * b] = F.o[2 * b]
            F.pivot[2 * b + 1] = F.o[2 * b + 1]
            if with_vel:
                F.w[b] = w_p + v[c0]
                F.od[2 * b] = odx - w_p * ay
                F.od[2 * b + 1] = ody + w_p * ax
                F.a0[2 * b] = a0x - w_p * w_p * ax
                F.a0[2 * b + 1] = a0y - w_p * w_p * ay
        elif btype == SLIDE:
            qc = q[c0]
            ux = cs * T.baxis[2 * b] - sn * T.baxis[2 * b + 1]
            uy = sn * T.baxis[2 * b] + cs * T.baxis[2 * b + 1]
            dx = ax + qc * ux
            dy = ay + qc * uy
            F.th[b] = th_p
            F.o[2 * b] = opx + dx
            F.o[2 * b + 1] = opy + dy
            F.axisw[2 * b] = ux
            F.axisw[2 * b + 1] = uy
            if with_vel:
                vc = v[c0]
                F.w[b] = w_p
                F.od[2 * b] = odx - w_p * dy + vc * ux
                F.od[2 * b + 1] = ody + w_p * dx + vc * uy
                F.a0[2 * b] = a0x - w_p * w_p * dx - 2.0 * w_p * vc * uy
                F.a0[2 * b + 1] = a0y - w_p * w_p * dy + 2.0 * w_p * vc * ux
        else:  # XY
            F.th[b] = th_p
            F.o[2 * b] = opx + ax + q[c0]
            F.o[2 * b + 1] = opy + ay + q[c0 + 1]
            if with_vel:
                F.w[b] = w_p
                F.od[2 * b] = odx - w_p * ay + v[c0]
                F.od[2 * b + 1] = ody + w_p * ax + v[c0 + 1]
                F.a0[2 * b] = a0x - w_p * w_p * ax
                F.a0[2 * b + 1] = a0y - w_p * w_p * ay

    for m in range(T.nm):
        b = T.mbody[m]
        if want_jac:
            memset(F.J + 2 * m * nq, 0, 2 * nq * sizeof(double))
        if b < 0:
            F.r[2 * m] = T.mlocal[2 * m]
            F.r[2 * m + 1] = T.mlocal[2 * m + 1]
            F.rd[2 * m] = 0.0
            F.rd[2 * m + 1] = 0.0
            F.ra0[2 * m] = 0.0
            F.ra0[2 * m + 1] = 0.0
            continue
        cs = cos(F.th[b]); sn = sin(F.th[b])
        relx = cs * T.mlocal[2 * m] - sn * T.mlocal[2 * m + 1]
        rely = sn * T.mlocal[2 * m] + cs * T.mlocal[2 * m + 1]
        rmx = F.o[2 * b] + relx
        rmy = F.o[2 * b + 1] + rely
        F.r[2 * m] = rmx
        F.r[2 * m + 1] = rmy
        if with_vel:
            F.rd[2 * m] = F.od[2 * b] - F.w[b] * rely
            F.rd[2 * m + 1] = F.od[2 * b + 1] + F.w[b] * relx
            F.ra0[2 * m] = F.a0[2 * b] - F.w[b] * F.w[b] * relx
            F.ra0[2 * m + 1] = F.a0[2 * b + 1] - F.w[b] * F.w[b] * rely
        if want_jac:
            a = b
            while a >= 0:
                btype = T.btype[a]
                c0 = T.bcoord[a]
                if btype == REV:
                    F.J[(2 * m) * nq + c0] += -(rmy - F.pivot[2 * a + 1])
                    F.J[(2 * m + 1) * nq + c0] += rmx - F.pivot[2 * a]
                elif btype == SLIDE:
                    F.J[(2 * m) * nq + c0] += F.axisw[2 * a]
                    F.J[(2 * m + 1) * nq + c0] += F.axisw[2 * a + 1]
                else:
                    F.J[(2 * m) * nq + c0] += 1.0
                    F.J[(2 * m + 1) * nq + c0 + 1] += 1.0
                a = T.bparent[a]


# ---------------------------------------------------------------------------
# pack extraction helpers
# ---------------------------------------------------------------------------

cdef const int* iptr(object arr):
    cdef cnp.ndarray[cnp.int32_t, ndim=1] a
    cdef cnp.ndarray b
    b = <cnp.ndarray> arr
    if b.size == 0:
        return NULL
    return <const int*> b.data

cdef const double* dptr(object arr):
    cdef cnp.ndarray b
    b = <cnp.ndarray> arr
    if b.size == 0:
        return NULL
    return <const double*> b.data


cdef void tree_from_pack(object pack, Tree* T):
    T.nb = <int> pack.body_type.shape[0]
    T.nm = <int> pack.marker_body.shape[0]
    T.nq = <int> pack.nq
    T.btype = iptr(pack.body_type)
    T.bparent = iptr(pack.body_parent)
    T.bcoord = iptr(pack.body_coord)
    T.banchor = dptr(pack.body_anchor)
    T.baxis = dptr(pack.body_axis)
    T.binertia = dptr(pack.body_inertia)
    T.jw = dptr(pack.jw)
    T.mbody = iptr(pack.marker_body)
    T.mlocal = dptr(pack.marker_local)
    T.mmass = dptr(pack.marker_mass)


# ---------------------------------------------------------------------------
# oracle kernels
# ---------------------------------------------------------------------------

cdef struct Oracle:
    Tree T
    int na
    const int* act_idx       # na*2
    const double* act_par    # na*4: m, k, c, l0
    const double* joint_damp
    double gravity
    int stance
    int foot


cdef void oracle_from_pack(object pack, Oracle* O):
    tree_from_pack(pack, &O.T)
    O.na = <int> pack.act_idx.shape[0]
    O.act_idx = iptr(pack.act_idx)
    O.act_par = dptr(pack.act_par)
    O.joint_damp = dptr(pack.joint_damp)
    O.gravity = <double> pack.gravity
    O.stance = <int> pack.stance
    O.foot = <int> pack.foot_marker


cdef void _stance_shift(Oracle* O, FkBuf* F, bint with_vel, bint want_jac) noexcept nogil:
    cdef int m, k, nq = O.T.nq, f = O.foot
    cdef double fx, fy
    if not O.stance:
        return
    fx = F.r[2 * f]; fy = F.r[2 * f + 1]
    for m in range(O.T.nm):
        F.r[2 * m] -= fx
        F.r[2 * m + 1] -= fy
    if with_vel:
        fx = F.rd[2 * f]; fy = F.rd[2 * f + 1]
        for m in range(O.T.nm):
            F.rd[2 * m] -= fx
            F.rd[2 * m + 1] -= fy
        fx = F.ra0[2 * f]; fy = F.ra0[2 * f + 1]
        for m in range(O.T.nm):
            F.ra0[2 * m] -= fx
            F.ra0[2 * m + 1] -= fy
    if want_jac:
        for m in range(O.T.nm):
            if m == f:
                continue
            for k in range(2 * nq):
                F.J[2 * m * nq + k] -= F.J[2 * f * nq + k]
        memset(F.J + 2 * f * nq, 0, 2 * nq * sizeof(double))


cdef void oracle_fk_c(Oracle* O, const double* q, const double* v, bint with_vel,
                      bint want_jac, FkBuf* F) noexcept nogil:
    tree_fk(&O.T, q, v, with_vel, want_jac, F)
    _stance_shift(O, F, with_vel, want_jac)


cdef void _mass_from_fk(Oracle* O, FkBuf* F, double* M) noexcept nogil:
    cdef int nq = O.T.nq
    cdef int m, b, a, i, j, ia, ib
    cdef double mm, ii, ma
    cdef double* Ja
    cdef double* Jb
    memset(M, 0, nq * nq * sizeof(double))
    for m in range(O.T.nm):
        mm = O.T.mmass[m]
        if mm > 0.0:
            Ja = F.J + 2 * m * nq
            for i in range(nq):
                for j in range(nq):
                    M[i * nq + j] += mm * (Ja[i] * Ja[j] + Ja[nq + i] * Ja[nq + j])
    for b in range(O.T.nb):
        ii = O.T.binertia[b]
        if ii > 0.0:
            for i in range(nq):
                for j in range(nq):
                    M[i * nq + j] += ii * O.T.jw[b * nq + i] * O.T.jw[b * nq + j]
    for a in range(O.na):
        ma = O.act_par[4 * a]
        ia = O.act_idx[2 * a]
        ib = O.act_idx[2 * a + 1]
        Ja = F.J + 2 * ia * nq
        Jb = F.J + 2 * ib * nq
        for i in range(nq):
            for j in range(nq):
                M[i * nq + j] += (ma / 3.0) * (
                    Ja[i] * Ja[j] + Ja[nq + i] * Ja[nq + j]
                    + Jb[i] * Jb[j] + Jb[nq + i] * Jb[nq + j]
                ) + (ma / 6.0) * (
                    Ja[i] * Jb[j] + Jb[i] * Ja[j]
                    + Ja[nq + i] * Jb[nq + j] + Jb[nq + i] * Ja[nq + j]
                )


cdef void _act_geom_from_fk(Oracle* O, FkBuf* F, double* l, double* u, double* dl) noexcept nogil:
    cdef int a, k, ia, ib, nq = O.T.nq
    cdef double dx, dy
    cdef double* Ja
    cdef double* Jb
    for a in range(O.na):
        ia = O.act_idx[2 * a]
        ib = O.act_idx[2 * a + 1]
        dx = F.r[2 * ib] - F.r[2 * ia]
        dy = F.r[2 * ib + 1] - F.r[2 * ia + 1]
        l[a] = hypot(dx, dy)
        u[2 * a] = dx / l[a]
        u[2 * a + 1] = dy / l[a]
        if dl != NULL:
            Ja = F.J + 2 * ia * nq
            Jb = F.J + 2 * ib * nq
            for k in range(nq):
                dl[a * nq + k] = u[2 * a] * (Jb[k] - Ja[k]) + u[2 * a + 1] * (Jb[nq + k] - Ja[nq + k])


cdef void _gradv_from_fk(Oracle* O, FkBuf* F, double* l, double* dl, double* grad) noexcept nogil:
    cdef int m, a, k, ia, ib, nq = O.T.nq
    cdef double mm, ma, ka, l0a, g = O.gravity
    memset(grad, 0, nq * sizeof(double))
    for m in range(O.T.nm):
        mm = O.T.mmass[m]
        if mm > 0.0:
            for k in range(nq):
                grad[k] += mm * g * F.J[(2 * m + 1) * nq + k]
    for a in range(O.na):
        ma = O.act_par[4 * a]
        ka = O.act_par[4 * a + 1]
        l0a = O.act_par[4 * a + 3]
        ia = O.act_idx[2 * a]
        ib = O.act_idx[2 * a + 1]
        for k in range(nq):
            grad[k] += 0.5 * ma * g * (F.J[(2 * ia + 1) * nq + k] + F.J[(2 * ib + 1) * nq + k])
            grad[k] += ka * (l[a] - l0a) * dl[a * nq + k]


cdef struct OracleWs:
    double* mem
    FkBuf fk
    FkBuf fk2            # scratch for finite differences
    double* M
    double* dM           # nq^3
    double* Msc          # nq^2 scratch
    double* Acc          # nq^2 accumulator
    double* l
    double* u
    double* dl
    double* ld
    double* grad
    double* rhs
    double* qp
    int* piv

cdef int oracle_ws_alloc(Oracle* O, OracleWs* W) noexcept nogil:
    cdef int nb = O.T.nb, nm = O.T.nm, nq = O.T.nq, na = O.na
    cdef int nfk = fkbuf_doubles(nb, nm, nq)
    cdef int nd = 2 * nfk + 3 * nq * nq + nq * nq * nq + 4 * na + na * nq + 3 * nq
    W.mem = <double*> malloc(nd * sizeof(double) + nq * sizeof(int))
    if W.mem == NULL:
        return 1
    cdef double* p = W.mem
    fkbuf_attach(&W.fk, p, nb, nm, nq); p += nfk
    fkbuf_attach(&W.fk2, p, nb, nm, nq); p += nfk
    W.M = p; p += nq * nq
    W.Msc = p; p += nq * nq
    W.Acc = p; p += nq * nq
    W.dM = p; p += nq * nq * nq
    W.l = p; p += na
    W.u = p; p += 2 * na
    W.ld = p; p += na
    W.dl = p; p += na * nq
    W.grad = p; p += nq
    W.rhs = p; p += nq
    W.qp = p; p += nq
    W.piv = <int*> p
    return 0

cdef void oracle_ws_free(OracleWs* W) noexcept nogil:
    free(W.mem)


cdef int _oracle_qdd_c(Oracle* O, OracleWs* W, const double* q, const double* qd,
                       const double* f_act, double* qdd) noexcept nogil:
    """qdd at a state; uses W.fk as the main frame, W.fk2 for FD passes."""
    cdef int nq = O.T.nq, na = O.na
    cdef int a, i, j, k, ia, ib
    cdef double ca, h = FD_H, s

    oracle_fk_c(O, q, qd, True, True, &W.fk)
    _act_geom_from_fk(O, &W.fk, W.l, W.u, W.dl)
    for a in range(na):
        ia = O.act_idx[2 * a]
        ib = O.act_idx[2 * a + 1]
        W.ld[a] = (W.u[2 * a] * (W.fk.rd[2 * ib] - W.fk.rd[2 * ia])
                   + W.u[2 * a + 1] * (W.fk.rd[2 * ib + 1] - W.fk.rd[2 * ia + 1]))
    _gradv_from_fk(O, &W.fk, W.l, W.dl, W.grad)
    for i in range(nq):
        W.rhs[i] = -W.grad[i] - O.joint_damp[i] * qd[i]
    for a in range(na):
        ca = O.act_par[4 * a + 2]
        for i in range(nq):
            W.rhs[i] += (f_act[a] - ca * W.ld[a]) * W.dl[a * nq + i]

    # Coriolis via centrally differenced mass matrix (Christoffel symbols)
    for k in range(nq):
        memcpy(W.qp, q, nq * sizeof(double))
        W.qp[k] = q[k] + h
        oracle_fk_c(O, W.qp, NULL, False, True, &W.fk2)
        _mass_from_fk(O, &W.fk2, W.dM + k * nq * nq)
        W.qp[k] = q[k] - h
        oracle_fk_c(O, W.qp, NULL, False, True, &W.fk2)
        _mass_from_fk(O, &W.fk2, W.Msc)
        for i in range(nq * nq):
            W.dM[k * nq * nq + i] = (W.dM[k * nq * nq + i] - W.Msc[i]) / (2.0 * h)
    memset(W.Acc, 0, nq * nq * sizeof(double))
    for k in range(nq):
        for i in range(nq * nq):
            W.Acc[i] += qd[k] * W.dM[k * nq * nq + i]
    for i in range(nq):
        s = 0.0
        for j in range(nq):
            s += W.Acc[i * nq + j] * qd[j]
        for j in range(nq):
            for k in range(nq):
                s -= 0.5 * qd[j] * W.dM[i * nq * nq + j * nq + k] * qd[k]
        W.rhs[i] -= s

    _mass_from_fk(O, &W.fk, W.M)
    if lu_factor(W.M, W.piv, nq):
        return SINGULAR_MASS
    memcpy(qdd, W.rhs, nq * sizeof(double))
    lu_solve(W.M, W.piv, qdd, nq)
    for i in range(nq):
        if not isfinite(qdd[i]):
            return SINGULAR_MASS
    return OK


cdef void _energies_c(Oracle* O, OracleWs* W, const double* q, const double* qd,
                      double* out5) noexcept nogil:
    """out5 = (T, Vg, Ve, ...) and fills W.l / W.ld."""
    cdef int m, b, a, ia, ib
    cdef double T = 0.0, Vg = 0.0, Ve = 0.0
    cdef double mm, ma, ka, l0a, dx, dy, vax, vay, vbx, vby
    cdef double g = O.gravity
    oracle_fk_c(O, q, qd, True, False, &W.fk)
    for m in range(O.T.nm):
        mm = O.T.mmass[m]
        if mm > 0.0:
            T += 0.5 * mm * (W.fk.rd[2 * m] ** 2 + W.fk.rd[2 * m + 1] ** 2)
            Vg += mm * g * W.fk.r[2 * m + 1]
    for b in range(O.T.nb):
        T += 0.5 * O.T.binertia[b] * W.fk.w[b] ** 2
    for a in range(O.na):
        ia = O.act_idx[2 * a]
        ib = O.act_idx[2 * a + 1]
        ma = O.act_par[4 * a]
        ka = O.act_par[4 * a + 1]
        l0a = O.act_par[4 * a + 3]
        dx = W.fk.r[2 * ib] - W.fk.r[2 * ia]
        dy = W.fk.r[2 * ib + 1] - W.fk.r[2 * ia + 1]
        W.l[a] = hypot(dx, dy)
        vax = W.fk.rd[2 * ia]; vay = W.fk.rd[2 * ia + 1]
        vbx = W.fk.rd[2 * ib]; vby = W.fk.rd[2 * ib + 1]
        W.ld[a] = (dx * (vbx - vax) + dy * (vby - vay)) / W.l[a]
        T += (ma / 6.0) * (vax * vbx + vay * vby + vax * vax + vay * vay + vbx * vbx + vby * vby)
        Vg += 0.5 * ma * g * (W.fk.r[2 * ia + 1] + W.fk.r[2 * ib + 1])
        Ve += 0.5 * ka * (W.l[a] - l0a) ** 2
    out5[0] = T
    out5[1] = Vg
    out5[2] = Ve


# ---- python-facing oracle functions ----

def oracle_fk(pack, q):
    cdef Oracle O
    oracle_from_pack(pack, &O)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qa = np.ascontiguousarray(q, dtype=np.float64)
    cdef int nq = O.T.nq, nm = O.T.nm, na = O.na
    r = np.zeros((nm, 2))
    J = np.zeros((nm, 2, nq))
    l = np.zeros(na)
    dl = np.zeros((na, nq))
    cdef OracleWs W
    if oracle_ws_alloc(&O, &W):
        raise MemoryError
    cdef double[:, ::1] rv = r
    cdef double[:, :, ::1] Jv = J
    cdef double[::1] lv = l
    cdef double[:, ::1] dlv = dl
    cdef int m, i, k, a
    try:
        oracle_fk_c(&O, &qa[0], NULL, False, True, &W.fk)
        _act_geom_from_fk(&O, &W.fk, W.l, W.u, W.dl)
        for m in range(nm):
            rv[m, 0] = W.fk.r[2 * m]
            rv[m, 1] = W.fk.r[2 * m + 1]
            for i in range(2):
                for k in range(nq):
                    Jv[m, i, k] = W.fk.J[(2 * m + i) * nq + k]
        for a in range(na):
            lv[a] = W.l[a]
            for k in range(nq):
                dlv[a, k] = W.dl[a * nq + k]
    finally:
        oracle_ws_free(&W)
    return r, J, l, dl


def oracle_mass(pack, q):
    cdef Oracle O
    oracle_from_pack(pack, &O)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qa = np.ascontiguousarray(q, dtype=np.float64)
    cdef int nq = O.T.nq
    M = np.zeros((nq, nq))
    cdef double[:, ::1] Mv = M
    cdef OracleWs W
    if oracle_ws_alloc(&O, &W):
        raise MemoryError
    cdef int i, j
    try:
        oracle_fk_c(&O, &qa[0], NULL, False, True, &W.fk)
        _mass_from_fk(&O, &W.fk, W.M)
        for i in range(nq):
            for j in range(nq):
                Mv[i, j] = W.M[i * nq + j]
    finally:
        oracle_ws_free(&W)
    return M


def oracle_statics(pack, q):
    cdef Oracle O
    oracle_from_pack(pack, &O)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qa = np.ascontiguousarray(q, dtype=np.float64)
    cdef int nq = O.T.nq, na = O.na
    grad = np.zeros(nq)
    dl = np.zeros((na, nq))
    cdef double[::1] gv = grad
    cdef double[:, ::1] dlv = dl
    cdef OracleWs W
    if oracle_ws_alloc(&O, &W):
        raise MemoryError
    cdef int k, a
    try:
        oracle_fk_c(&O, &qa[0], NULL, False, True, &W.fk)
        _act_geom_from_fk(&O, &W.fk, W.l, W.u, W.dl)
        _gradv_from_fk(&O, &W.fk, W.l, W.dl, W.grad)
        for k in range(nq):
            gv[k] = W.grad[k]
        for a in range(na):
            for k in range(nq):
                dlv[a, k] = W.dl[a * nq + k]
    finally:
        oracle_ws_free(&W)
    return grad, dl


def oracle_gradv(pack, q):
    return oracle_statics(pack, q)[0]


def oracle_rhs(pack, q, qd, f_act):
    cdef Oracle O
    oracle_from_pack(pack, &O)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qa = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qda = np.ascontiguousarray(qd, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fa = np.ascontiguousarray(f_act, dtype=np.float64)
    cdef int nq = O.T.nq
    qdd = np.zeros(nq)
    cdef double[::1] ov = qdd
    cdef OracleWs W
    if oracle_ws_alloc(&O, &W):
        raise MemoryError
    cdef int status
    cdef const double* fp = &fa[0] if fa.shape[0] else NULL
    try:
        status = _oracle_qdd_c(&O, &W, &qa[0], &qda[0], fp, &ov[0])
    finally:
        oracle_ws_free(&W)
    if status != OK:
        return None, status
    return qdd, status


def oracle_energies(pack, q, qd):
    cdef Oracle O
    oracle_from_pack(pack, &O)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qa = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qda = np.ascontiguousarray(qd, dtype=np.float64)
    cdef int na = O.na
    l = np.zeros(na)
    ld = np.zeros(na)
    cdef double[::1] lv = l
    cdef double[::1] ldv = ld
    cdef double out5[5]
    cdef OracleWs W
    if oracle_ws_alloc(&O, &W):
        raise MemoryError
    cdef int a
    try:
        _energies_c(&O, &W, &qa[0], &qda[0], out5)
        for a in range(na):
            lv[a] = W.l[a]
            ldv[a] = W.ld[a]
    finally:
        oracle_ws_free(&W)
    return out5[0], out5[1], out5[2], l, ld


# Dormand-Prince 5(4) tableau
cdef double DP_A[6][6]
DP_A[0][:] = [1.0 / 5, 0, 0, 0, 0, 0]
DP_A[1][:] = [3.0 / 40, 9.0 / 40, 0, 0, 0, 0]
DP_A[2][:] = [44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0]
DP_A[3][:] = [19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0]
DP_A[4][:] = [9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0]
DP_A[5][:] = [35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84]
cdef double DP_E[7]
DP_E[:] = [71.0 / 57600, 0.0, -71.0 / 16695, 71.0 / 1920, -17253.0 / 339200, 22.0 / 525, -1.0 / 40]


def oracle_integrate(pack, q0, qd0, f_times, f_vals, double t_end, double dt_out,
                     double rtol, double atol, double max_step, double settle_tol,
                     bint record):
    cdef Oracle O
    oracle_from_pack(pack, &O)
    cdef int nq = O.T.nq, na = O.na
    cdef cnp.ndarray[cnp.float64_t, ndim=1] q0a = np.ascontiguousarray(q0, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qd0a = np.ascontiguousarray(qd0, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fta = np.ascontiguousarray(f_times, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] fva = np.ascontiguousarray(
        np.atleast_2d(np.asarray(f_vals, dtype=np.float64)))
    cdef int n_out = <int> round(t_end / dt_out)
    cdef int nrows = n_out + 1 if record else 1
    rows_t = np.zeros(nrows)
    rows_q = np.zeros((nrows, nq))
    rows_qd = np.zeros((nrows, nq))
    rows_l = np.zeros((nrows, na))
    rows_ld = np.zeros((nrows, na))
    rows_e = np.zeros((nrows, 3))
    qf = np.zeros(nq)
    qdf = np.zeros(nq)
    cdef double[::1] rt = rows_t
    cdef double[:, ::1] rq = rows_q
    cdef double[:, ::1] rqd = rows_qd
    cdef double[:, ::1] rl = rows_l
    cdef double[:, ::1] rld = rows_ld
    cdef double[:, ::1] re = rows_e
    cdef double[::1] qfv = qf
    cdef double[::1] qdfv = qdf
    cdef int nseg = <int> fta.shape[0]
    cdef const double* ftp = &fta[0]
    cdef const double* fvp = &fva[0, 0] if fva.size else NULL

    cdef OracleWs W
    if oracle_ws_alloc(&O, &W):
        raise MemoryError
    cdef int ny = 2 * nq
    cdef double* ybuf = <double*> malloc((11 * ny) * sizeof(double))
    if ybuf == NULL:
        oracle_ws_free(&W)
        raise MemoryError
    cdef double* y = ybuf
    cdef double* y_new = ybuf + ny
    cdef double* yi = ybuf + 2 * ny
    cdef double* kst = ybuf + 3 * ny      # 7 stages
    cdef double* err = ybuf + 10 * ny

    cdef int status = OK, out_idx = 1, seg = 0, settled = 0, i, j, st, bad
    cdef double t = 0.0, h, h_try, h_lim, t_next_out, seg_end, target
    cdef double err_norm, sc, fac, vmax
    cdef double out5[5]
    cdef int n_rows_done

    with nogil:
        for i in range(nq):
            y[i] = q0a[i]
            y[nq + i] = qd0a[i]
        while seg + 1 < nseg and ftp[seg + 1] <= 0.0:
            seg += 1
        if record:
            _energies_c(&O, &W, y, y + nq, out5)
            rt[0] = 0.0
            for i in range(nq):
                rq[0, i] = y[i]
                rqd[0, i] = y[nq + i]
            for i in range(na):
                rl[0, i] = W.l[i]
                rld[0, i] = W.ld[i]
            re[0, 0] = out5[0]; re[0, 1] = out5[1]; re[0, 2] = out5[2]
        h = 1e-3
        if dt_out < h:
            h = dt_out
        if max_step < h:
            h = max_step
        # k1
        st = _rhs_stage(&O, &W, y, fvp + seg * na, kst, nq)
        if st != OK:
            status = st
        while status == OK and t < t_end - 1e-12:
            seg_end = ftp[seg + 1] if seg + 1 < nseg else 1e300
            target = t_end if t_end < seg_end else seg_end
            t_next_out = out_idx * dt_out
            h_lim = (target if target < t_next_out else t_next_out) - t
            h_try = h if h < h_lim else h_lim
            if h_try > max_step:
                h_try = max_step
            if h_try < 1e-13 * (1.0 if t < 1.0 else t):
                status = STEP_FAIL
                break
            bad = 0
            for i in range(5):
                for j in range(ny):
                    sc = 0.0
                    # accumulate a-row
                    pass
                for j in range(ny):
                    yi[j] = y[j]
                for st in range(i + 1):
                    for j in range(ny):
                        yi[j] += h_try * DP_A[i][st] * kst[st * ny + j]
                st = _rhs_stage(&O, &W, yi, fvp + seg * na, kst + (i + 1) * ny, nq)
                if st != OK:
                    bad = 1
                    break
            if not bad:
                for j in range(ny):
                    y_new[j] = y[j]
                for st in range(6):
                    for j in range(ny):
                        y_new[j] += h_try * DP_A[5][st] * kst[st * ny + j]
                st = _rhs_stage(&O, &W, y_new, fvp + seg * na, kst + 6 * ny, nq)
                if st != OK:
                    bad = 1
            if bad:
                h = h_try * 0.2
                if h < 1e-13 * (1.0 if t < 1.0 else t):
                    status = STEP_FAIL
                    break
                continue
            err_norm = 0.0
            for j in range(ny):
                err[j] = 0.0
                for st in range(7):
                    err[j] += DP_E[st] * kst[st * ny + j]
                err[j] *= h_try
                sc = fabs(y[j])
                if fabs(y_new[j]) > sc:
                    sc = fabs(y_new[j])
                sc = atol + rtol * sc
                err_norm += (err[j] / sc) ** 2
            err_norm = sqrt(err_norm / ny)
            if err_norm <= 1.0:
                # accept
                if h_try >= (t_next_out - t) - 1e-14 * (t_next_out if t_next_out > 1.0 else 1.0):
                    t = t_next_out
                    i = 1
                else:
                    i = 0
                    if h_try >= (target - t) - 1e-14 * (target if target > 1.0 else 1.0):
                        t = target
                    else:
                        t = t + h_try
                for j in range(ny):
                    y[j] = y_new[j]
                memcpy(kst, kst + 6 * ny, ny * sizeof(double))
                vmax = 0.0
                for j in range(ny):
                    if fabs(y[j]) > vmax:
                        vmax = fabs(y[j])
                if vmax > 1e8:
                    status = NON_FINITE
                    break
                if i:  # output row
                    if record:
                        _energies_c(&O, &W, y, y + nq, out5)
                        rt[out_idx] = t
                        for j in range(nq):
                            rq[out_idx, j] = y[j]
                            rqd[out_idx, j] = y[nq + j]
                        for j in range(na):
                            rl[out_idx, j] = W.l[j]
                            rld[out_idx, j] = W.ld[j]
                        re[out_idx, 0] = out5[0]
                        re[out_idx, 1] = out5[1]
                        re[out_idx, 2] = out5[2]
                    out_idx += 1
                if seg + 1 < nseg and seg_end <= t + 1e-15:
                    seg += 1
                    st = _rhs_stage(&O, &W, y, fvp + seg * na, kst, nq)
                    if st != OK:
                        status = st
                        break
                if err_norm == 0.0:
                    fac = 5.0
                else:
                    fac = 0.9 * pow(err_norm, -0.2)
                    if fac > 5.0:
                        fac = 5.0
                    if fac < 0.2:
                        fac = 0.2
                h = h_try * fac
                if settle_tol > 0.0:
                    vmax = 0.0
                    for j in range(nq):
                        if fabs(y[nq + j]) > vmax:
                            vmax = fabs(y[nq + j])
                    if vmax < settle_tol:
                        settled = 1
                        break
            else:
                fac = 0.9 * pow(err_norm, -0.2)
                if fac < 0.2:
                    fac = 0.2
                h = h_try * fac
        for j in range(nq):
            qfv[j] = y[j]
            qdfv[j] = y[nq + j]

    n_rows_done = out_idx if record else 0
    free(ybuf)
    oracle_ws_free(&W)
    return (status, rows_t, rows_q, rows_qd, rows_l, rows_ld, rows_e,
            qf, qdf, t, n_rows_done, bool(settled))


cdef int _rhs_stage(Oracle* O, OracleWs* W, const double* y, const double* f_act,
                    double* out, int nq) noexcept nogil:
    cdef int st, j
    st = _oracle_qdd_c(O, W, y, y + nq, f_act, out + nq)
    if st != OK:
        return st
    for j in range(nq):
        out[j] = y[nq + j]
        if not isfinite(out[nq + j]):
            return SINGULAR_MASS
    return OK


# ---------------------------------------------------------------------------
# engine kernels
# ---------------------------------------------------------------------------

cdef struct Engine:
    Tree T
    int ns_spring
    const int* spring_coord
    const double* spring_k
    const double* spring_c
    const double* spring_ref
    const int* spring_act
    int nl
    const int* line_idx
    const double* line_par
    const int* line_act
    int ncc
    const int* conn_pairs
    int ne
    const int* eq_pairs
    int na_rep
    const int* rep_idx
    const double* joint_damp
    double gravity
    int nq_skel
    int pin_marker
    int nc


cdef void engine_from_pack(object pack, Engine* E):
    tree_from_pack(pack, &E.T)
    E.ns_spring = <int> pack.spring_coord.shape[0]
    E.spring_coord = iptr(pack.spring_coord)
    E.spring_k = dptr(pack.spring_k)
    E.spring_c = dptr(pack.spring_c)
    E.spring_ref = dptr(pack.spring_ref)
    E.spring_act = iptr(pack.spring_act)
    E.nl = <int> pack.line_idx.shape[0]
    E.line_idx = iptr(pack.line_idx)
    E.line_par = dptr(pack.line_par)
    E.line_act = iptr(pack.line_act)
    E.ncc = <int> pack.conn_pairs.shape[0]
    E.conn_pairs = iptr(pack.conn_pairs)
    E.ne = <int> pack.eq_pairs.shape[0]
    E.eq_pairs = iptr(pack.eq_pairs)
    E.na_rep = <int> pack.rep_idx.shape[0]
    E.rep_idx = iptr(pack.rep_idx)
    E.joint_damp = dptr(pack.joint_damp)
    E.gravity = <double> pack.gravity
    E.nq_skel = <int> pack.nq_skel
    E.pin_marker = <int> pack.pin_marker
    E.nc = 2 * E.ncc + E.ne + (2 if E.pin_marker >= 0 else 0)


cdef void _engine_constraints_c(Engine* E, FkBuf* F, const double* x,
                                const double* pin_target, double* c, double* Jc,
                                double* jdv, int nx) noexcept nogil:
    cdef int row = 0, p, tip, ref, i, j, k
    for p in range(E.ncc):
        tip = E.conn_pairs[2 * p]
        ref = E.conn_pairs[2 * p + 1]
        c[row] = F.r[2 * tip] - F.r[2 * ref]
        c[row + 1] = F.r[2 * tip + 1] - F.r[2 * ref + 1]
        if Jc != NULL:
            for k in range(nx):
                Jc[row * nx + k] = F.J[2 * tip * nx + k] - F.J[2 * ref * nx + k]
                Jc[(row + 1) * nx + k] = F.J[(2 * tip + 1) * nx + k] - F.J[(2 * ref + 1) * nx + k]
            jdv[row] = F.ra0[2 * tip] - F.ra0[2 * ref]
            jdv[row + 1] = F.ra0[2 * tip + 1] - F.ra0[2 * ref + 1]
        row += 2
    for p in range(E.ne):
        i = E.eq_pairs[2 * p]
        j = E.eq_pairs[2 * p + 1]
        c[row] = x[i] - x[j]
        if Jc != NULL:
            memset(Jc + row * nx, 0, nx * sizeof(double))
            Jc[row * nx + i] = 1.0
            Jc[row * nx + j] = -1.0
            jdv[row] = 0.0
        row += 1
    if E.pin_marker >= 0:
        tip = E.pin_marker
        c[row] = F.r[2 * tip] - pin_target[0]
        c[row + 1] = F.r[2 * tip + 1] - pin_target[1]
        if Jc != NULL:
            for k in range(nx):
                Jc[row * nx + k] = F.J[2 * tip * nx + k]
                Jc[(row + 1) * nx + k] = F.J[(2 * tip + 1) * nx + k]
            jdv[row] = F.ra0[2 * tip]
            jdv[row + 1] = F.ra0[2 * tip + 1]


def engine_residual(pack, x, pin_target):
    cdef Engine E
    engine_from_pack(pack, &E)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pin = np.ascontiguousarray(pin_target, dtype=np.float64)
    cdef int nx = E.T.nq
    cdef int nfk = fkbuf_doubles(E.T.nb, E.T.nm, nx)
    cdef double* mem = <double*> malloc((nfk + nx + E.nc) * sizeof(double))
    if mem == NULL:
        raise MemoryError
    cdef FkBuf F
    fkbuf_attach(&F, mem, E.T.nb, E.T.nm, nx)
    cdef double* vzero = mem + nfk
    cdef double* cbuf = mem + nfk + nx
    out = np.zeros(E.nc)
    cdef double[::1] ov = out
    cdef int i
    memset(vzero, 0, nx * sizeof(double))
    tree_fk(&E.T, &xa[0], vzero, False, False, &F)
    _engine_constraints_c(&E, &F, &xa[0], &pin[0], cbuf, NULL, NULL, nx)
    for i in range(E.nc):
        ov[i] = cbuf[i]
    free(mem)
    return out


cdef void _engine_report_c(Engine* E, FkBuf* F, const double* x, double* out3,
                           double* l, double* ld) noexcept nogil:
    cdef int m, b, s, e, a, ia, ib
    cdef double T = 0.0, Vg = 0.0, Ve = 0.0
    cdef double mm, dx, dy, le, g = E.gravity
    for m in range(E.T.nm):
        mm = E.T.mmass[m]
        if mm > 0.0:
            T += 0.5 * mm * (F.rd[2 * m] ** 2 + F.rd[2 * m + 1] ** 2)
            Vg += mm * g * F.r[2 * m + 1]
    for b in range(E.T.nb):
        T += 0.5 * E.T.binertia[b] * F.w[b] ** 2
    for s in range(E.ns_spring):
        Ve += 0.5 * E.spring_k[s] * (x[E.spring_coord[s]] - E.spring_ref[s]) ** 2
    for e in range(E.nl):
        ia = E.line_idx[2 * e]
        ib = E.line_idx[2 * e + 1]
        dx = F.r[2 * ib] - F.r[2 * ia]
        dy = F.r[2 * ib + 1] - F.r[2 * ia + 1]
        Ve += 0.5 * E.line_par[3 * e] * (hypot(dx, dy) - E.line_par[3 * e + 2]) ** 2
    for a in range(E.na_rep):
        ia = E.rep_idx[2 * a]
        ib = E.rep_idx[2 * a + 1]
        dx = F.r[2 * ib] - F.r[2 * ia]
        dy = F.r[2 * ib + 1] - F.r[2 * ia + 1]
        le = hypot(dx, dy)
        l[a] = le
        ld[a] = (dx * (F.rd[2 * ib] - F.rd[2 * ia]) + dy * (F.rd[2 * ib + 1] - F.rd[2 * ia + 1])) / le
    out3[0] = T
    out3[1] = Vg
    out3[2] = Ve


def engine_simulate(pack, x0, v0, f_times, f_vals, double dt, int n_steps,
                    double alpha, double beta, double drift_tol, pin_target,
                    double settle_tol, bint record):
    cdef Engine E
    engine_from_pack(pack, &E)
    cdef int nx = E.T.nq, nc = E.nc, na = E.na_rep
    cdef int nskel = E.nq_skel
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xa = np.ascontiguousarray(x0, dtype=np.float64).copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] va = np.ascontiguousarray(v0, dtype=np.float64).copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fta = np.ascontiguousarray(f_times, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] fva = np.ascontiguousarray(
        np.atleast_2d(np.asarray(f_vals, dtype=np.float64)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pin = np.ascontiguousarray(pin_target, dtype=np.float64)
    cdef int nrows = n_steps + 1 if record else 1
    rows_t = np.zeros(nrows)
    rows_q = np.zeros((nrows, nskel))
    rows_qd = np.zeros((nrows, nskel))
    rows_l = np.zeros((nrows, na))
    rows_ld = np.zeros((nrows, na))
    rows_e = np.zeros((nrows, 3))
    cdef double[::1] rt = rows_t
    cdef double[:, ::1] rq = rows_q
    cdef double[:, ::1] rqd = rows_qd
    cdef double[:, ::1] rl = rows_l
    cdef double[:, ::1] rld = rows_ld
    cdef double[:, ::1] re = rows_e
    cdef double[::1] xv = xa
    cdef double[::1] vv = va
    cdef int nseg = <int> fta.shape[0]
    cdef const double* ftp = &fta[0]
    cdef const double* fvp = &fva[0, 0] if fva.size else NULL
    cdef int nfa = <int> fva.shape[1]

    # workspace
    cdef int nfk = fkbuf_doubles(E.T.nb, E.T.nm, nx)
    cdef int ns = nx + nc
    cdef int ndbl = nfk + 2 * nx * nx + nx + 3 * nc + nc * nx + 2 * ns * ns + 2 * ns + 2 * na + 3
    cdef double* mem = <double*> malloc(ndbl * sizeof(double) + ns * sizeof(int))
    if mem == NULL:
        raise MemoryError
    cdef FkBuf F
    cdef double* p = mem
    cdef double* M
    cdef double* D
    cdef double* Q
    cdef double* c
    cdef double* cn
    cdef double* jdv
    cdef double* Jc
    cdef double* A
    cdef double* LU
    cdef double* rhs
    cdef double* sol
    cdef double* lbuf
    cdef double* ldbuf
    cdef double* out3
    cdef int* piv
    fkbuf_attach(&F, p, E.T.nb, E.T.nm, nx)
    p += nfk
    M = p; p += nx * nx
    D = p; p += nx * nx
    Q = p; p += nx
    c = p; p += nc
    cn = p; p += nc
    jdv = p; p += nc
    Jc = p; p += nc * nx
    A = p; p += ns * ns
    LU = p; p += ns * ns
    rhs = p; p += ns
    sol = p; p += ns
    lbuf = p; p += na
    ldbuf = p; p += na
    out3 = p; p += 3
    piv = <int*> p

    cdef int status = OK, settled = 0, n_done = 0, seg = 0
    cdef double max_drift = 0.0, max_eqgap = 0.0
    cdef int step, i, j, k, it, m, s, e, ia, ib, cidx
    cdef double t, fs, fe, dx, dy, le, u0, u1, lde, drift, vmax, g = E.gravity
    cdef double mm

    with nogil:
        if record:
            tree_fk(&E.T, &xv[0], &vv[0], True, False, &F)
            _engine_report_c(&E, &F, &xv[0], out3, lbuf, ldbuf)
            rt[0] = 0.0
            for j in range(nskel):
                rq[0, j] = xv[j]
                rqd[0, j] = vv[j]
            for j in range(na):
                rl[0, j] = lbuf[j]
                rld[0, j] = ldbuf[j]
            re[0, 0] = out3[0]; re[0, 1] = out3[1]; re[0, 2] = out3[2]

        for step in range(n_steps):
            t = step * dt
            while seg + 1 < nseg and ftp[seg + 1] <= t + 1e-12:
                seg += 1

            tree_fk(&E.T, &xv[0], &vv[0], True, True, &F)
            # mass matrix
            memset(M, 0, nx * nx * sizeof(double))
            for m in range(E.T.nm):
                mm = E.T.mmass[m]
                if mm > 0.0:
                    for i in range(nx):
                        for j in range(nx):
                            M[i * nx + j] += mm * (F.J[2 * m * nx + i] * F.J[2 * m * nx + j]
                                                   + F.J[(2 * m + 1) * nx + i] * F.J[(2 * m + 1) * nx + j])
            for m in range(E.T.nb):
                mm = E.T.binertia[m]
                if mm > 0.0:
                    for i in range(nx):
                        for j in range(nx):
                            M[i * nx + j] += mm * E.T.jw[m * nx + i] * E.T.jw[m * nx + j]
            # forces and damping jacobian
            memset(Q, 0, nx * sizeof(double))
            memset(D, 0, nx * nx * sizeof(double))
            for m in range(E.T.nm):
                mm = E.T.mmass[m]
                if mm > 0.0:
                    for i in range(nx):
                        Q[i] -= mm * g * F.J[(2 * m + 1) * nx + i]
                        Q[i] -= mm * (F.J[2 * m * nx + i] * F.ra0[2 * m]
                                      + F.J[(2 * m + 1) * nx + i] * F.ra0[2 * m + 1])
            for s in range(E.ns_spring):
                cidx = E.spring_coord[s]
                fs = -E.spring_k[s] * (xv[cidx] - E.spring_ref[s]) - E.spring_c[s] * vv[cidx]
                if E.spring_act[s] >= 0:
                    fs += fvp[seg * nfa + E.spring_act[s]]
                Q[cidx] += fs
                D[cidx * nx + cidx] += E.spring_c[s]
            for e in range(E.nl):
                ia = E.line_idx[2 * e]
                ib = E.line_idx[2 * e + 1]
                dx = F.r[2 * ib] - F.r[2 * ia]
                dy = F.r[2 * ib + 1] - F.r[2 * ia + 1]
                le = hypot(dx, dy)
                u0 = dx / le
                u1 = dy / le
                lde = (u0 * (F.rd[2 * ib] - F.rd[2 * ia]) + u1 * (F.rd[2 * ib + 1] - F.rd[2 * ia + 1]))
                fe = -E.line_par[3 * e] * (le - E.line_par[3 * e + 2]) - E.line_par[3 * e + 1] * lde
                if E.line_act[e] >= 0:
                    fe += fvp[seg * nfa + E.line_act[e]]
                for i in range(nx):
                    rhs[i] = (u0 * (F.J[2 * ib * nx + i] - F.J[2 * ia * nx + i])
                              + u1 * (F.J[(2 * ib + 1) * nx + i] - F.J[(2 * ia + 1) * nx + i]))
                for i in range(nx):
                    Q[i] += fe * rhs[i]
                    for j in range(nx):
                        D[i * nx + j] += E.line_par[3 * e + 1] * rhs[i] * rhs[j]
            for i in range(nx):
                Q[i] -= E.joint_damp[i] * vv[i]
                D[i * nx + i] += E.joint_damp[i]

            _engine_constraints_c(&E, &F, &xv[0], &pin[0], c, Jc, jdv, nx)

            # saddle system
            memset(A, 0, ns * ns * sizeof(double))
            for i in range(nx):
                for j in range(nx):
                    A[i * ns + j] = M[i * nx + j] + 0.5 * dt * D[i * nx + j]
                rhs[i] = Q[i]
            for i in range(nc):
                for j in range(nx):
                    A[j * ns + nx + i] = Jc[i * nx + j]
                    A[(nx + i) * ns + j] = Jc[i * nx + j]
                fs = 0.0
                for j in range(nx):
                    fs += Jc[i * nx + j] * vv[j]
                rhs[nx + i] = -jdv[i] - alpha * fs - beta * c[i]
            memcpy(LU, A, ns * ns * sizeof(double))
            if lu_factor(LU, piv, ns):
                status = SINGULAR_SOLVE
                break
            memcpy(sol, rhs, ns * sizeof(double))
            lu_solve(LU, piv, sol, ns)
            vmax = 0.0
            for i in range(nx):
                if not isfinite(sol[i]):
                    status = SINGULAR_SOLVE
                    break
            if status != OK:
                break
            for i in range(nx):
                vv[i] += dt * sol[i]
                xv[i] += dt * vv[i]

            if nc > 0:
                # position projection onto the constraint manifold
                for it in range(PROJ_ITERS):
                    tree_fk(&E.T, &xv[0], &vv[0], False, False, &F)
                    _engine_constraints_c(&E, &F, &xv[0], &pin[0], cn, NULL, NULL, nx)
                    drift = 0.0
                    for i in range(nc):
                        if fabs(cn[i]) > drift:
                            drift = fabs(cn[i])
                    if drift <= PROJ_TOL:
                        break
                    memset(rhs, 0, ns * sizeof(double))
                    for i in range(nc):
                        rhs[nx + i] = -cn[i]
                    memcpy(sol, rhs, ns * sizeof(double))
                    lu_solve(LU, piv, sol, ns)
                    for i in range(nx):
                        xv[i] += sol[i]
                tree_fk(&E.T, &xv[0], &vv[0], False, False, &F)
                _engine_constraints_c(&E, &F, &xv[0], &pin[0], cn, NULL, NULL, nx)
                drift = 0.0
                for i in range(nc):
                    if fabs(cn[i]) > drift:
                        drift = fabs(cn[i])
                if drift > PROJ_TOL:
                    # stale-Jacobian iteration stalled; full Newton with refresh
                    for it in range(PROJ_ITERS):
                        tree_fk(&E.T, &xv[0], &vv[0], False, True, &F)
                        _engine_constraints_c(&E, &F, &xv[0], &pin[0], cn, Jc, jdv, nx)
                        drift = 0.0
                        for i in range(nc):
                            if fabs(cn[i]) > drift:
                                drift = fabs(cn[i])
                        if drift <= PROJ_TOL:
                            break
                        for i in range(nc):
                            for j in range(nx):
                                A[j * ns + nx + i] = Jc[i * nx + j]
                                A[(nx + i) * ns + j] = Jc[i * nx + j]
                        memcpy(LU, A, ns * ns * sizeof(double))
                        if lu_factor(LU, piv, ns):
                            status = SINGULAR_SOLVE
                            break
                        memset(rhs, 0, ns * sizeof(double))
                        for i in range(nc):
                            rhs[nx + i] = -cn[i]
                        memcpy(sol, rhs, ns * sizeof(double))
                        lu_solve(LU, piv, sol, ns)
                        for i in range(nx):
                            xv[i] += sol[i]
                    if status != OK:
                        break
                    tree_fk(&E.T, &xv[0], &vv[0], False, False, &F)
                    _engine_constraints_c(&E, &F, &xv[0], &pin[0], cn, NULL, NULL, nx)
                    drift = 0.0
                    for i in range(nc):
                        if fabs(cn[i]) > drift:
                            drift = fabs(cn[i])
                if drift > max_drift:
                    max_drift = drift
                for i in range(E.ne):
                    if fabs(cn[2 * E.ncc + i]) > max_eqgap:
                        max_eqgap = fabs(cn[2 * E.ncc + i])
                # velocity projection (start-of-step constraint Jacobian)
                memset(rhs, 0, ns * sizeof(double))
                for i in range(nc):
                    fs = 0.0
                    for j in range(nx):
                        fs += Jc[i * nx + j] * vv[j]
                    rhs[nx + i] = -fs
                memcpy(sol, rhs, ns * sizeof(double))
                lu_solve(LU, piv, sol, ns)
                for i in range(nx):
                    vv[i] += sol[i]
                if drift > drift_tol:
                    status = DRIFT_FAIL
                    break

            vmax = 0.0
            for i in range(nx):
                if fabs(xv[i]) > vmax:
                    vmax = fabs(xv[i])
            if not isfinite(vmax) or vmax > 1e8:
                status = NON_FINITE
                break
            n_done = step + 1
            if record:
                tree_fk(&E.T, &xv[0], &vv[0], True, False, &F)
                _engine_report_c(&E, &F, &xv[0], out3, lbuf, ldbuf)
                rt[n_done] = (step + 1) * dt
                for j in range(nskel):
                    rq[n_done, j] = xv[j]
                    rqd[n_done, j] = vv[j]
                for j in range(na):
                    rl[n_done, j] = lbuf[j]
                    rld[n_done, j] = ldbuf[j]
                re[n_done, 0] = out3[0]; re[n_done, 1] = out3[1]; re[n_done, 2] = out3[2]
            if settle_tol > 0.0:
                vmax = 0.0
                for j in range(nskel):
                    if fabs(vv[j]) > vmax:
                        vmax = fabs(vv[j])
                if vmax < settle_tol:
                    settled = 1
                    break

    free(mem)
    return (status, rows_t, rows_q, rows_qd, rows_l, rows_ld, rows_e,
            xa, va, n_done, max_drift, max_eqgap, bool(settled))
