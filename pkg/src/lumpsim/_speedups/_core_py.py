"""Pure-Python (numpy) kernels: the reference implementation.

The compiled extension `_core` mirrors this module's public API exactly.
Status codes returned by the drivers:

    0 ok, 1 step underflow, 2 non-finite state, 3 singular mass matrix,
    4 singular constraint solve, 5 drift tolerance exceeded
"""

from __future__ import annotations

import numpy as np

from .packs import REV, SLIDE, XY

BACKEND_NAME = "python"

_FD_H = 1e-6          # central-difference step for mass-matrix derivatives
_PROJ_TOL = 1e-11     # post-step constraint projection target
_PROJ_ITERS = 3

OK, STEP_FAIL, NON_FINITE, SINGULAR_MASS, SINGULAR_SOLVE, DRIFT_FAIL = range(6)


def _perp(v):
    return np.array([-v[1], v[0]])


def _rot(th):
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s], [s, c]])


class _Frame:
    """Per-configuration kinematic data for one tree."""

    __slots__ = ("th", "w", "o", "od", "a0", "pivot", "axis_w", "r", "rd", "ra0", "J")


def _fk(pack, q, v=None, want_jac=True):
    nb, nm = pack.nbody, pack.nmarker
    nq = q.size
    fr = _Frame()
    fr.th = np.zeros(nb)
    fr.w = np.zeros(nb)
    fr.o = np.zeros((nb, 2))
    fr.od = np.zeros((nb, 2))
    fr.a0 = np.zeros((nb, 2))
    fr.pivot = np.zeros((nb, 2))
    fr.axis_w = np.zeros((nb, 2))
    with_vel = v is not None

    for b in range(nb):
        p = pack.body_parent[b]
        if p < 0:
            th_p, w_p = 0.0, 0.0
            o_p = od_p = a0_p = np.zeros(2)
        else:
            th_p, w_p = fr.th[p], fr.w[p]
            o_p, od_p, a0_p = fr.o[p], fr.od[p], fr.a0[p]
        R = _rot(th_p)
        arm = R @ pack.body_anchor[b]
        btype = pack.body_type[b]
        c0 = pack.body_coord[b]
        if btype == REV:
            fr.th[b] = th_p + q[c0]
            fr.o[b] = o_p + arm
            fr.pivot[b] = fr.o[b]
            if with_vel:
                fr.w[b] = w_p + v[c0]
                fr.od[b] = od_p + w_p * _perp(arm)
                fr.a0[b] = a0_p - w_p * w_p * arm
        elif btype == SLIDE:
            u = R @ pack.body_axis[b]
            d = arm + q[c0] * u
            fr.th[b] = th_p
            fr.o[b] = o_p + d
            fr.axis_w[b] = u
            if with_vel:
                fr.w[b] = w_p
                fr.od[b] = od_p + w_p * _perp(d) + v[c0] * u
                fr.a0[b] = a0_p - w_p * w_p * d + 2.0 * w_p * v[c0] * _perp(u)
        else:  # XY, world-axis translation
            fr.th[b] = th_p
            fr.o[b] = o_p + arm + np.array([q[c0], q[c0 + 1]])
            if with_vel:
                fr.w[b] = w_p
                fr.od[b] = od_p + w_p * _perp(arm) + np.array([v[c0], v[c0 + 1]])
                fr.a0[b] = a0_p - w_p * w_p * arm

    fr.r = np.zeros((nm, 2))
    fr.rd = np.zeros((nm, 2))
    fr.ra0 = np.zeros((nm, 2))
    fr.J = np.zeros((nm, 2, nq)) if want_jac else None
    for m in range(nm):
        b = pack.marker_body[m]
        if b < 0:
            fr.r[m] = pack.marker_local[m]
            continue
        rel = _rot(fr.th[b]) @ pack.marker_local[m]
        fr.r[m] = fr.o[b] + rel
        if with_vel:
            fr.rd[m] = fr.od[b] + fr.w[b] * _perp(rel)
            fr.ra0[m] = fr.a0[b] - fr.w[b] * fr.w[b] * rel
        if want_jac:
            a = b
            while a >= 0:
                btype = pack.body_type[a]
                c0 = pack.body_coord[a]
                if btype == REV:
                    fr.J[m, :, c0] += _perp(fr.r[m] - fr.pivot[a])
                elif btype == SLIDE:
                    fr.J[m, :, c0] += fr.axis_w[a]
                else:
                    fr.J[m, 0, c0] += 1.0
                    fr.J[m, 1, c0 + 1] += 1.0
                a = pack.body_parent[a]
    return fr


# ---------------------------------------------------------------------------
# oracle (minimal coordinates, continuous actuator energies)
# ---------------------------------------------------------------------------


def _oracle_fk(pack, q, v=None, want_jac=True):
    fr = _fk(pack, q, v, want_jac)
    if pack.stance:
        f = pack.foot_marker
        fr.r = fr.r - fr.r[f]
        fr.rd = fr.rd - fr.rd[f]
        fr.ra0 = fr.ra0 - fr.ra0[f]
        if want_jac:
            fr.J = fr.J - fr.J[f]
    return fr


def _act_geometry(pack, fr):
    """Lengths, unit vectors and length Jacobians for all actuators."""
    na = pack.nact
    nq = pack.nq
    l = np.zeros(na)
    u = np.zeros((na, 2))
    dl = np.zeros((na, nq))
    for a in range(na):
        ia, ib = pack.act_idx[a]
        d = fr.r[ib] - fr.r[ia]
        l[a] = np.hypot(d[0], d[1])
        u[a] = d / l[a]
        if fr.J is not None:
            dl[a] = u[a] @ (fr.J[ib] - fr.J[ia])
    return l, u, dl


def _oracle_mass(pack, fr):
    nq = pack.nq
    M = np.zeros((nq, nq))
    for m in range(pack.nmarker):
        mm = pack.marker_mass[m]
        if mm > 0.0:
            M += mm * fr.J[m].T @ fr.J[m]
    for b in range(pack.nbody):
        ib = pack.body_inertia[b]
        if ib > 0.0:
            M += ib * np.outer(pack.jw[b], pack.jw[b])
    for a in range(pack.nact):
        ma = pack.act_par[a, 0]
        ja = fr.J[pack.act_idx[a, 0]]
        jb = fr.J[pack.act_idx[a, 1]]
        M += (ma / 3.0) * (ja.T @ ja + jb.T @ jb)
        cross = ja.T @ jb
        M += (ma / 6.0) * (cross + cross.T)
    return M


def oracle_mass(pack, q):
    fr = _oracle_fk(pack, np.asarray(q, float))
    return _oracle_mass(pack, fr)


def oracle_fk(pack, q):
    """Marker positions/Jacobians plus actuator lengths and length Jacobians."""
    fr = _oracle_fk(pack, np.asarray(q, float))
    l, _, dl = _act_geometry(pack, fr)
    return fr.r.copy(), fr.J.copy(), l, dl


def _oracle_gradv(pack, fr, l, dl):
    g = pack.gravity
    grad = np.zeros(pack.nq)
    for m in range(pack.nmarker):
        mm = pack.marker_mass[m]
        if mm > 0.0:
            grad += mm * g * fr.J[m, 1]
    for a in range(pack.nact):
        ma, ka, _, l0a = pack.act_par[a]
        ia, ib = pack.act_idx[a]
        grad += 0.5 * ma * g * (fr.J[ia, 1] + fr.J[ib, 1])
        grad += ka * (l[a] - l0a) * dl[a]
    return grad


def oracle_gradv(pack, q):
    fr = _oracle_fk(pack, np.asarray(q, float))
    l, _, dl = _act_geometry(pack, fr)
    return _oracle_gradv(pack, fr, l, dl)


def oracle_statics(pack, q):
    """(potential gradient, actuator length Jacobian) at rest at q."""
    fr = _oracle_fk(pack, np.asarray(q, float))
    l, _, dl = _act_geometry(pack, fr)
    return _oracle_gradv(pack, fr, l, dl), dl


def _coriolis(pack, q, qd):
    nq = pack.nq
    dM = np.zeros((nq, nq, nq))
    for k in range(nq):
        qp = q.copy()
        qp[k] += _FD_H
        mp = _oracle_mass(pack, _oracle_fk(pack, qp))
        qp[k] -= 2.0 * _FD_H
        mm = _oracle_mass(pack, _oracle_fk(pack, qp))
        dM[k] = (mp - mm) / (2.0 * _FD_H)
    a = np.tensordot(qd, dM, axes=(0, 0))          # sum_k qd_k dM/dq_k
    cqd = a @ qd
    for i in range(nq):
        cqd[i] -= 0.5 * qd @ dM[i] @ qd
    return cqd


def _oracle_qdd(pack, q, qd, f_act):
    fr = _oracle_fk(pack, q, qd)
    l, u, dl = _act_geometry(pack, fr)
    ld = np.array(
        [
            u[a] @ (fr.rd[pack.act_idx[a, 1]] - fr.rd[pack.act_idx[a, 0]])
            for a in range(pack.nact)
        ]
    )
    rhs = -_oracle_gradv(pack, fr, l, dl)
    for a in range(pack.nact):
        rhs += (f_act[a] - pack.act_par[a, 2] * ld[a]) * dl[a]
    rhs -= pack.joint_damp * qd
    rhs -= _coriolis(pack, q, qd)
    M = _oracle_mass(pack, fr)
    try:
        qdd = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        return None, SINGULAR_MASS
    if not np.all(np.isfinite(qdd)):
        return None, SINGULAR_MASS
    return qdd, OK


def oracle_rhs(pack, q, qd, f_act):
    qdd, status = _oracle_qdd(
        pack, np.asarray(q, float), np.asarray(qd, float), np.asarray(f_act, float)
    )
    return qdd, status


def oracle_energies(pack, q, qd):
    """(T, Vg, Ve, actuator lengths, actuator rates) at a state."""
    q = np.asarray(q, float)
    qd = np.asarray(qd, float)
    fr = _oracle_fk(pack, q, qd, want_jac=False)
    g = pack.gravity
    T = 0.0
    Vg = 0.0
    for m in range(pack.nmarker):
        mm = pack.marker_mass[m]
        if mm > 0.0:
            T += 0.5 * mm * fr.rd[m] @ fr.rd[m]
            Vg += mm * g * fr.r[m, 1]
    for b in range(pack.nbody):
        T += 0.5 * pack.body_inertia[b] * fr.w[b] ** 2
    na = pack.nact
    l = np.zeros(na)
    ld = np.zeros(na)
    Ve = 0.0
    for a in range(na):
        ia, ib = pack.act_idx[a]
        ma, ka, _, l0a = pack.act_par[a]
        d = fr.r[ib] - fr.r[ia]
        l[a] = np.hypot(d[0], d[1])
        ld[a] = (d / l[a]) @ (fr.rd[ib] - fr.rd[ia])
        va, vb = fr.rd[ia], fr.rd[ib]
        T += (ma / 6.0) * (va @ vb + va @ va + vb @ vb)
        Vg += 0.5 * ma * g * (fr.r[ia, 1] + fr.r[ib, 1])
        Ve += 0.5 * ka * (l[a] - l0a) ** 2
    return T, Vg, Ve, l, ld


# Dormand-Prince 5(4) tableau (FSAL).
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)


def oracle_integrate(
    pack,
    q0,
    qd0,
    f_times,
    f_vals,
    t_end,
    dt_out,
    rtol,
    atol,
    max_step,
    settle_tol,
    record,
):
    """Adaptive embedded RK drive of the oracle dynamics.

    Piecewise-constant force segments restart the integration; output rows
    land exactly on the dt_out grid (steps are capped to grid points).
    Returns (status, rows..., q_f, qd_f, t_f, n_rows, settled).
    """
    nq = pack.nq
    na = pack.nact
    q0 = np.asarray(q0, float)
    qd0 = np.asarray(qd0, float)
    y = np.concatenate([q0, qd0])
    n_out = int(round(t_end / dt_out))
    nrows = n_out + 1 if record else 1
    rows_t = np.zeros(nrows)
    rows_q = np.zeros((nrows, nq))
    rows_qd = np.zeros((nrows, nq))
    rows_l = np.zeros((nrows, na))
    rows_ld = np.zeros((nrows, na))
    rows_e = np.zeros((nrows, 3))

    def f(t_unused, yv, f_act):
        qdd, status = _oracle_qdd(pack, yv[:nq], yv[nq:], f_act)
        if status != OK:
            return None
        return np.concatenate([yv[nq:], qdd])

    def store(idx, t, yv):
        T, Vg, Ve, l, ld = oracle_energies(pack, yv[:nq], yv[nq:])
        rows_t[idx] = t
        rows_q[idx] = yv[:nq]
        rows_qd[idx] = yv[nq:]
        rows_l[idx] = l
        rows_ld[idx] = ld
        rows_e[idx] = (T, Vg, Ve)

    seg = 0
    nseg = f_times.shape[0]
    while seg + 1 < nseg and f_times[seg + 1] <= 0.0:
        seg += 1
    if record:
        store(0, 0.0, y)
    out_idx = 1
    t = 0.0
    status = OK
    settled = False
    h = min(1e-3, dt_out, max_step)
    k1 = f(t, y, f_vals[seg])
    if k1 is None:
        return (SINGULAR_MASS, rows_t, rows_q, rows_qd, rows_l, rows_ld, rows_e,
                y[:nq], y[nq:], t, 1 if record else 0, settled)
    k = np.zeros((7, 2 * nq))

    while t < t_end - 1e-12:
        seg_end = f_times[seg + 1] if seg + 1 < nseg else np.inf
        target = min(t_end, seg_end)
        t_next_out = out_idx * dt_out
        h_lim = min(target, t_next_out) - t
        h_try = min(h, h_lim, max_step)
        if h_try < 1e-13 * max(1.0, t):
            status = STEP_FAIL
            break

        k[0] = k1
        bad = False
        for i in range(5):
            yi = y + h_try * (k[: i + 1].T @ _DP_A[i])
            ki = f(t, yi, f_vals[seg])
            if ki is None or not np.all(np.isfinite(ki)):
                bad = True
                break
            k[i + 1] = ki
        if not bad:
            y_new = y + h_try * (k[:6].T @ _DP_A[5])
            k7 = f(t, y_new, f_vals[seg])
            bad = k7 is None or not np.all(np.isfinite(k7))
        if bad:
            h = h_try * 0.2
            if h < 1e-13 * max(1.0, t):
                status = STEP_FAIL
                break
            continue
        k[6] = k7
        err = h_try * (k.T @ _DP_E)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = np.sqrt(np.mean((err / scale) ** 2))
        if err_norm <= 1.0:
            hit_out = h_try >= (t_next_out - t) - 1e-14 * max(1.0, t_next_out)
            hit_seg = h_try >= (target - t) - 1e-14 * max(1.0, target)
            t = t_next_out if hit_out else (target if hit_seg else t + h_try)
            y = y_new
            k1 = k7
            if np.max(np.abs(y)) > 1e8:
                status = NON_FINITE
                break
            if hit_out:
                if record:
                    store(out_idx, t, y)
                out_idx += 1
            if hit_seg and seg_end <= t + 1e-15 and seg + 1 < nseg:
                seg += 1
                k1 = f(t, y, f_vals[seg])
                if k1 is None:
                    status = SINGULAR_MASS
                    break
            fac = 5.0 if err_norm == 0.0 else min(5.0, max(0.2, 0.9 * err_norm**-0.2))
            h = h_try * fac
            if settle_tol > 0.0 and np.max(np.abs(y[nq:])) < settle_tol:
                settled = True
                break
        else:
            h = h_try * max(0.2, 0.9 * err_norm**-0.2)

    n_rows = out_idx if record else 0
    return (status, rows_t, rows_q, rows_qd, rows_l, rows_ld, rows_e,
            y[:nq].copy(), y[nq:].copy(), t, n_rows, settled)


# ---------------------------------------------------------------------------
# engine (extended coordinates, explicit constraints)
# ---------------------------------------------------------------------------


def _engine_constraints(pack, fr, x, pin_target, want_jac=True):
    nx = x.size
    nc = pack.ncon
    c = np.zeros(nc)
    Jc = np.zeros((nc, nx)) if want_jac else None
    jdv = np.zeros(nc)
    row = 0
    for tip, ref in pack.conn_pairs:
        c[row : row + 2] = fr.r[tip] - fr.r[ref]
        if want_jac:
            Jc[row : row + 2] = fr.J[tip] - fr.J[ref]
            jdv[row : row + 2] = fr.ra0[tip] - fr.ra0[ref]
        row += 2
    for i, j in pack.eq_pairs:
        c[row] = x[i] - x[j]
        if want_jac:
            Jc[row, i] = 1.0
            Jc[row, j] = -1.0
        row += 1
    if pack.pin_marker >= 0:
        c[row : row + 2] = fr.r[pack.pin_marker] - pin_target
        if want_jac:
            Jc[row : row + 2] = fr.J[pack.pin_marker]
            jdv[row : row + 2] = fr.ra0[pack.pin_marker]
        row += 2
    return c, Jc, jdv


def engine_residual(pack, x, pin_target):
    x = np.asarray(x, float)
    fr = _fk(pack, x, np.zeros_like(x), want_jac=False)
    c, _, _ = _engine_constraints(pack, fr, x, np.asarray(pin_target, float), want_jac=False)
    return c


def _engine_mass(pack, fr):
    nx = pack.nq
    M = np.zeros((nx, nx))
    for m in range(pack.nmarker):
        mm = pack.marker_mass[m]
        if mm > 0.0:
            M += mm * fr.J[m].T @ fr.J[m]
    for b in range(pack.nbody):
        ib = pack.body_inertia[b]
        if ib > 0.0:
            M += ib * np.outer(pack.jw[b], pack.jw[b])
    return M


def _engine_forces(pack, fr, x, v, f_act):
    """Generalized forces at (x, v) plus the damping-velocity Jacobian D.

    D enters the step's saddle matrix as (dt/2) D so that dissipative forces
    act at the mid-step velocity (second-order accurate damping).
    """
    nx = x.size
    Q = np.zeros(nx)
    D = np.zeros((nx, nx))
    g = pack.gravity
    for m in range(pack.nmarker):
        mm = pack.marker_mass[m]
        if mm > 0.0:
            Q -= mm * g * fr.J[m, 1]
            Q -= mm * (fr.J[m].T @ fr.ra0[m])
    for s in range(pack.spring_coord.shape[0]):
        cidx = pack.spring_coord[s]
        fs = -pack.spring_k[s] * (x[cidx] - pack.spring_ref[s]) - pack.spring_c[s] * v[cidx]
        if pack.spring_act[s] >= 0:
            fs += f_act[pack.spring_act[s]]
        Q[cidx] += fs
        D[cidx, cidx] += pack.spring_c[s]
    for e in range(pack.line_idx.shape[0]):
        ia, ib = pack.line_idx[e]
        ke, ce, l0e = pack.line_par[e]
        d = fr.r[ib] - fr.r[ia]
        le = np.hypot(d[0], d[1])
        u = d / le
        lde = u @ (fr.rd[ib] - fr.rd[ia])
        fe = -ke * (le - l0e) - ce * lde
        if pack.line_act[e] >= 0:
            fe += f_act[pack.line_act[e]]
        dl_dx = u @ (fr.J[ib] - fr.J[ia])
        Q += fe * dl_dx
        D += ce * np.outer(dl_dx, dl_dx)
    Q -= pack.joint_damp * v
    D += np.diag(pack.joint_damp)
    return Q, D


def _engine_report(pack, fr, x):
    """(T, Vg, Ve, l, ld) from the discrete assembly at a state."""
    g = pack.gravity
    T = 0.0
    Vg = 0.0
    for m in range(pack.nmarker):
        mm = pack.marker_mass[m]
        if mm > 0.0:
            T += 0.5 * mm * fr.rd[m] @ fr.rd[m]
            Vg += mm * g * fr.r[m, 1]
    for b in range(pack.nbody):
        T += 0.5 * pack.body_inertia[b] * fr.w[b] ** 2
    Ve = 0.0
    for s in range(pack.spring_coord.shape[0]):
        Ve += 0.5 * pack.spring_k[s] * (x[pack.spring_coord[s]] - pack.spring_ref[s]) ** 2
    for e in range(pack.line_idx.shape[0]):
        ia, ib = pack.line_idx[e]
        d = fr.r[ib] - fr.r[ia]
        Ve += 0.5 * pack.line_par[e, 0] * (np.hypot(d[0], d[1]) - pack.line_par[e, 2]) ** 2
    na = pack.rep_idx.shape[0]
    l = np.zeros(na)
    ld = np.zeros(na)
    for a in range(na):
        ia, ib = pack.rep_idx[a]
        d = fr.r[ib] - fr.r[ia]
        l[a] = np.hypot(d[0], d[1])
        ld[a] = (d / l[a]) @ (fr.rd[ib] - fr.rd[ia])
    return T, Vg, Ve, l, ld


def engine_simulate(
    pack,
    x0,
    v0,
    f_times,
    f_vals,
    dt,
    n_steps,
    alpha,
    beta,
    drift_tol,
    pin_target,
    settle_tol,
    record,
):
    """Fixed-step semi-implicit advance with constraint stabilization.

    Each step solves the saddle system [M J^T; J 0] for accelerations and
    multipliers with Baumgarte feedback, applies the semi-implicit update,
    then projects positions and velocities back onto the constraint manifold
    (the drift tolerance is not reachable by Baumgarte feedback alone at
    this step size).

    Returns (status, rows..., x_f, v_f, n_done, max_drift, max_eqgap,
    settled).
    """
    x = np.asarray(x0, float).copy()
    v = np.asarray(v0, float).copy()
    nx = x.size
    nc = pack.ncon
    na = pack.rep_idx.shape[0]
    pin_target = np.asarray(pin_target, float)
    nrows = n_steps + 1 if record else 1
    rows_t = np.zeros(nrows)
    rows_q = np.zeros((nrows, pack.nq_skel))
    rows_qd = np.zeros((nrows, pack.nq_skel))
    rows_l = np.zeros((nrows, na))
    rows_ld = np.zeros((nrows, na))
    rows_e = np.zeros((nrows, 3))

    def store(idx, t, fr):
        T, Vg, Ve, l, ld = _engine_report(pack, fr, x)
        rows_t[idx] = t
        rows_q[idx] = x[: pack.nq_skel]
        rows_qd[idx] = v[: pack.nq_skel]
        rows_l[idx] = l
        rows_ld[idx] = ld
        rows_e[idx] = (T, Vg, Ve)

    status = OK
    settled = False
    max_drift = 0.0
    max_eqgap = 0.0
    seg = 0
    nseg = f_times.shape[0]
    if record:
        fr0 = _fk(pack, x, v, want_jac=False)
        store(0, 0.0, fr0)

    n_done = 0
    for step in range(n_steps):
        t = step * dt
        while seg + 1 < nseg and f_times[seg + 1] <= t + 1e-12:
            seg += 1
        f_act = f_vals[seg]

        fr = _fk(pack, x, v)
        M = _engine_mass(pack, fr)
        Q, D = _engine_forces(pack, fr, x, v, f_act)
        c, Jc, jdv = _engine_constraints(pack, fr, x, pin_target)

        ns = nx + nc
        A = np.zeros((ns, ns))
        A[:nx, :nx] = M + (0.5 * dt) * D
        rhs = np.zeros(ns)
        rhs[:nx] = Q
        if nc:
            A[:nx, nx:] = Jc.T
            A[nx:, :nx] = Jc
            rhs[nx:] = -jdv - alpha * (Jc @ v) - beta * c
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            status = SINGULAR_SOLVE
            break
        if not np.all(np.isfinite(sol)):
            status = SINGULAR_SOLVE
            break
        v = v + dt * sol[:nx]
        x = x + dt * v

        if nc:
            lu_rhs = np.zeros(ns)
            for _ in range(_PROJ_ITERS):
                cn = engine_residual(pack, x, pin_target)
                if np.max(np.abs(cn)) <= _PROJ_TOL:
                    break
                lu_rhs[nx:] = -cn
                corr = np.linalg.solve(A, lu_rhs)
                x = x + corr[:nx]
            cn = engine_residual(pack, x, pin_target)
            if np.max(np.abs(cn)) > _PROJ_TOL:
                # stale-Jacobian iteration stalled; full Newton with refresh
                for _ in range(_PROJ_ITERS):
                    frn = _fk(pack, x, np.zeros_like(x))
                    cn, Jn, _ = _engine_constraints(pack, frn, x, pin_target)
                    if np.max(np.abs(cn)) <= _PROJ_TOL:
                        break
                    An = A.copy()
                    An[:nx, nx:] = Jn.T
                    An[nx:, :nx] = Jn
                    lu_rhs[nx:] = -cn
                    corr = np.linalg.solve(An, lu_rhs)
                    x = x + corr[:nx]
                cn = engine_residual(pack, x, pin_target)
            drift = float(np.max(np.abs(cn)))
            max_drift = max(max_drift, drift)
            row = 2 * pack.conn_pairs.shape[0]
            for idx in range(pack.eq_pairs.shape[0]):
                max_eqgap = max(max_eqgap, abs(cn[row + idx]))
            lu_rhs[nx:] = -(Jc @ v)
            corr = np.linalg.solve(A, lu_rhs)
            v = v + corr[:nx]
            if drift > drift_tol:
                status = DRIFT_FAIL
                break

        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e8:
            status = NON_FINITE
            break
        n_done = step + 1
        if record:
            fr_rep = _fk(pack, x, v, want_jac=False)
            store(n_done, (step + 1) * dt, fr_rep)
        if settle_tol > 0.0 and np.max(np.abs(v[: pack.nq_skel])) < settle_tol:
            settled = True
            break

    n_rows = n_done + 1 if record else 0
    return (status, rows_t, rows_q, rows_qd, rows_l, rows_ld, rows_e,
            x, v, n_done, max_drift, max_eqgap, settled)
