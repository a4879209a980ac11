"""Flattened array form of compiled models, shared by both kernel backends.

A planar kinematic tree is a list of moving bodies, topologically ordered
(parents first).  The world is body -1, fixed at the origin with angle zero.
Body joint types:

    REV    hinge at `anchor` (parent frame); the body's angle is the parent's
           plus its coordinate; the body frame origin sits at the hinge.
    SLIDE  prismatic along `axis` (parent frame) from `anchor`; body angle
           equals the parent's.
    XY     two translational coordinates along the world axes (stance base).

Markers are points fixed on bodies (or the world); point masses live on
markers, rotational inertia on bodies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REV = 0
SLIDE = 1
XY = 2


def _f(a, shape=None):
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if shape is not None:
        out = out.reshape(shape)
    return out


def _i(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.int32))


@dataclass
class TreePack:
    """Kinematic tree arrays common to both backends."""

    nq: int
    body_type: np.ndarray      # int32[nb]
    body_parent: np.ndarray    # int32[nb]
    body_coord: np.ndarray     # int32[nb], first coordinate index
    body_anchor: np.ndarray    # f64[nb, 2], parent frame
    body_axis: np.ndarray      # f64[nb, 2], parent frame (SLIDE only)
    body_inertia: np.ndarray   # f64[nb], I_zz about the body's COM marker
    jw: np.ndarray             # f64[nb, nq], angular jacobian rows
    marker_body: np.ndarray    # int32[nm], -1 for world-fixed markers
    marker_local: np.ndarray   # f64[nm, 2]
    marker_mass: np.ndarray    # f64[nm]

    @property
    def nbody(self) -> int:
        return self.body_type.shape[0]

    @property
    def nmarker(self) -> int:
        return self.marker_body.shape[0]


@dataclass
class OraclePack(TreePack):
    """Minimal-coordinate model: revolute tree + continuous actuator terms."""

    act_idx: np.ndarray        # int32[na, 2], endpoint marker indices (a, b)
    act_par: np.ndarray        # f64[na, 4]: m, k, c, l0
    joint_damp: np.ndarray     # f64[nq]
    gravity: float
    stance: int                # 0 swing, 1 stance (re-root at foot marker)
    foot_marker: int

    @property
    def nact(self) -> int:
        return self.act_idx.shape[0]


@dataclass
class EnginePack(TreePack):
    """Extended-coordinate model with explicit constraints.

    Slide springs realize the lumped assembly segments; line elements realize
    the naive massless spring-damper baseline.  `spring_act` / `line_act`
    select which actuator's force channel drives each element.
    """

    spring_coord: np.ndarray   # int32[ns]
    spring_k: np.ndarray       # f64[ns]
    spring_c: np.ndarray       # f64[ns]
    spring_ref: np.ndarray     # f64[ns]
    spring_act: np.ndarray     # int32[ns]
    line_idx: np.ndarray       # int32[nl, 2], endpoint markers
    line_par: np.ndarray       # f64[nl, 3]: k, c, l0
    line_act: np.ndarray       # int32[nl]
    conn_pairs: np.ndarray     # int32[ncc, 2]: (tip marker, ref marker)
    eq_pairs: np.ndarray       # int32[ne, 2]: coordinate indices (s1, s2)
    rep_idx: np.ndarray        # int32[na, 2]: attach markers for length output
    joint_damp: np.ndarray     # f64[nq_total]
    gravity: float
    nq_skel: int               # skeleton joint coordinates = x[:nq_skel]
    pin_marker: int            # -1 when no stance pin

    @property
    def ncon(self) -> int:
        n = 2 * self.conn_pairs.shape[0] + self.eq_pairs.shape[0]
        if self.pin_marker >= 0:
            n += 2
        return n
