"""Cascaded pose graph optimization.

The graph fuses relative odometry poses, absolute poses and absolute
positions. Optimization runs in three stages: rotations only, translations
only with rotations held, then all pose components jointly (optionally with
the transform into the absolute-position frame as an extra variable). The
first two stages give the last one a good starting point.

Conventions:

* Node state is ``T_i = (R_i, p_i)``; increments are ``R <- Exp(dtheta) R``
  and ``p <- p + dp``.
* Six-dimensional residuals and information matrices are ordered
  ``[rotation, translation]``.
* Relative edge residual: ``Log(R_ij^T R_i^T R_j)`` and
  ``R_i^T (p_j - p_i) - p_ij``.
* Absolute pose residual: ``Log(Rbar^T R_i)`` and ``p_i - pbar``.
* Absolute position residual: ``R_f p_i + t_f - pbar`` where
  ``(R_f, t_f)`` maps map-frame points into the absolute-position frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .geom import Pose, Trajectory, right_jacobian_inv, skew, so3_exp, so3_log

log = logging.getLogger(__name__)

EDGE_KINDS = ("rel", "abs_pose", "abs_pos")


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "cauchy"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.kind == "cauchy" and not self.scale > 0:
            raise ValueError("Cauchy scale must be positive")

    def rho(self, s):
        """Loss of squared whitened residual norms ``s``."""
        if self.kind == "none":
            return s
        c2 = self.scale**2
        return c2 * np.log1p(s / c2)

    def weight(self, s):
        if self.kind == "none":
            return np.ones_like(s)
        return 1.0 / (1.0 + s / self.scale**2)


@dataclass(frozen=True)
class RelPoseEdge:
    i: int
    j: int
    T: Pose
    info: np.ndarray = field(default_factory=lambda: np.eye(6))


@dataclass(frozen=True)
class AbsPoseEdge:
    i: int
    T: Pose
    info: np.ndarray = field(default_factory=lambda: np.eye(6))


@dataclass(frozen=True)
class AbsPosEdge:
    i: int
    p: np.ndarray
    info: np.ndarray = field(default_factory=lambda: np.eye(3))


def _kind(edge) -> str:
    if isinstance(edge, RelPoseEdge):
        return "rel"
    if isinstance(edge, AbsPoseEdge):
        return "abs_pose"
    if isinstance(edge, AbsPosEdge):
        return "abs_pos"
    raise TypeError(f"unknown edge type {type(edge).__name__}")


def _check_info(info, dim):
    info = np.asarray(info, dtype=float)
    if info.shape != (dim, dim) or not np.all(np.isfinite(info)) or not np.allclose(info, info.T, atol=1e-12):
        raise ValueError("invalid information matrix")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise ValueError("invalid information matrix") from None
    return info


@dataclass
class PoseGraph:
    nodes: Trajectory
    edges: list = field(default_factory=list)
    frame_transform: Pose | None = None
    estimate_frame: bool = False
    loss: dict = field(default_factory=dict)
    fixed: frozenset = frozenset()

    def __post_init__(self):
        n = len(self.nodes)
        self.fixed = frozenset(int(k) for k in self.fixed)
        for k in self.fixed:
            if not 0 <= k < n:
                raise ValueError("fixed node index out of range")
        for e in self.edges:
            kind = _kind(e)
            idx = (e.i, e.j) if kind == "rel" else (e.i,)
            if any(not 0 <= k < n for k in idx):
                raise ValueError("edge index out of range")
            _check_info(e.info, 3 if kind == "abs_pos" else 6)
        for k in self.loss:
            if k not in EDGE_KINDS:
                raise ValueError(f"unknown edge class {k!r}")

    def loss_for(self, kind: str) -> RobustLoss:
        return self.loss.get(kind, RobustLoss())

    def with_nodes(self, nodes: Trajectory, frame: Pose | None = None) -> "PoseGraph":
        g = replace(self, nodes=nodes)
        if frame is not None:
            g.frame_transform = frame
        return g


@dataclass
class StageReport:
    name: str
    iterations: int = 0
    costs: list = field(default_factory=list)
    converged: bool = False
    message: str = ""

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


# -- vectorized residuals ----------------------------------------------------


class _Packed:
    def __init__(self, g: PoseGraph):
        groups = {k: [e for e in g.edges if _kind(e) == k] for k in EDGE_KINDS}
        rel = groups["rel"]
        self.rel_i = np.array([e.i for e in rel], dtype=int)
        self.rel_j = np.array([e.j for e in rel], dtype=int)
        self.rel_R = np.array([e.T.R for e in rel]).reshape(-1, 3, 3)
        self.rel_p = np.array([e.T.p for e in rel]).reshape(-1, 3)
        self.rel_info = np.array([e.info for e in rel], dtype=float).reshape(-1, 6, 6)
        ap = groups["abs_pose"]
        self.ap_i = np.array([e.i for e in ap], dtype=int)
        self.ap_R = np.array([e.T.R for e in ap]).reshape(-1, 3, 3)
        self.ap_p = np.array([e.T.p for e in ap]).reshape(-1, 3)
        self.ap_info = np.array([e.info for e in ap], dtype=float).reshape(-1, 6, 6)
        pp = groups["abs_pos"]
        self.pp_i = np.array([e.i for e in pp], dtype=int)
        self.pp_p = np.array([e.p for e in pp], dtype=float).reshape(-1, 3)
        self.pp_info = np.array([e.info for e in pp], dtype=float).reshape(-1, 3, 3)
        self.count = {"rel": len(rel), "abs_pose": len(ap), "abs_pos": len(pp)}


@dataclass
class _State:
    R: np.ndarray
    p: np.ndarray
    Rf: np.ndarray
    tf: np.ndarray

    def copy(self):
        return _State(self.R.copy(), self.p.copy(), self.Rf.copy(), self.tf.copy())


def _bt(M):
    return np.swapaxes(M, -1, -2)


def _raw_terms(st: _State, pk: _Packed, kind: str):
    """Full residuals ``(E, m)`` and Jacobian blocks ``[(block_ids, (E, m, 3))]``.

    Block ids: ``2n`` rotation of node n, ``2n+1`` its translation,
    ``2N`` / ``2N+1`` rotation / translation of the frame transform.
    """
    N = len(st.R)
    if kind == "rel":
        i, j = pk.rel_i, pk.rel_j
        Ri, Rj = st.R[i], st.R[j]
        E0 = _bt(pk.rel_R) @ _bt(Ri) @ Rj
        e_rot = so3_log(E0)
        Jr = right_jacobian_inv(e_rot) @ _bt(Rj)
        d = st.p[j] - st.p[i]
        e_tr = np.einsum("nji,nj->ni", Ri, d) - pk.rel_p
        E = len(i)
        z = np.zeros((E, 3, 3))
        res = np.concatenate([e_rot, e_tr], axis=1)
        RiT = _bt(Ri)
        blocks = [
            (2 * i, np.concatenate([-Jr, RiT @ skew(d)], axis=1)),
            (2 * j, np.concatenate([Jr, z], axis=1)),
            (2 * i + 1, np.concatenate([z, -RiT], axis=1)),
            (2 * j + 1, np.concatenate([z, RiT], axis=1)),
        ]
        return res, blocks
    if kind == "abs_pose":
        i = pk.ap_i
        Ri = st.R[i]
        e_rot = so3_log(_bt(pk.ap_R) @ Ri)
        Jr = right_jacobian_inv(e_rot) @ _bt(Ri)
        e_tr = st.p[i] - pk.ap_p
        E = len(i)
        z = np.zeros((E, 3, 3))
        eye = np.broadcast_to(np.eye(3), (E, 3, 3))
        res = np.concatenate([e_rot, e_tr], axis=1)
        blocks = [
            (2 * i, np.concatenate([Jr, z], axis=1)),
            (2 * i + 1, np.concatenate([z, eye], axis=1)),
        ]
        return res, blocks
    if kind == "abs_pos":
        i = pk.pp_i
        E = len(i)
        q = st.p[i] @ st.Rf.T
        res = q + st.tf - pk.pp_p
        blocks = [
            (2 * i + 1, np.broadcast_to(st.Rf, (E, 3, 3))),
            (np.full(E, 2 * N), -skew(q)),
            (np.full(E, 2 * N + 1), np.broadcast_to(np.eye(3), (E, 3, 3))),
        ]
        return res, blocks
    raise ValueError(kind)


_STAGE_ROWS = {
    "rot": {"rel": [0, 1, 2], "abs_pose": [0, 1, 2]},
    "trans": {"rel": [3, 4, 5], "abs_pose": [3, 4, 5], "abs_pos": [0, 1, 2]},
    "full": {"rel": list(range(6)), "abs_pose": list(range(6)), "abs_pos": [0, 1, 2]},
}


class _Problem:
    def __init__(self, g: PoseGraph, stage: str, kinds, robust: bool):
        self.g = g
        self.stage = stage
        self.pk = _Packed(g)
        rows = _STAGE_ROWS[stage]
        self.kinds = [k for k in kinds if k in rows and self.pk.count[k] > 0]
        self.rows = rows
        self.loss = {k: (g.loss_for(k) if robust else RobustLoss()) for k in self.kinds}
        infos = {"rel": self.pk.rel_info, "abs_pose": self.pk.ap_info, "abs_pos": self.pk.pp_info}
        # Whitening: r^T W r = |L^T r|^2 with W = L L^T.
        self.white = {}
        for k in self.kinds:
            r = rows[k]
            sub = infos[k][:, r][:, :, r]
            self.white[k] = _bt(np.linalg.cholesky(sub))

        N = len(g.nodes)
        self.N = N
        fixed = self._gauge_fix()
        col = np.full(2 * N + 2, -1, dtype=int)
        ncols = 0
        for n in range(N):
            if n in fixed:
                continue
            for b in (2 * n, 2 * n + 1):
                if self._block_active(b):
                    col[b] = ncols
                    ncols += 3
        if stage == "full" and g.estimate_frame and "abs_pos" in self.kinds:
            col[2 * N] = ncols
            col[2 * N + 1] = ncols + 3
            ncols += 6
        self.col = col
        self.ncols = ncols

    def _block_active(self, b):
        if self.stage == "rot":
            return b % 2 == 0
        if self.stage == "trans":
            return b % 2 == 1
        return True

    def _gauge_fix(self):
        g, N = self.g, self.N
        fixed = set(g.fixed)
        anchors = set(fixed)
        if "abs_pose" in self.kinds:
            anchors.update(int(k) for k in self.pk.ap_i)
        if "abs_pos" in self.kinds and not (self.stage == "full" and g.estimate_frame):
            anchors.update(int(k) for k in self.pk.pp_i)
        if not anchors:
            log.info("no absolute constraint in %s stage: fixing node 0", self.stage)
            fixed.add(0)
            anchors.add(0)
        pk = self.pk
        adj = sp.coo_matrix((np.ones(len(pk.rel_i)), (pk.rel_i, pk.rel_j)), shape=(N, N))
        ncomp, labels = connected_components(adj, directed=False)
        anchored = {labels[a] for a in anchors}
        if len(anchored) < ncomp:
            raise ValueError("gauge freedom")
        return fixed

    def terms(self, st: _State):
        out = []
        for k in self.kinds:
            res, blocks = _raw_terms(st, self.pk, k)
            r = self.rows[k]
            L = self.white[k]
            rw = np.einsum("nab,nb->na", L, res[:, r])
            bw = [(ids, L @ J[:, r, :]) for ids, J in blocks]
            out.append((k, rw, bw))
        return out

    def cost(self, st: _State) -> float:
        total = 0.0
        for k in self.kinds:
            res = self._residuals(st, k)
            r = self.rows[k]
            rw = np.einsum("nab,nb->na", self.white[k], res[:, r])
            total += 0.5 * float(np.sum(self.loss[k].rho(np.sum(rw**2, axis=1))))
        return total

    def _residuals(self, st, kind):
        if kind == "abs_pos":
            return st.p[self.pk.pp_i] @ st.Rf.T + st.tf - self.pk.pp_p
        return _raw_terms(st, self.pk, kind)[0]

    def linearize(self, st: _State):
        rows, cols, vals, rhs = [], [], [], []
        offset = 0
        for k, rw, blocks in self.terms(st):
            E, m = rw.shape
            w = self.loss[k].weight(np.sum(rw**2, axis=1))
            sw = np.sqrt(w)
            rhs.append((rw * sw[:, None]).reshape(-1))
            r_idx = offset + np.arange(E)[:, None] * m + np.arange(m)[None, :]
            for ids, J in blocks:
                c0 = self.col[ids]
                act = c0 >= 0
                if not np.any(act):
                    continue
                Jw = J[act] * sw[act, None, None]
                rr = np.broadcast_to(r_idx[act][:, :, None], Jw.shape)
                cc = np.broadcast_to(c0[act][:, None, None] + np.arange(3)[None, None, :], Jw.shape)
                rows.append(rr.reshape(-1))
                cols.append(cc.reshape(-1))
                vals.append(Jw.reshape(-1))
            offset += E * m
        J = sp.csr_matrix(
            (np.concatenate(vals) if vals else np.zeros(0), (np.concatenate(rows) if rows else np.zeros(0, int),
             np.concatenate(cols) if cols else np.zeros(0, int))),
            shape=(offset, self.ncols),
        )
        return J, np.concatenate(rhs) if rhs else np.zeros(0)

    def retract(self, st: _State, delta) -> _State:
        out = st.copy()
        N = self.N
        blocks = np.nonzero(self.col[: 2 * N] >= 0)[0]
        d = delta[self.col[blocks][:, None] + np.arange(3)]
        rot = blocks % 2 == 0
        if np.any(rot):
            n = blocks[rot] // 2
            out.R[n] = so3_exp(d[rot]) @ out.R[n]
        if np.any(~rot):
            n = blocks[~rot] // 2
            out.p[n] = out.p[n] + d[~rot]
        if self.col[2 * N] >= 0:
            c = self.col[2 * N]
            out.Rf = so3_exp(delta[c : c + 3]) @ out.Rf
            out.tf = out.tf + delta[c + 3 : c + 6]
        return out


def _state_of(g: PoseGraph) -> _State:
    T = g.frame_transform or Pose()
    return _State(g.nodes.rotations.copy(), g.nodes.positions.copy(), T.R.copy(), T.p.copy())


def _graph_of(g: PoseGraph, st: _State) -> PoseGraph:
    nodes = Trajectory(g.nodes.stamps, st.R, st.p)
    frame = Pose(st.Rf, st.tf) if (g.frame_transform is not None or g.estimate_frame) else None
    return g.with_nodes(nodes, frame)


def _solve(prob: _Problem, st: _State, max_iters: int, tol: float, report: StageReport, linear: bool = False):
    cost = prob.cost(st)
    report.costs.append(cost)
    if prob.ncols == 0:
        report.converged = True
        report.message = "no free variables"
        return st
    lam = 1e-4
    for _ in range(max_iters):
        report.iterations += 1
        J, r = prob.linearize(st)
        H = (J.T @ J).tocsc()
        grad = J.T @ r
        eye = sp.identity(prob.ncols, format="csc")
        while True:
            damping = 0.0 if linear else lam
            delta = spsolve(H + damping * eye, -grad)
            step = float(np.linalg.norm(delta))
            trial = prob.retract(st, delta)
            new_cost = prob.cost(trial)
            if new_cost <= cost:
                break
            if step < 1e-10 or abs(new_cost - cost) <= tol * max(cost, 1e-300):
                report.converged = True
                return st
            linear = False
            lam *= 10.0
            if lam > 1e12:
                report.message = "failed to converge"
                log.warning("%s stage failed to converge", report.name)
                return st
        rel_change = (cost - new_cost) / max(cost, 1e-300)
        st, cost = trial, new_cost
        report.costs.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if linear or rel_change < tol or step < 1e-10 or cost < 1e-30:
            report.converged = True
            return st
    report.message = "iteration limit reached"
    return st


def _run_stage(g: PoseGraph, stage: str, max_iters: int, tol: float, kinds, robust: bool):
    prob = _Problem(g, stage, kinds, robust=robust)
    report = StageReport(stage)
    linear = stage == "trans" and all(prob.loss[k].kind == "none" for k in prob.kinds)
    st = _solve(prob, _state_of(g), max_iters, tol, report, linear=linear)
    # Components a stage does not own pass through bit-identical.
    if stage == "rot":
        st.p = g.nodes.positions.copy()
    elif stage == "trans":
        st.R = g.nodes.rotations.copy()
    return _graph_of(g, st), report


def optimize_rotations(g: PoseGraph, max_iters: int = 50, tol: float = 1e-9, kinds=("rel", "abs_pose")) -> PoseGraph:
    """Rotation-only stage. Translations pass through untouched."""
    return _run_stage(g, "rot", max_iters, tol, kinds, robust=False)[0]


def optimize_translations(
    g: PoseGraph,
    max_iters: int = 50,
    tol: float = 1e-9,
    kinds=EDGE_KINDS,
    robust: bool = True,
) -> PoseGraph:
    """Translation-only stage with rotations held fixed.

    Without robust losses the problem is linear and one solve is exact;
    otherwise it is iteratively reweighted.
    """
    return _run_stage(g, "trans", max_iters, tol, kinds, robust)[0]


def optimize_full(g: PoseGraph, max_iters: int = 100, tol: float = 1e-9, kinds=EDGE_KINDS, robust: bool = True):
    """Joint Levenberg-Marquardt refinement of all poses (and the frame
    transform when ``g.estimate_frame``). Returns ``(graph, final_cost)``."""
    g, rep = _run_stage(g, "full", max_iters, tol, kinds, robust)
    return g, rep.final_cost


@dataclass
class CascadeConfig:
    stages: tuple = ("rot", "trans", "full")
    max_iters: int = 100
    tol: float = 1e-9
    # Constraint classes used by the first two stages.
    early_kinds: tuple = ("rel", "abs_pose")


def full_cost(g: PoseGraph, robust: bool = True) -> float:
    """Objective of the joint stage at the graph's current state."""
    return _Problem(g, "full", EDGE_KINDS, robust).cost(_state_of(g))


def cascaded_pgo(g: PoseGraph, cfg: CascadeConfig | None = None):
    """Run the configured stages in order.

    Returns ``(graph, reports)`` with one :class:`StageReport` per stage.
    """
    cfg = cfg or CascadeConfig()
    reports = []
    for stage in cfg.stages:
        if stage not in _STAGE_ROWS:
            raise ValueError(f"unknown stage {stage!r}")
        if stage == "full":
            g, rep = _run_stage(g, stage, cfg.max_iters, cfg.tol, EDGE_KINDS, robust=True)
        else:
            g, rep = _run_stage(g, stage, cfg.max_iters, cfg.tol, cfg.early_kinds, robust=False)
        reports.append(rep)
    return g, reports


def odometry_chain(stamps, rel_poses, start: Pose | None = None) -> Trajectory:
    """Dead-reckon a trajectory by composing consecutive relative poses."""
    T = start or Pose()
    Rs, ps = [T.R], [T.p]
    for dT in rel_poses:
        T = T @ dT
        Rs.append(T.R)
        ps.append(T.p)
    return Trajectory(stamps, np.stack(Rs), np.stack(ps))
