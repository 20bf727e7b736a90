"""Intersection geometry, coordinator database and exit-time planning.

Each vehicle picks the earliest exit time whose cubic plan keeps the
lateral headway at every conflict point, the rear-end gap to its same-path
predecessor and the speed limits, each tightened by the worst case of the
confidence tubes published so far.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, InfeasibleError
from .gp import GpModel
from .trajectory import (
    BoundaryConditions,
    MotionLimits,
    PolyCoefficients,
    eval_state,
    feasible_exit_window,
    solve_coefficients,
    times_at_positions,
)
from .uncertainty import ConfidenceTube, Levels, normal_z, position_grid, tube_from_posterior

log = logging.getLogger(__name__)

DT_SCAN = 0.1
TF_TOL = 1e-4
CHECK_DT = 0.05
GRID_STEP = 1.0
MIN_REPLAN_DISTANCE = 1.0
SLACK_TOL = 1e-9


@dataclass(frozen=True)
class PathGeometry:
    path_id: str
    length: float
    conflicts: tuple  # ((conflict_id, distance), ...) sorted by distance

    def __post_init__(self):
        if self.length <= 0:
            raise DomainError(f"path {self.path_id}: length must be positive")
        dist = [d for _, d in self.conflicts]
        if any(b <= a for a, b in zip(dist, dist[1:])):
            raise DomainError(f"path {self.path_id}: conflict distances must be strictly increasing")
        if any(not 0 < d < self.length for d in dist):
            raise DomainError(f"path {self.path_id}: conflict distances must lie inside (0, length)")

    def distance_to(self, conflict_id) -> float:
        for cid, d in self.conflicts:
            if cid == conflict_id:
                return d
        raise DomainError(f"conflict {conflict_id} is not on path {self.path_id}")

    @property
    def conflict_ids(self):
        return {cid for cid, _ in self.conflicts}


@dataclass(frozen=True)
class IntersectionLayout:
    paths: dict

    def __post_init__(self):
        counts = {}
        for path in self.paths.values():
            for cid in path.conflict_ids:
                counts[cid] = counts.get(cid, 0) + 1
        lonely = sorted(cid for cid, n in counts.items() if n < 2)
        if lonely:
            raise DomainError(f"conflict points on a single path: {lonely}")

    @property
    def conflict_points(self):
        return {cid for path in self.paths.values() for cid in path.conflict_ids}

    def shared_conflicts(self, path_a, path_b):
        if path_a == path_b:
            return set()
        return self.paths[path_a].conflict_ids & self.paths[path_b].conflict_ids


@dataclass(frozen=True)
class SafetyConfig:
    t_h: float
    gamma: float
    varphi: float
    limits: MotionLimits
    p_z: float
    levels: Levels = Levels()

    def __post_init__(self):
        if min(self.t_h, self.gamma, self.varphi, self.p_z) <= 0:
            raise DomainError("t_h, gamma, varphi and p_z must be positive")


@dataclass(frozen=True)
class Crossing:
    t: float
    e_lo: float = 0.0
    e_hi: float = 0.0


@dataclass(frozen=True)
class CavPlan:
    cav_id: int
    path_id: str
    bc: BoundaryConditions
    phi: PolyCoefficients
    plan_version: int = 0
    tube: Optional[ConfidenceTube] = None
    crossings: dict = field(default_factory=dict)
    infeasible: bool = False

    @property
    def t0(self):
        return self.bc.t0

    @property
    def tf(self):
        return self.bc.tf

    @property
    def exit_speed(self):
        return eval_state(self.phi, self.bc.tf)[1]

    def state(self, t):
        """Nominal (p, v) at times ``t``; constant exit speed past ``tf``."""
        t = np.asarray(t, dtype=float)
        p, v, _ = eval_state(self.phi, np.minimum(t, self.bc.tf))
        late = t > self.bc.tf
        p = np.where(late, self.bc.pf + self.exit_speed * (t - self.bc.tf), p)
        return p, v

    def time_at(self, p):
        return times_at_positions(self.phi, self.bc, p)


@dataclass
class CavRecord:
    cav_id: int
    path_id: str
    segments: list
    model: Optional[GpModel] = None
    exited: bool = False

    @property
    def plan(self) -> CavPlan:
        return self.segments[-1]

    def crossing(self, conflict_id) -> Optional[Crossing]:
        """Crossing at ``conflict_id`` from the plan segment that covers it."""
        for seg in reversed(self.segments):
            if conflict_id in seg.crossings:
                return seg.crossings[conflict_id]
        return None


class CoordinatorDatabase:
    """Queue-ordered store of every plan and characterization.

    Vehicles keep their entry index for the whole run; exited vehicles stay
    archived so that followers can extrapolate them and audits can replay
    committed crossings.
    """

    def __init__(self):
        self.records: "OrderedDict[int, CavRecord]" = OrderedDict()
        self._next_id = 1

    def __contains__(self, cav_id):
        return cav_id in self.records

    def __getitem__(self, cav_id) -> CavRecord:
        return self.records[cav_id]

    def __len__(self):
        return len(self.records)

    def next_id(self) -> int:
        return self._next_id

    def insert(self, plan: CavPlan) -> CavRecord:
        if plan.cav_id != self._next_id:
            raise DomainError(f"expected cav id {self._next_id}, got {plan.cav_id}")
        rec = CavRecord(plan.cav_id, plan.path_id, [plan])
        self.records[plan.cav_id] = rec
        self._next_id += 1
        return rec

    def store(self, plan: CavPlan):
        self.records[plan.cav_id].segments.append(plan)

    def active_ids(self):
        return [cid for cid, rec in self.records.items() if not rec.exited]

    def predecessor(self, cav_id) -> Optional[CavRecord]:
        path = self.records[cav_id].path_id
        best = None
        for cid, rec in self.records.items():
            if cid >= cav_id:
                break
            if rec.path_id == path:
                best = rec
        return best

    def plans(self):
        return {cid: rec.plan for cid, rec in self.records.items()}


def _e_interval(model, distance, levels):
    if model is None:
        return 0.0, 0.0
    mu, var = model.posterior(distance)
    half = normal_z(levels.P_e) * math.sqrt(var[0])
    return float(mu[0]) - half, float(mu[0]) + half


def lateral_slack_from_crossings(ci: Crossing, cj: Crossing, t_h: float) -> float:
    """Worst-case headway slack between two crossings (>= 0 means safe)."""
    i_after = (ci.t + ci.e_lo) - (cj.t + cj.e_hi) - t_h
    j_after = (cj.t + cj.e_lo) - (ci.t + ci.e_hi) - t_h
    return max(i_after, j_after)


def lateral_gap(plan_i: CavPlan, plan_j: CavPlan, conflict_id, t_h: float) -> float:
    """Robust lateral headway slack at a shared conflict point, in seconds."""
    try:
        ci, cj = plan_i.crossings[conflict_id], plan_j.crossings[conflict_id]
    except KeyError:
        raise DomainError(f"conflict {conflict_id} not shared by both plans") from None
    return lateral_slack_from_crossings(ci, cj, t_h)


def rear_end_slack(plan_i: CavPlan, plan_k: CavPlan, t, cfg: SafetyConfig):
    """Robust rear-end slack of follower ``i`` behind ``k`` at time(s) ``t``, in meters."""
    if plan_i.path_id != plan_k.path_id:
        raise DomainError("rear-end constraint needs two vehicles on the same path")
    t = np.asarray(t, dtype=float)
    p_i, v_i = plan_i.state(t)
    p_k, _ = plan_k.state(t)
    f_i_hi = g_i_hi = f_k_lo = 0.0
    if plan_i.tube is not None:
        f_i_hi = plan_i.tube.f_at(t)[1]
        g_i_hi = plan_i.tube.g_at(t)[1]
    if plan_k.tube is not None:
        f_k_lo = plan_k.tube.f_at(t)[0]
    return (p_k + f_k_lo) - (p_i + f_i_hi) - cfg.gamma - cfg.varphi * (v_i + g_i_hi)


def speed_bounds_ok(plan: CavPlan, limits: MotionLimits, dt: float = CHECK_DT) -> bool:
    t = _time_grid(plan.t0, plan.tf, dt)
    _, v, _ = eval_state(plan.phi, t)
    lo = hi = 0.0
    if plan.tube is not None:
        lo, hi = plan.tube.g_at(t)
    return bool(np.all(v + lo >= limits.v_min - SLACK_TOL) and np.all(v + hi <= limits.v_max + SLACK_TOL))


def _time_grid(t0, tf, dt):
    n = max(int(math.ceil((tf - t0) / dt - 1e-9)), 1)
    return np.linspace(t0, tf, n + 1)


@dataclass(frozen=True)
class PlanRequest:
    """A vehicle asking for a plan from its current (measured) state."""

    cav_id: int
    path_id: str
    t0: float
    v0: float
    p0: float = 0.0
    plan_version: int = 0


class _Evaluator:
    """Checks candidate exit times for one request against the database."""

    def __init__(self, req: PlanRequest, db: CoordinatorDatabase, layout: IntersectionLayout,
                 cfg: SafetyConfig, model: Optional[GpModel]):
        self.req, self.cfg, self.model = req, cfg, model
        path = layout.paths[req.path_id]
        self.pf = path.length
        self.grid = position_grid(req.p0, self.pf, GRID_STEP)
        if model is not None:
            self.mu_e, self.var_e = model.posterior(self.grid - req.p0)
        self.conflicts = [(cid, d) for cid, d in path.conflicts if d > req.p0]
        self.own_e = {cid: _e_interval(model, d - req.p0, cfg.levels) for cid, d in self.conflicts}
        # crossings of others at each conflict ahead
        self.others = {}
        for cid, _ in self.conflicts:
            found = []
            for oid, rec in db.records.items():
                if oid == req.cav_id or rec.path_id == req.path_id:
                    continue
                if cid not in layout.paths[rec.path_id].conflict_ids:
                    continue
                cross = rec.crossing(cid)
                if cross is None:
                    continue
                # lower-indexed vehicles always bind; higher-indexed ones only
                # once their crossing is committed to a superseded segment
                if oid < req.cav_id or cid not in rec.plan.crossings:
                    found.append(cross)
            self.others[cid] = found
        pred = db.predecessor(req.cav_id) if req.cav_id in db else _predecessor_of_new(db, req)
        self.pred_plan = pred.plan if pred is not None else None

    def plan_for(self, tf, infeasible=False) -> CavPlan:
        req = self.req
        bc = BoundaryConditions(req.t0, req.v0, tf, self.pf, req.p0)
        phi = solve_coefficients(bc)
        tube = None
        if self.model is not None:
            tube = tube_from_posterior(phi, bc, self.grid, self.mu_e, self.var_e, self.cfg.levels)
        crossings = {}
        if self.conflicts:
            ts = times_at_positions(phi, bc, [d for _, d in self.conflicts])
            for (cid, _), t in zip(self.conflicts, ts):
                lo, hi = self.own_e[cid]
                crossings[cid] = Crossing(float(t), lo, hi)
        return CavPlan(req.cav_id, req.path_id, bc, phi, req.plan_version, tube, crossings, infeasible)

    def feasible(self, tf) -> bool:
        plan = self.plan_for(tf)
        t_h = self.cfg.t_h
        for cid, mine in plan.crossings.items():
            for other in self.others[cid]:
                if lateral_slack_from_crossings(mine, other, t_h) < -SLACK_TOL:
                    return False
        if plan.tube is not None and not speed_bounds_ok(plan, self.cfg.limits):
            return False
        if self.pred_plan is not None:
            t = _time_grid(plan.t0, plan.tf, CHECK_DT)
            slack = rear_end_slack(plan, self.pred_plan, t, self.cfg)
            if np.any(slack < -SLACK_TOL):
                return False
            m = int(np.argmin(slack))
            if slack[m] < 0.5:
                lo, hi = t[max(m - 1, 0)], t[min(m + 1, t.size - 1)]
                if hi > lo:
                    res = minimize_scalar(lambda s: float(rear_end_slack(plan, self.pred_plan, s, self.cfg)),
                                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
                    if res.fun < -SLACK_TOL:
                        return False
        return True


def _predecessor_of_new(db, req):
    best = None
    for rec in db.records.values():
        if rec.path_id == req.path_id and rec.cav_id < req.cav_id:
            best = rec
    return best


def solve_exit_time(req: PlanRequest, db: CoordinatorDatabase, layout: IntersectionLayout,
                    cfg: SafetyConfig, model: Optional[GpModel] = None) -> CavPlan:
    """Earliest feasible exit time for ``req``.

    Scans the motion-feasible window in ``DT_SCAN`` steps and refines the
    first feasible cell by bisection. With no feasible exit time the plan at
    the latest admissible exit time is returned flagged ``infeasible``.
    """
    pf = layout.paths[req.path_id].length
    tf_lo, tf_hi = feasible_exit_window(req.t0, req.v0, pf, cfg.limits, p0=req.p0)
    ev = _Evaluator(req, db, layout, cfg, model)
    if ev.feasible(tf_lo):
        return ev.plan_for(tf_lo)
    prev = tf_lo
    n = int(math.ceil((tf_hi - tf_lo) / DT_SCAN))
    for k in range(1, n + 1):
        tf = min(tf_lo + k * DT_SCAN, tf_hi)
        if ev.feasible(tf):
            bad, good = prev, tf
            while good - bad > TF_TOL:
                mid = 0.5 * (bad + good)
                if ev.feasible(mid):
                    good = mid
                else:
                    bad = mid
            return ev.plan_for(good)
        prev = tf
    log.warning("cav %d: no feasible exit time in [%.3f, %.3f]", req.cav_id, tf_lo, tf_hi)
    return ev.plan_for(tf_hi, infeasible=True)


# --- Algorithm 1 event handlers -------------------------------------------------

StateFn = Callable[[int, float], tuple]


@dataclass
class EventRecord:
    t: float
    kind: str
    cav_id: int
    tf_new: float
    plan_version: int
    trigger: int = 0


def handle_entry(path_id: str, t0: float, v0: float, db: CoordinatorDatabase,
                 layout: IntersectionLayout, cfg: SafetyConfig) -> CavPlan:
    """Plan a newly entered vehicle with empty own intervals and store it."""
    req = PlanRequest(db.next_id(), path_id, t0, v0, 0.0, 0)
    plan = solve_exit_time(req, db, layout, cfg, model=None)
    db.insert(plan)
    return plan


def _replan(db, cav_id, t, state_fn, layout, cfg):
    rec = db[cav_id]
    p, v = state_fn(cav_id, t)
    if layout.paths[rec.path_id].length - p < MIN_REPLAN_DISTANCE:
        return None
    req = PlanRequest(cav_id, rec.path_id, t, v, p, rec.plan.plan_version + 1)
    try:
        plan = solve_exit_time(req, db, layout, cfg, model=rec.model)
    except InfeasibleError as exc:
        log.warning("cav %d: replanning skipped: %s", cav_id, exc)
        old = rec.plan
        db.store(replace(old, infeasible=True))
        return None
    db.store(plan)
    return plan


def handle_characterization(cav_id: int, t_z: float, model: Optional[GpModel],
                            state_fn: StateFn, db: CoordinatorDatabase,
                            layout: IntersectionLayout, cfg: SafetyConfig):
    """Store the learned model, replan from the measured state, broadcast.

    Returns the new plan (or ``None`` when the model is missing and the old
    plan is kept) and the ids that must replan, in ascending order.
    """
    rec = db[cav_id]
    targets = [j for j in db.active_ids() if j > cav_id]
    if model is None:
        log.warning("cav %d: characterization failed, keeping plan v%d", cav_id, rec.plan.plan_version)
        return None, targets
    rec.model = model
    plan = _replan(db, cav_id, t_z, state_fn, layout, cfg)
    return plan, targets


def handle_replanning(from_cav_id: int, t: float, state_fn: StateFn,
                      db: CoordinatorDatabase, layout: IntersectionLayout, cfg: SafetyConfig):
    """Sequentially replan every active vehicle queued after ``from_cav_id``."""
    out = []
    for j in [j for j in db.active_ids() if j > from_cav_id]:
        plan = _replan(db, j, t, state_fn, layout, cfg)
        out.append((j, plan))
    return out


# --- audits ----------------------------------------------------------------------

@dataclass
class AuditReport:
    min_lateral_slack: float = math.inf
    min_rear_end_slack: float = math.inf
    lateral_violations: list = field(default_factory=list)
    rear_end_violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.lateral_violations and not self.rear_end_violations


def audit_database(db: CoordinatorDatabase, layout: IntersectionLayout, cfg: SafetyConfig,
                   use_tubes: bool = True, since: float = -math.inf) -> AuditReport:
    """Check every conflicting pair and every same-path successor pair.

    Pairs where either vehicle carries an infeasible flag are skipped.
    Rear-end slack is evaluated over the follower's current segment from
    ``since`` onward.
    """
    rep = AuditReport()
    recs = list(db.records.values())
    for a, ra in enumerate(recs):
        for rb in recs[a + 1:]:
            if ra.plan.infeasible or rb.plan.infeasible:
                continue
            for cid in layout.shared_conflicts(ra.path_id, rb.path_id):
                ca, cb = ra.crossing(cid), rb.crossing(cid)
                if ca is None or cb is None:
                    continue
                if not use_tubes:
                    ca, cb = Crossing(ca.t), Crossing(cb.t)
                s = lateral_slack_from_crossings(ca, cb, cfg.t_h)
                rep.min_lateral_slack = min(rep.min_lateral_slack, s)
                if s < -1e-6:
                    rep.lateral_violations.append((ra.cav_id, rb.cav_id, cid, s))
    for rec in recs:
        pred = db.predecessor(rec.cav_id)
        if pred is None or rec.plan.infeasible or pred.plan.infeasible:
            continue
        plan = rec.plan
        start = max(plan.t0, since)
        if start >= plan.tf:
            continue
        follower = plan if use_tubes else replace(plan, tube=None)
        leader = pred.plan if use_tubes else replace(pred.plan, tube=None)
        s = float(np.min(rear_end_slack(follower, leader, _time_grid(start, plan.tf, CHECK_DT), cfg)))
        rep.min_rear_end_slack = min(rep.min_rear_end_slack, s)
        if s < -1e-6:
            rep.rear_end_violations.append((pred.cav_id, rec.cav_id, s))
    return rep
