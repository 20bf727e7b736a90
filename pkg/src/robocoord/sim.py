"""Event-driven simulation of the coordination protocol.

Every vehicle follows its nominal plan up to an unknown time deviation
e(d), where d is the distance travelled since the active plan started. A
replan is always issued from the measured actual state, so the actual
trajectory stays continuous in time and speed across plan segments.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import coordination as co
from .errors import FittingError, NumericalError
from .gp import GpModel, ObservationSet, fit_model
from .trajectory import eval_state, safeguarded_newton
from .uncertainty import normal_z

log = logging.getLogger(__name__)

VIOLATION_TOL = 1e-6
METRIC_DT = 0.02


@dataclass(frozen=True)
class GroundTruthDeviation:
    """e(d) = c1 * ln(1 + d)**c2, seconds."""

    c1: float = 0.012
    c2: float = 1.5

    def __call__(self, d):
        d = np.maximum(np.asarray(d, dtype=float), 0.0)
        out = self.c1 * np.log1p(d) ** self.c2
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, d):
        d = np.maximum(np.asarray(d, dtype=float), 0.0)
        return self.c1 * self.c2 * np.log1p(d) ** (self.c2 - 1.0) / (1.0 + d)


@dataclass(frozen=True)
class ScenarioConfig:
    safety: co.SafetyConfig
    layout: co.IntersectionLayout
    n_cavs: int = 24
    rate: float = 3600.0
    path_weights: Optional[dict] = None
    v0_range: tuple = (12.0, 14.0)
    seed: int = 0
    mode: str = "robust"
    n_obs: int = 50
    obs_noise: float = 0.005
    ground_truth: GroundTruthDeviation = GroundTruthDeviation()
    entry_margin: float = 1.0
    sample_period: float = 0.1

    @property
    def robust(self) -> bool:
        return self.mode == "robust"

    def weights(self):
        ids = list(self.layout.paths)
        w = self.path_weights or {}
        return ids, np.array([float(w.get(pid, 1.0)) for pid in ids])


@dataclass(frozen=True)
class Arrival:
    t0: float
    path_id: str
    v0: float


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    arr, obs = ss.spawn(2)
    return np.random.default_rng(arr), obs


def generate_arrivals(cfg: ScenarioConfig, rng: np.random.Generator) -> list:
    """Poisson arrivals split over paths; same-path entries are spaced out.

    An arrival is delayed until its predecessor on the same path, moving at
    its entry speed, is ``gamma + varphi*v0`` ahead plus ``entry_margin``
    seconds of travel.
    """
    ids, w = cfg.weights()
    w = w / w.sum()
    mean_gap = 3600.0 / cfg.rate
    t = 0.0
    raw = []
    for _ in range(cfg.n_cavs):
        path = ids[int(rng.choice(len(ids), p=w))]
        v0 = float(rng.uniform(*cfg.v0_range))
        raw.append((t, path, v0))
        t += float(rng.exponential(mean_gap))
    last = {}
    out = []
    s = cfg.safety
    for t0, path, v0 in raw:
        if path in last:
            tp, vp = last[path]
            t0 = max(t0, tp + (s.gamma + s.varphi * v0) / vp + cfg.entry_margin)
        last[path] = (t0, v0)
        out.append(Arrival(t0, path, v0))
    out.sort(key=lambda a: a.t0)
    return out


def observe(gt: GroundTruthDeviation, p_z: float, n_obs: int, noise: float,
            rng: np.random.Generator) -> ObservationSet:
    """Noisy samples of the deviation profile at n_obs uniform points on (0, p_z]."""
    p = p_z * np.arange(1, n_obs + 1) / n_obs
    e = gt(p)
    if noise > 0:
        e = e + rng.normal(0.0, noise, size=p.size)
    return ObservationSet(p, e)


class ActualTrajectory:
    """Realized motion of one vehicle across its plan segments."""

    def __init__(self, segments, gt: GroundTruthDeviation):
        self.segments = list(segments)
        self.gt = gt
        self.starts = np.array([s.t0 for s in self.segments])
        ends = [s.bc.p0 for s in self.segments[1:]] + [self.segments[-1].bc.pf]
        self.p_end = np.array(ends)

    def _seg_index_for_position(self, p):
        p0s = np.array([s.bc.p0 for s in self.segments])
        return np.clip(np.searchsorted(p0s, p, side="right") - 1, 0, len(self.segments) - 1)

    def time_at(self, p):
        """Actual arrival time t_hat(p) = t(p) + e(p - p0) of the covering segment."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        out = np.empty_like(p)
        idx = self._seg_index_for_position(p)
        for k in np.unique(idx):
            seg = self.segments[k]
            m = idx == k
            out[m] = seg.time_at(p[m]) + self.gt(p[m] - seg.bc.p0)
        return out

    def deviations_at(self, p):
        """(e, f, g) along the covering segment at positions ``p``."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        idx = self._seg_index_for_position(p)
        e = np.empty_like(p)
        f = np.empty_like(p)
        g = np.empty_like(p)
        for k in np.unique(idx):
            seg = self.segments[k]
            m = idx == k
            phi = seg.phi
            ek = self.gt(p[m] - seg.bc.p0)
            tau = seg.time_at(p[m]) - phi.t_origin
            e[m] = ek
            f[m] = -(phi.phi3 * ek**3 + 3 * phi.phi3 * ek**2 * tau + phi.phi2 * ek**2
                     + 3 * phi.phi3 * ek * tau**2 + 2 * phi.phi2 * ek * tau + phi.phi1 * ek)
            g[m] = -((2 * phi.phi2 + 6 * phi.phi3 * tau) * ek + 3 * phi.phi3 * ek**2)
        return e, f, g

    @property
    def exit_time(self) -> float:
        return float(self.time_at(self.segments[-1].bc.pf)[0])

    @property
    def exit_speed(self) -> float:
        return float(self.state(self.exit_time)[1][0])

    def _position_in_segment(self, k, t):
        seg = self.segments[k]
        p0 = seg.bc.p0

        def slope(p):
            v = seg.state(seg.time_at(p))[1]
            return 1.0 / v + self.gt.derivative(p - p0)

        # guess: nominal position at t, which the deviation only delays
        guess = np.clip(seg.state(t)[0], p0, self.p_end[k])
        return safeguarded_newton(lambda p: self.time_at_segment(k, p), slope, t,
                                  np.full_like(t, p0), np.full_like(t, self.p_end[k]), guess,
                                  xtol=1e-13)

    def time_at_segment(self, k, p):
        seg = self.segments[k]
        return seg.time_at(p) + self.gt(p - seg.bc.p0)

    def state(self, t):
        """Actual (p, v) at times ``t``; constant exit speed after leaving."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p = np.empty_like(t)
        last = self.segments[-1]
        t_exit = float(self.time_at_segment(len(self.segments) - 1, last.bc.pf)[0])
        k_of_t = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, len(self.segments) - 1)
        inside = t <= t_exit
        for k in np.unique(k_of_t[inside]):
            m = inside & (k_of_t == k)
            p[m] = self._position_in_segment(k, t[m])
        v = np.empty_like(t)
        if np.any(inside):
            pin = p[inside]
            idx = self._seg_index_for_position(pin)
            for k in np.unique(idx):
                seg = self.segments[k]
                mm = idx == k
                # speed at actual arrival = nominal speed at nominal arrival
                _, _, g = self.deviations_at(pin[mm])
                t_hat = self.time_at(pin[mm])
                # the cubic itself, not the clamped plan: t_hat may pass tf
                vals = eval_state(seg.phi, t_hat)[1] + g
                sub = np.flatnonzero(inside)[mm]
                v[sub] = vals
        if np.any(~inside):
            seg = last
            v_exit = float(seg.state(seg.tf)[1])
            p[~inside] = last.bc.pf + v_exit * (t[~inside] - t_exit)
            v[~inside] = v_exit
        return p, v


@dataclass
class SimResult:
    cfg: ScenarioConfig
    arrivals: list
    db: co.CoordinatorDatabase
    events: list
    audits: list
    trajectories: dict
    tubes: list
    metrics: dict
    report_tubes: dict = field(default_factory=dict)


_ENTRY, _CHAR, _EXIT = 0, 1, 2


class _Simulator:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.db = co.CoordinatorDatabase()
        self.events = []
        self.audits = []
        self.tubes = []
        self.models = {}
        self.queue = []
        rng_arr, self.obs_seq = _streams(cfg.seed)
        self.arrivals = generate_arrivals(cfg, rng_arr)
        self._seq = 0

    # actual state of a vehicle as the coordinator would measure it
    def actual(self, cav_id) -> ActualTrajectory:
        return ActualTrajectory(self.db[cav_id].segments, self.cfg.ground_truth)

    def measured_state(self, cav_id, t):
        p, v = self.actual(cav_id).state(t)
        return float(p[0]), float(v[0])

    def _obs_rng(self, cav_id):
        return np.random.default_rng([self.cfg.seed, 7919, cav_id])

    def characterize(self, cav_id) -> Optional[GpModel]:
        s = self.cfg.safety
        obs = observe(self.cfg.ground_truth, s.p_z, self.cfg.n_obs, self.cfg.obs_noise, self._obs_rng(cav_id))
        try:
            return fit_model(obs, seed=self.cfg.seed * 1000 + cav_id)
        except (FittingError, NumericalError) as exc:
            log.warning("cav %d: GP fit failed: %s", cav_id, exc)
            return None

    def _push(self, t, kind, cav_id, token):
        # ties: queue index first; entries carry the next free index
        self._seq += 1
        heapq.heappush(self.queue, (t, cav_id, kind, self._seq, token))

    def _schedule_followups(self, cav_id):
        rec = self.db[cav_id]
        act = self.actual(cav_id)
        token = len(rec.segments)
        s = self.cfg.safety
        if self.cfg.robust and rec.model is None and rec.plan.bc.p0 < s.p_z:
            self._push(float(act.time_at(s.p_z)[0]), _CHAR, cav_id, token)
        self._push(act.exit_time, _EXIT, cav_id, token)

    def _log(self, t, kind, plan: Optional[co.CavPlan], cav_id, trigger=0):
        rec = self.db[cav_id]
        p = plan or rec.plan
        self.events.append(co.EventRecord(t, kind, cav_id, p.tf, p.plan_version, trigger))
        if p.tube is not None and plan is not None:
            self.tubes.append((cav_id, p.plan_version, p.tube))

    def _audit(self, t, kind, cav_id):
        rep = co.audit_database(self.db, self.cfg.layout, self.cfg.safety, since=t)
        self.audits.append((t, kind, cav_id, rep))

    def run(self):
        for n, a in enumerate(self.arrivals, start=1):
            self._push(a.t0, _ENTRY, n, a)
        while self.queue:
            t, cav_id, kind, _, token = heapq.heappop(self.queue)
            if kind == _ENTRY:
                a = token
                plan = co.handle_entry(a.path_id, a.t0, a.v0, self.db, self.cfg.layout, self.cfg.safety)
                self._log(t, "entry", plan, plan.cav_id)
                self._schedule_followups(plan.cav_id)
                self._audit(t, "entry", plan.cav_id)
                continue
            rec = self.db[cav_id]
            if rec.exited:
                continue
            if token != len(rec.segments):
                continue  # superseded by a replan; a fresh event was scheduled
            if kind == _CHAR:
                self._characterization(t, cav_id)
            elif kind == _EXIT:
                rec.exited = True
                self._log(t, "exit", None, cav_id)
        return self

    def _characterization(self, t, cav_id):
        cfg = self.cfg
        model = self.characterize(cav_id)
        self.models[cav_id] = model
        plan, targets = co.handle_characterization(cav_id, t, model, self.measured_state,
                                                   self.db, cfg.layout, cfg.safety)
        self._log(t, "characterization", plan, cav_id)
        self._schedule_followups(cav_id)
        for j, new in co.handle_replanning(cav_id, t, self.measured_state, self.db, cfg.layout, cfg.safety):
            self._log(t, "replan", new, j, trigger=cav_id)
            if new is not None:
                self._schedule_followups(j)
        self._audit(t, "characterization", cav_id)


def _report_tubes(sim: _Simulator):
    """Per-vehicle tubes for reporting; deterministic runs fit them post hoc."""
    out = {}
    for cid, rec in sim.db.records.items():
        model = rec.model
        if model is None:
            model = sim.models.get(cid) or sim.characterize(cid)
            sim.models[cid] = model
        out[cid] = model
    return out


def _crossings_with_model(rec: co.CavRecord, model, layout, levels):
    """Nominal crossing times with E intervals from ``model``."""
    path = layout.paths[rec.path_id]
    z = normal_z(levels.P_e)
    out = {}
    for cid, d in path.conflicts:
        for seg in reversed(rec.segments):
            if seg.bc.p0 <= d <= seg.bc.pf and cid in seg.crossings:
                t = seg.crossings[cid].t
                if model is None:
                    out[cid] = co.Crossing(t)
                else:
                    mu, var = model.posterior(d - seg.bc.p0)
                    half = z * math.sqrt(var[0])
                    out[cid] = co.Crossing(t, float(mu[0]) - half, float(mu[0]) + half)
                break
    return out


def audit_metrics(sim: _Simulator) -> dict:
    """Safety and throughput metrics from the actual trajectories."""
    cfg, db, layout, s = sim.cfg, sim.db, sim.cfg.layout, sim.cfg.safety
    acts = {cid: sim.actual(cid) for cid in db.records}
    recs = list(db.records.values())

    lat_min, lat_viol = math.inf, []
    for a, ra in enumerate(recs):
        for rb in recs[a + 1:]:
            for cid in sorted(layout.shared_conflicts(ra.path_id, rb.path_id)):
                ta = acts[ra.cav_id].time_at(layout.paths[ra.path_id].distance_to(cid))[0]
                tb = acts[rb.cav_id].time_at(layout.paths[rb.path_id].distance_to(cid))[0]
                gap = abs(ta - tb) - s.t_h
                lat_min = min(lat_min, gap)
                if gap < -VIOLATION_TOL:
                    lat_viol.append((ra.cav_id, rb.cav_id, cid, gap))

    rear_min, rear_viol = math.inf, []
    for rec in recs:
        pred = db.predecessor(rec.cav_id)
        if pred is None:
            continue
        act_i, act_k = acts[rec.cav_id], acts[pred.cav_id]
        t_start = rec.segments[0].t0
        n = max(int(math.ceil((act_i.exit_time - t_start) / METRIC_DT)), 1)
        t = np.linspace(t_start, act_i.exit_time, n + 1)
        p_i, v_i = act_i.state(t)
        p_k, _ = act_k.state(t)
        slack = p_k - p_i - s.gamma - s.varphi * v_i
        m = float(np.min(slack))
        rear_min = min(rear_min, m)
        if m < -VIOLATION_TOL:
            rear_viol.append((pred.cav_id, rec.cav_id, m))

    models = _report_tubes(sim)
    cross_min, crossings = math.inf, []
    cross = {cid: _crossings_with_model(rec, models[cid], layout, s.levels) for cid, rec in db.records.items()}
    for a, ra in enumerate(recs):
        for rb in recs[a + 1:]:
            for cid in sorted(layout.shared_conflicts(ra.path_id, rb.path_id)):
                ca, cb = cross[ra.cav_id].get(cid), cross[rb.cav_id].get(cid)
                if ca is None or cb is None:
                    continue
                sl = co.lateral_slack_from_crossings(ca, cb, s.t_h)
                cross_min = min(cross_min, sl)
                if sl < -VIOLATION_TOL:
                    crossings.append((ra.cav_id, rb.cav_id, cid, sl))

    travel = {cid: acts[cid].exit_time - rec.segments[0].t0 for cid, rec in db.records.items()}
    replans = {cid: sum(1 for e in sim.events if e.cav_id == cid and e.kind == "replan")
               for cid in db.records}
    infeasible = sorted(cid for cid, rec in db.records.items() if any(p.infeasible for p in rec.segments))
    audit_failures = [(t, kind, cid) for t, kind, cid, rep in sim.audits if not rep.ok]
    return {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "n_cavs": len(recs),
        "min_lateral_slack": _finite(lat_min),
        "min_rear_end_slack": _finite(rear_min),
        "lateral_violations": len(lat_viol),
        "rear_end_violations": len(rear_viol),
        "violations": len(lat_viol) + len(rear_viol),
        "min_tube_lateral_slack": _finite(cross_min),
        "bound_crossings": len(crossings),
        "bound_crossing_pairs": [[a, b, c] for a, b, c, _ in crossings],
        "mean_travel_time": float(np.mean(list(travel.values()))) if travel else None,
        "travel_times": {str(k): v for k, v in travel.items()},
        "replan_counts": {str(k): v for k, v in replans.items()},
        "infeasible_cavs": infeasible,
        "audit_failures": len(audit_failures),
        "characterizations": sum(1 for e in sim.events if e.kind == "characterization"),
    }


def _finite(x):
    return None if not math.isfinite(x) else float(x)


def sample_trajectories(sim: _Simulator, period: float) -> list:
    """Rows (t, cav_id, path, p_nom, v_nom, u_nom, p_act, v_act) on a global time grid."""
    rows = []
    for cid, rec in sim.db.records.items():
        act = sim.actual(cid)
        t_start, t_end = rec.segments[0].t0, act.exit_time
        k0, k1 = math.ceil(t_start / period - 1e-9), math.floor(t_end / period + 1e-9)
        if k1 < k0:
            continue
        t = np.arange(k0, k1 + 1) * period
        p_act, v_act = act.state(t)
        seg_idx = np.clip(np.searchsorted(act.starts, t, side="right") - 1, 0, len(rec.segments) - 1)
        p_nom = np.empty_like(t)
        v_nom = np.empty_like(t)
        u_nom = np.zeros_like(t)
        for k in np.unique(seg_idx):
            m = seg_idx == k
            seg = rec.segments[k]
            p_nom[m], v_nom[m] = seg.state(t[m])
            u = eval_state(seg.phi, np.minimum(t[m], seg.tf))[2]
            u_nom[m] = np.where(t[m] > seg.tf, 0.0, u)
        for row in zip(t, p_nom, v_nom, u_nom, p_act, v_act):
            rows.append((float(row[0]), cid, rec.path_id, *map(float, row[1:])))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def run(cfg: ScenarioConfig) -> SimResult:
    sim = _Simulator(cfg).run()
    metrics = audit_metrics(sim)
    rows = sample_trajectories(sim, cfg.sample_period)
    return SimResult(cfg, sim.arrivals, sim.db, sim.events, sim.audits, rows, sim.tubes, metrics,
                     report_tubes=sim.models)
