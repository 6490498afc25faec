"""Backend iteration: align frames, propose merges, optimize, write back, reconcile, measure.

One iteration works on a private copy of a frontend snapshot and publishes
the result with a single reference swap, so readers of :attr:`Backend.graph`
only ever see a complete iteration. A failing stage is logged and leaves the
previously published graph in place.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentConfig, FrameAligner, LoopClosure
from .deformation import OmegaTable, build, optimize, robot_bindings, write_back
from .frontend import CHANNELS, FrontendGraph, GraphUpdate
from .gnc import GncConfig
from .metrics import (
    MetricError,
    Reference,
    evaluate_objects,
    evaluate_places,
    frame_errors,
    multi_robot_ate,
)
from .reconciliation import (
    ReconciliationConfig,
    propose_object_merges,
    propose_place_merges,
    validate_and_apply,
)
from .scene_graph import Layer, SceneGraph

log = logging.getLogger(__name__)

METRICS_HEADER = "# sgfuse-metrics v1"
STAGES = ("alignment", "proposal", "optimization", "write_back", "reconciliation", "metrics")


@dataclass(frozen=True)
class BackendConfig:
    gnc: GncConfig = field(default_factory=GncConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    reconciliation: ReconciliationConfig = field(default_factory=ReconciliationConfig)
    omega: OmegaTable = field(default_factory=OmegaTable)
    object_threshold: float = 1.0

    @classmethod
    def from_scenario(cls, sc):
        return cls(sc.gnc, sc.alignment, sc.reconciliation, sc.omega, sc.object_threshold)


@dataclass
class IterationResult:
    graph: SceneGraph
    row: dict
    timing: dict
    candidates: list = field(default_factory=list)
    report: object = None
    deformation: object = None
    solution: object = None
    realigned: list = field(default_factory=list)
    failed_stage: str | None = None


class Backend:
    def __init__(self, config: BackendConfig | None = None, robots=(), ground_truth=None,
                 dump_deformation=None):
        self.config = config or BackendConfig()
        self.robots = sorted(robots)
        self.ground_truth = ground_truth
        self.aligner = FrameAligner(self.config.alignment, self.config.gnc)
        self._graph = SceneGraph()
        self._lock = threading.Lock()
        self.rows: list[dict] = []
        self.timings: list[dict] = []
        self.iteration = 0
        self.dump_deformation = dump_deformation
        self.last: IterationResult | None = None

    @property
    def graph(self) -> SceneGraph:
        """Latest published backend graph (a private copy)."""
        with self._lock:
            return self._graph.copy()

    def serialize(self) -> bytes:
        with self._lock:
            return self._graph.serialize()

    def iterate(self, snapshot: SceneGraph, loop_closures, tick=0, bandwidth=None) -> IterationResult:
        cfg = self.config
        self.iteration += 1
        timing = {"iteration": self.iteration}
        stage = STAGES[0]
        res = IterationResult(None, {}, timing)
        lcs = list(loop_closures)
        try:
            t0 = time.perf_counter()
            frames = self.aligner.update(snapshot, lcs)
            g = snapshot.copy()
            for r in g.robots:
                if r in frames:
                    g.transform_robot(r, frames[r], "global")
            init = [r for r in g.robots if r in frames]
            timing[stage] = time.perf_counter() - t0

            stage = "proposal"
            t0 = time.perf_counter()
            cands = propose_place_merges(g, cfg.reconciliation, init) + propose_object_merges(
                g, cfg.reconciliation, init
            )
            res.candidates = cands
            timing[stage] = time.perf_counter() - t0

            stage = "optimization"
            t0 = time.perf_counter()
            dg = build(g, lcs, cands, cfg.omega, robots=init)
            bindings = {r: robot_bindings(g, r) for r in init}
            sol = optimize(dg, cfg.gnc)
            res.deformation, res.solution = dg, sol
            if self.dump_deformation is not None:
                self.dump_deformation(self.iteration, dg)
            idx = dg.index()
            optimized_frames = {}
            for r in init:
                agents = snapshot.nodes(Layer.AGENT, r)
                if agents and agents[0] in idx:
                    optimized_frames[r] = sol.values[idx[agents[0]]] @ snapshot[agents[0]].pose.inverse()
            res.realigned = self.aligner.check_realign(optimized_frames)
            if res.realigned:
                log.info("re-alignment triggered for %s", res.realigned)
            local_solutions = []
            for r in g.robots:
                if r not in frames:
                    dgr = build(g, lcs, (), cfg.omega, robots=[r])
                    local_solutions.append((dgr, optimize(dgr, cfg.gnc), robot_bindings(g, r)))
            timing[stage] = time.perf_counter() - t0

            stage = "write_back"
            t0 = time.perf_counter()
            write_back(g, dg, sol.values, bindings)
            for dgr, solr, b in local_solutions:
                write_back(g, dgr, solr.values, {dgr.ids[0].robot: b} if dgr.ids else None)
            timing[stage] = time.perf_counter() - t0

            stage = "reconciliation"
            t0 = time.perf_counter()
            report = validate_and_apply(g, cands, sol.candidate_mask(len(cands)), cfg.reconciliation)
            res.report = report
            timing[stage] = time.perf_counter() - t0

            stage = "metrics"
            t0 = time.perf_counter()
            g.check_invariants()
            row = self._row(tick, snapshot, g, frames, lcs, sol, report, bandwidth)
            timing[stage] = time.perf_counter() - t0
        except Exception:
            log.exception("backend iteration %d failed in stage %s; keeping previous graph", self.iteration, stage)
            res.failed_stage = stage
            res.graph = self.graph
            res.row = self._failed_row(tick, stage)
        else:
            with self._lock:
                self._graph = g
            res.graph = g
            res.row = row
        self.rows.append(res.row)
        self.timings.append(timing)
        self.last = res
        return res

    # metrics ------------------------------------------------------------

    def _base_row(self, tick):
        return {"iteration": self.iteration, "tick": tick}

    def _failed_row(self, tick, stage):
        row = self._base_row(tick)
        row["failed_stage"] = stage
        return row

    def _row(self, tick, snapshot, g, frames, lcs, sol, report, bandwidth):
        row = self._base_row(tick)
        row["failed_stage"] = ""
        robots = self.robots or g.robots
        init = [r for r in robots if r in frames]
        row["robots_initialized"] = len(init)
        for layer in Layer:
            row[f"nodes_{layer.value}"] = len(g.nodes(layer))
        row["lc_received"] = len(lcs)
        row["lc_inter"] = sum(not lc.intra_robot for lc in lcs)
        row["lc_in_optimization"] = len(sol.loop_closure_inliers)
        row["lc_accepted"] = sum(sol.loop_closure_inliers.values())
        gt = self.ground_truth
        if gt is not None and len(gt.loop_closure_outlier) >= len(lcs):
            labels = gt.loop_closure_outlier
            used = sol.loop_closure_inliers
            row["lc_outliers_rejected"] = sum(labels[k] and not ok for k, ok in used.items())
            row["lc_outliers_accepted"] = sum(labels[k] and ok for k, ok in used.items())
            row["lc_inliers_rejected"] = sum((not labels[k]) and not ok for k, ok in used.items())
        else:
            row["lc_outliers_rejected"] = row["lc_outliers_accepted"] = row["lc_inliers_rejected"] = math.nan
        row.update(report.to_row())
        row["gnc_converged"] = int(bool(sol.converged))
        row["gnc_iterations"] = sol.iterations
        row["objective_before"] = sol.objective_before
        row["objective_after"] = sol.objective_after
        row["realignments"] = self.aligner.realignments

        ate = {}
        odo = {}
        scores = None
        places = None
        if gt is not None:
            gref = Reference.from_ground_truth(gt)
            try:
                ate = multi_robot_ate(Reference.from_graph(g, init), gref, gt.root, init)
            except MetricError:
                ate = {}
            odo_ref = _odometry_reference(snapshot, gt, init)
            try:
                odo = multi_robot_ate(odo_ref, gref, gt.root, init)
            except MetricError:
                odo = {}
            est = Reference.from_graph(g, init)
            scores = evaluate_objects(est.objects, gref.objects, self.config.object_threshold)
            try:
                places = evaluate_places(est.places, gref.places)
            except MetricError:
                places = None
        row["ate_all"] = ate.get("all", math.nan)
        row["ate_odometry_all"] = odo.get("all", math.nan)
        for r in robots:
            row[f"ate_{r}"] = ate.get(r, math.nan)
        row["objects_found"] = scores.found if scores else math.nan
        row["objects_correct"] = scores.correct if scores else math.nan
        row["objects_flag"] = scores.flag if scores else ""
        row["place_err_mean"] = places.mean if places else math.nan
        row["place_err_median"] = places.median if places else math.nan
        row["place_err_max"] = places.max if places else math.nan
        for r in robots:
            if gt is not None and r in frames and r in gt.starts:
                et, er = frame_errors(frames[r], gt.relative_frame(gt.root, r))
            else:
                et = er = math.nan
            row[f"frame_err_t_{r}"] = et
            row[f"frame_err_r_deg_{r}"] = er
        bw = bandwidth or {}
        for r in robots:
            for c in CHANNELS:
                row[f"bw_{r}_{c}"] = bw.get(r, {}).get(c, 0)
        return row


def _odometry_reference(snapshot: SceneGraph, gt, robots) -> Reference:
    """Raw odometry of each robot placed in the root frame by the true robot frames."""
    trajs = {}
    for r in robots:
        agents = snapshot.nodes(Layer.AGENT, r)
        if not agents or r not in gt.starts:
            continue
        T = gt.relative_frame(gt.root, r)
        trajs[r] = (
            np.array([snapshot[a].timestamp for a in agents]),
            T.transform_points(np.array([snapshot[a].pose.t for a in agents])),
        )
    return Reference(trajs, [], np.zeros((0, 3)))


# running an event stream ---------------------------------------------------


def _format(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else format(float(v), ".17g")
    return str(v)


def metrics_csv(rows) -> str:
    """CSV with a version comment; columns are the union of row keys in first-seen order."""
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_format(r.get(c, "")) for c in cols])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    lines = text.splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"missing {METRICS_HEADER!r} header line")
    return list(csv.DictReader(lines[1:]))


def timing_csv(timings) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", *STAGES])
    for t in timings:
        w.writerow([t["iteration"], *(format(t[s], ".6f") if s in t else "" for s in STAGES)])
    return buf.getvalue()


def _dispatch(frontend: FrontendGraph, msg):
    if isinstance(msg, GraphUpdate):
        frontend.ingest(msg)
    elif isinstance(msg, LoopClosure):
        frontend.add_loop_closure(msg)


def run_events(events, backend: Backend, frontend: FrontendGraph | None = None, serial=False):
    """Feed ``(tick, kind, payload)`` events through a frontend and backend.

    Backend iterations happen at ``tick`` events whose payload is true. In
    concurrent mode an ingest thread captures the snapshot at those points and
    a backend thread consumes them, so the output equals the serial run.
    """
    frontend = frontend or FrontendGraph()

    def capture(tick):
        return tick, frontend.snapshot(), frontend.loop_closure_snapshot(), frontend.bandwidth.snapshot()

    if serial:
        for ev in events:
            if ev.kind == "tick":
                if ev.payload:
                    tick, snap, lcs, bw = capture(ev.tick)
                    backend.iterate(snap, lcs, tick, bw)
            else:
                _dispatch(frontend, ev.payload)
        return frontend

    work: queue.Queue = queue.Queue()
    errors = []

    def ingest():
        try:
            for ev in events:
                if ev.kind == "tick":
                    if ev.payload:
                        work.put(capture(ev.tick))
                else:
                    _dispatch(frontend, ev.payload)
        except BaseException as exc:  # surfaced in the caller's thread
            errors.append(exc)
        finally:
            work.put(None)

    def consume():
        while True:
            item = work.get()
            if item is None:
                return
            tick, snap, lcs, bw = item
            backend.iterate(snap, lcs, tick, bw)

    t_in = threading.Thread(target=ingest, name="sgfuse-ingest")
    t_be = threading.Thread(target=consume, name="sgfuse-backend")
    t_in.start()
    t_be.start()
    t_in.join()
    t_be.join()
    if errors:
        raise errors[0]
    return frontend
