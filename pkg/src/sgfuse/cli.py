"""Command line entry point: ``sgfuse run|replay|eval|dump-graph``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import canonical
from .backend import Backend, BackendConfig, metrics_csv, run_events, timing_csv
from .deformation import OmegaTable, build
from .frontend import FrameError, GraphUpdate, IngestError, encode_message, open_source
from .alignment import LoopClosure
from .metrics import MetricError, Reference, evaluate_objects, evaluate_places, multi_robot_ate
from .scene_graph import SceneGraph, SceneGraphFormatError
from .simulator import Event, GroundTruth, ScenarioConfig, ScenarioError, simulate

log = logging.getLogger("sgfuse")


class CliError(Exception):
    pass


def _write(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)


def _deformation_dumper(out: Path):
    def dump(iteration, dg):
        _write(out / f"deformation_{iteration:04d}.txt", dg.to_edgelist())

    return dump


def recording_lines(scenario: ScenarioConfig, seed: int, result) -> list[str]:
    """NDJSON lines of a recorded run: a header, then every event in order."""
    header = {
        "type": "header",
        "scenario": scenario.document,
        "seed": seed,
        "robots": [r.id for r in scenario.robots],
        "ground_truth": result.ground_truth.to_json(),
    }
    lines = [canonical.dumps(header)]
    for ev in result.events:
        if ev.kind == "tick":
            lines.append(canonical.dumps({"type": "tick", "tick": ev.tick, "backend": bool(ev.payload)}))
        else:
            lines.append(canonical.dumps(encode_message(ev.payload)))
    return lines


def write_outputs(out: Path, backend: Backend, ground_truth=None):
    _write(out / "metrics.csv", metrics_csv(backend.rows))
    _write(out / "timing.csv", timing_csv(backend.timings))
    _write(out / "final_graph.json", backend.serialize())
    if ground_truth is not None:
        _write(out / "ground_truth.json", canonical.dumps(ground_truth.to_json()))


def run_scenario(scenario: ScenarioConfig, out: Path | None = None, serial=False, record=False,
                 dump_deformation=False, seed=None) -> Backend:
    """Simulate a scenario, run the backend over its event stream and write the outputs."""
    seed = scenario.effective_seed if seed is None else seed
    result = simulate(scenario, seed)
    dumper = _deformation_dumper(out) if (dump_deformation and out is not None) else None
    backend = Backend(BackendConfig.from_scenario(scenario), [r.id for r in scenario.robots],
                      result.ground_truth, dumper)
    run_events(result.events, backend, serial=serial)
    if out is not None:
        write_outputs(out, backend, result.ground_truth)
        if record:
            _write(out / "events.ndjson", "\n".join(recording_lines(scenario, seed, result)) + "\n")
    return backend


def replay_source(messages, out: Path | None = None, serial=False, dump_deformation=False) -> Backend:
    """Run the backend over a recorded or live message stream.

    A leading header restores the solver configuration and ground truth. Without
    tick messages the backend runs once after the stream ends.
    """
    messages = iter(messages)
    config, robots, gt = BackendConfig(), (), None
    events = []
    saw_tick = False
    tick = 0
    for msg in messages:
        if isinstance(msg, dict):
            kind = msg.get("type")
            if kind == "header":
                if msg.get("scenario") is not None:
                    config = BackendConfig.from_scenario(ScenarioConfig.from_json(msg["scenario"]))
                robots = tuple(msg.get("robots", ()))
                if msg.get("ground_truth") is not None:
                    gt = GroundTruth.from_json(msg["ground_truth"])
            elif kind == "tick":
                saw_tick = True
                tick = int(msg["tick"])
                events.append(Event(tick, "tick", bool(msg.get("backend", False))))
            else:
                raise FrameError(f"unknown message type {kind!r}")
        elif isinstance(msg, GraphUpdate):
            events.append(Event(tick, "update", msg))
        elif isinstance(msg, LoopClosure):
            events.append(Event(tick, "loop_closure", msg))
    if not saw_tick:
        events.append(Event(tick, "tick", True))
    dumper = _deformation_dumper(out) if (dump_deformation and out is not None) else None
    backend = Backend(config, robots, gt, dumper)
    run_events(events, backend, serial=serial)
    if out is not None:
        write_outputs(out, backend)
    return backend


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _reference(doc, robots=None):
    """Evaluation reference from either a scene graph document or a ground-truth document."""
    if "layers" in doc or "nodes" in doc:
        return Reference.from_graph(SceneGraph.from_document(doc), robots), None
    try:
        gt = GroundTruth.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"not a scene graph or ground-truth document: {type(exc).__name__}: {exc}") from None
    return Reference.from_ground_truth(gt), gt.root


def evaluate_files(est_path, gt_path, threshold=1.0) -> dict:
    est_doc, gt_doc = _load_json(est_path), _load_json(gt_path)
    est, _ = _reference(est_doc)
    gt, root = _reference(gt_doc)
    robots = sorted(set(est.trajectories) & set(gt.trajectories))
    out = {}
    if robots:
        ate = multi_robot_ate(est, gt, root if root in robots else robots[0], robots)
        out.update({f"ate_{k}": v for k, v in ate.items()})
    scores = evaluate_objects(est.objects, gt.objects, threshold)
    out["objects_found"] = scores.found
    out["objects_correct"] = scores.correct
    out["objects_flag"] = scores.flag
    if len(gt.places):
        pe = evaluate_places(est.places, gt.places)
        out.update(place_err_mean=pe.mean, place_err_median=pe.median, place_err_max=pe.max)
    return out


def _cmd_run(args):
    sc = ScenarioConfig.load(args.scenario)
    backend = run_scenario(sc, Path(args.out), serial=args.serial, record=args.record,
                           dump_deformation=args.dump_deformation)
    failed = [r["iteration"] for r in backend.rows if r.get("failed_stage")]
    print(f"{len(backend.rows)} backend iterations written to {args.out}")
    if failed:
        print(f"warning: iterations {failed} failed; see log", file=sys.stderr)
    return 0


def _cmd_replay(args):
    spec = args.input or args.updates
    if spec is None:
        raise CliError("replay needs an updates file or --input")
    try:
        source = open_source(spec)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    backend = replay_source(source, Path(args.out), serial=args.serial,
                            dump_deformation=args.dump_deformation)
    print(f"{len(backend.rows)} backend iterations written to {args.out}")
    return 0


def _cmd_eval(args):
    res = evaluate_files(args.est, args.gt, args.threshold)
    for k, v in res.items():
        print(f"{k},{format(v, '.17g') if isinstance(v, float) else v}")
    return 0


def _cmd_dump_graph(args):
    with open(args.state, "rb") as f:
        g = SceneGraph.deserialize(f.read())
    if args.format == "json":
        data = g.serialize().decode("utf-8")
    else:
        data = build(g, (), (), OmegaTable()).to_edgelist()
    if args.output:
        _write(Path(args.output), data)
    else:
        sys.stdout.write(data)
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="sgfuse", description="Multi-robot scene graph fusion backend")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and run the backend")
    r.add_argument("scenario")
    r.add_argument("--out", default="out")
    r.add_argument("--serial", action="store_true", help="alternate ingest and backend strictly")
    r.add_argument("--record", action="store_true", help="also write events.ndjson")
    r.add_argument("--dump-deformation", action="store_true", help="write each deformation graph as an edge list")
    r.set_defaults(func=_cmd_run)

    rp = sub.add_parser("replay", help="run the backend over a recorded or live update stream")
    rp.add_argument("updates", nargs="?")
    rp.add_argument("--input", help="tcp://host:port or file:path")
    rp.add_argument("--out", default="out")
    rp.add_argument("--serial", action="store_true")
    rp.add_argument("--dump-deformation", action="store_true")
    rp.set_defaults(func=_cmd_replay)

    e = sub.add_parser("eval", help="compare an estimated graph with ground truth")
    e.add_argument("est")
    e.add_argument("gt")
    e.add_argument("--threshold", type=float, default=1.0, help="object match distance in metres")
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("dump-graph", help="print a stored scene graph")
    d.add_argument("state")
    d.add_argument("--format", choices=("json", "edgelist"), default="json")
    d.add_argument("-o", "--output")
    d.set_defaults(func=_cmd_dump_graph)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ScenarioError, SceneGraphFormatError, FrameError, IngestError, MetricError) as exc:
        print(f"sgfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # output consumer went away (e.g. piped into head); not an error
        sys.stdout = open(os.devnull, "w")
        return 0
    except OSError as exc:
        print(f"sgfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
