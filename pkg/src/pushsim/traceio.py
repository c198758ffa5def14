"""Trace files and estimate tables.

A trace file is JSON lines: line 0 is a header object
{protocol, n, seed, M, x0, graph, state0, ...}, every following line is one
round record {k, p, alpha, state, transmitted}.  The weight matrix is dense
row-major; transmissions are listed as {from, to, l, value} sorted by
(from, to, l).  Floats are written with Python's shortest-roundtrip repr,
so loading a file restores every value bit for bit.
"""
from __future__ import annotations

import csv
import json
import math

import numpy as np

from .graph import digraph_from_dict, digraph_to_dict
from .protocol import (
    DecomposedState,
    PushSumState,
    RoundRecord,
    RoundWeights,
    State,
    Trace,
    estimate_series,
)


class TraceFormatError(ValueError):
    """A trace file failed validation; the message names the bad line."""


def _state_to_dict(state: State) -> dict:
    if isinstance(state, PushSumState):
        return {"x1": state.x1.tolist(), "x2": state.x2.tolist()}
    return {
        "x_alpha_1": state.x_alpha_1.tolist(),
        "x_alpha_2": state.x_alpha_2.tolist(),
        "x_beta_1": state.x_beta_1.tolist(),
        "x_beta_2": state.x_beta_2.tolist(),
    }


def _state_from_dict(data: dict, protocol: str, n: int) -> State:
    keys = ("x1", "x2") if protocol == "push_sum" else (
        "x_alpha_1", "x_alpha_2", "x_beta_1", "x_beta_2"
    )
    vecs = []
    for key in keys:
        vec = np.asarray(data[key], dtype=np.float64)
        if vec.shape != (n,):
            raise ValueError(f"state vector {key} has length {vec.shape}, expected {n}")
        vecs.append(vec)
    if protocol == "push_sum":
        return PushSumState(*vecs)
    return DecomposedState(*vecs)


def trace_lines(trace: Trace, extra_header: dict | None = None) -> list[str]:
    """Serialize a trace to its JSON lines (no trailing newlines)."""
    header = {
        "protocol": trace.protocol,
        "n": trace.graph.n,
        "seed": trace.seed,
        "M": trace.spread,
        "x0": trace.x0.tolist(),
        "graph": digraph_to_dict(trace.graph),
        "state0": _state_to_dict(trace.initial_state),
    }
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, sort_keys=True)]
    for rec in trace.rounds:
        sent = [
            {"from": i, "to": j, "l": l, "value": rec.transmitted[(j, i)][l - 1]}
            for (j, i) in trace.graph.sorted_edges
            for l in (1, 2)
        ]
        sent.sort(key=lambda t: (t["from"], t["to"], t["l"]))
        lines.append(
            json.dumps(
                {
                    "k": rec.k,
                    "p": rec.weights.p.reshape(-1).tolist(),
                    "alpha": rec.weights.alpha.tolist(),
                    "state": _state_to_dict(rec.state),
                    "transmitted": sent,
                },
                sort_keys=True,
            )
        )
    return lines


def write_trace(trace: Trace, path, extra_header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in trace_lines(trace, extra_header):
            fh.write(line)
            fh.write("\n")


def read_trace(path) -> Trace:
    """Load and validate a trace file.

    Raises TraceFormatError naming the first malformed line.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise TraceFormatError(f"{path}: empty trace file")

    def parse(line_no: int, text: str) -> dict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"{path}: line {line_no + 1} is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise TraceFormatError(f"{path}: line {line_no + 1} is not an object")
        return obj

    head = parse(0, raw[0])
    try:
        protocol = head["protocol"]
        n = int(head["n"])
        graph = digraph_from_dict(head["graph"])
        x0 = np.asarray(head["x0"], dtype=np.float64)
        state0 = _state_from_dict(head["state0"], protocol, n)
        seed = int(head["seed"])
        spread = head["M"]
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"{path}: line 1 header invalid: {exc}") from exc
    if protocol not in ("push_sum", "decomposed"):
        raise TraceFormatError(f"{path}: line 1 header invalid: unknown protocol {protocol!r}")
    if graph.n != n or x0.shape != (n,):
        raise TraceFormatError(f"{path}: line 1 header invalid: n, graph and x0 disagree")

    trace = Trace(protocol, graph, x0, seed, spread, state0)
    for line_no, text in enumerate(raw[1:], start=1):
        obj = parse(line_no, text)
        try:
            k = int(obj["k"])
            p = np.asarray(obj["p"], dtype=np.float64).reshape(n, n)
            alpha = np.asarray(obj["alpha"], dtype=np.float64)
            state = _state_from_dict(obj["state"], protocol, n)
            sent_list = obj["transmitted"]
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"{path}: line {line_no + 1} record invalid: {exc}") from exc
        if alpha.shape != (n,):
            raise TraceFormatError(f"{path}: line {line_no + 1} record invalid: alpha length")
        if k != line_no - 1:
            raise TraceFormatError(
                f"{path}: line {line_no + 1} record invalid: k={k}, expected {line_no - 1}"
            )
        transmitted: dict[tuple[int, int], list[float]] = {}
        try:
            for item in sent_list:
                i, j, l, value = int(item["from"]), int(item["to"]), int(item["l"]), float(item["value"])
                if (j, i) not in graph.edges or l not in (1, 2):
                    raise ValueError(f"transmission ({i}->{j}, l={l}) does not fit the graph")
                transmitted.setdefault((j, i), [math.nan, math.nan])[l - 1] = value
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"{path}: line {line_no + 1} record invalid: {exc}") from exc
        missing = [e for e in graph.sorted_edges if e not in transmitted]
        if missing or any(math.isnan(v) for pair in transmitted.values() for v in pair):
            raise TraceFormatError(
                f"{path}: line {line_no + 1} record invalid: incomplete transmission list"
            )
        trace.rounds.append(
            RoundRecord(k, RoundWeights(p, alpha), state, {e: tuple(v) for e, v in transmitted.items()})
        )
    return trace


def _csv_writer(fh, comment: str | None):
    if comment:
        fh.write(f"# {comment}\n")
    return csv.writer(fh, lineterminator="\n")


def _cell(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_estimates_csv(trace: Trace, path, comment: str | None = None) -> None:
    """Per-round per-node estimates: columns k, node, estimate, abs_error.

    abs_error is against the true average of x0; undefined estimates leave
    both cells empty.
    """
    est = estimate_series(trace)
    target = float(np.mean(trace.x0))
    with open(path, "w", encoding="utf-8") as fh:
        writer = _csv_writer(fh, comment)
        writer.writerow(["k", "node", "estimate", "abs_error"])
        for k in range(est.shape[0]):
            for node in range(1, trace.graph.n + 1):
                e = est[k, node - 1]
                writer.writerow([k, node, _cell(e), _cell(abs(e - target))])
