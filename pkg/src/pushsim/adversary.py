"""Adversary models against the averaging protocols.

Two adversaries are modelled, both passive:

* An eavesdropper who knows the topology and every weight sent across an
  edge, and intercepts every transmitted product.  It cannot see retention
  weights, so it assumes each node keeps exactly the mass it did not send,
  and books the difference between what a node holds and what the books
  say it should hold.  Against plain push_sum the books balance and the
  target's initial value falls out; against the decomposed protocol the
  hidden retained substate breaks the books in a quantifiable way.

* An honest-but-curious coalition of nodes who run the protocol
  faithfully but pool everything they legitimately see: their own
  substates, the weights they generate, and the products they receive.
  When a target keeps at least one neighbor outside the coalition, traces
  with different target initials are observationally equivalent for the
  coalition; when the coalition surrounds the target completely, a flow
  balance recovers the target's initial value.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import Digraph
from .protocol import (
    ESTIMATE_GUARD,
    DecomposedState,
    Trace,
    estimate_average,
)

# Round from which exceedance statistics are counted in summaries: early
# rounds are dominated by the decaying start-up residual rather than by the
# retention mechanism under study.
POST_TRANSIENT_ROUND = 50

DIVISOR_GUARD = 1e-12


# ---------------------------------------------------------------------------
# eavesdropper


@dataclass
class EavesdropperState:
    """Observer bookkeeping for one target.

    s1/s2 hold the accumulator after each round; estimates[k] is their
    guarded ratio.  Rounds where the target's exchanged state could not be
    recovered (a needed weight was exactly zero) are listed in
    unrecoverable_rounds, and every quantity from such a round on is NaN.
    """

    target: int
    s1: np.ndarray
    s2: np.ndarray
    estimates: np.ndarray
    unrecoverable_rounds: list[int] = field(default_factory=list)


def _exchanged_value(state) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(state, DecomposedState):
        return state.x_alpha_1, state.x_alpha_2
    return state.x1, state.x2


def eavesdrop(trace: Trace, target: int) -> EavesdropperState:
    """Run the wire-tap observer against one node of a recorded trace.

    The observer seeds its books with the target's round-0 exchanged state
    (recovered by dividing an intercepted product by its known weight) and
    then adds, every round, the difference between the target's next
    exchanged state and the mass the books say flowed in: intercepted
    in-edge products plus an assumed self-weight of one minus the target's
    known out-weights.  The estimate is the ratio of the two books.
    """
    if not trace.rounds:
        raise ValueError("trace has no rounds to observe")
    g = trace.graph
    if target not in g.nodes:
        raise ValueError(f"target {target} not a node of the digraph")
    n_rounds = trace.n_rounds
    t = target - 1
    out_edges = [(j, target) for j in g.out_neighbors[target]]
    in_nodes = g.in_neighbors[target]

    # Recover the target's exchanged state at every observed round.
    x_plus = np.full((n_rounds, 2), np.nan)
    unrecoverable: list[int] = []
    for k, rec in enumerate(trace.rounds):
        weights = np.array([rec.weights.p[j - 1, t] for j, _ in out_edges])
        best = int(np.argmax(np.abs(weights)))
        if weights.size == 0 or weights[best] == 0.0:
            unrecoverable.append(k)
            continue
        j_best, _ = out_edges[best]
        pair = rec.transmitted[(j_best, target)]
        x_plus[k, 0] = pair[0] / weights[best]
        x_plus[k, 1] = pair[1] / weights[best]

    s = np.full((n_rounds, 2), np.nan)
    s[0] = x_plus[0]
    for k in range(n_rounds - 1):
        rec = trace.rounds[k]
        col = rec.weights.p[:, t]
        assumed_self = 1.0 - (col.sum() - col[t])
        for l in (0, 1):
            inflow = assumed_self * x_plus[k, l]
            for j in in_nodes:
                inflow += rec.transmitted[(target, j)][l]
            s[k + 1, l] = s[k, l] + x_plus[k + 1, l] - inflow

    estimates = np.array([estimate_average(s[k, 0], s[k, 1]) for k in range(n_rounds)])
    return EavesdropperState(
        target=target, s1=s[:, 0], s2=s[:, 1], estimates=estimates,
        unrecoverable_rounds=unrecoverable,
    )


@dataclass
class EavesdropperDiagnostics:
    """Why the observer's estimate behaves the way it does.

    For a decomposed trace the observer's books satisfy, exactly,

        s2(k) = 2 - retained_mass(k)
        estimate(k) - true_initial
            = (initial_offset * retained_mass(k) + residual(k))
              / (2 - retained_mass(k))

    where retained_mass(k) is the retention weight times the target's
    exchanged weight substate from the previous round, residual(k) decays
    to zero as the run converges, and initial_offset is the target's
    distance from the true average.  Whenever retained_mass comes close to
    2 the denominator collapses and the estimate error spikes past any
    threshold.  Index 0 of the per-round arrays is NaN (the books only
    open at round 1).
    """

    target: int
    average: float
    initial_offset: float
    retained_mass: np.ndarray
    residual: np.ndarray
    predicted_error: np.ndarray
    predicted_exceedance_rounds: list[int]


def eavesdropper_diagnostics(trace: Trace, target: int, threshold: float = 500.0) -> EavesdropperDiagnostics:
    """Closed-form error prediction for the observer on a decomposed trace."""
    if trace.protocol != "decomposed":
        raise ValueError("diagnostics apply to decomposed traces only")
    g = trace.graph
    if target not in g.nodes:
        raise ValueError(f"target {target} not a node of the digraph")
    t = target - 1
    n_rounds = trace.n_rounds
    states = trace.states()
    average = float(np.mean(trace.x0))
    initial_offset = float(trace.x0[t]) - average

    retained_mass = np.full(n_rounds, np.nan)
    residual = np.full(n_rounds, np.nan)
    for k in range(1, n_rounds):
        alpha_prev = trace.rounds[k - 1].weights.alpha[t]
        prev = states[k - 1]
        retained_mass[k] = alpha_prev * prev.x_alpha_2[t]
        residual[k] = average * retained_mass[k] - alpha_prev * prev.x_alpha_1[t]
    with np.errstate(divide="ignore", invalid="ignore"):
        predicted_error = np.abs(
            (initial_offset * retained_mass + residual) / (2.0 - retained_mass)
        )
    exceed = [int(k) for k in range(1, n_rounds) if predicted_error[k] > threshold]
    return EavesdropperDiagnostics(
        target=target,
        average=average,
        initial_offset=initial_offset,
        retained_mass=retained_mass,
        residual=residual,
        predicted_error=predicted_error,
        predicted_exceedance_rounds=exceed,
    )


def attack_report(trace: Trace, target: int, threshold: float = 500.0) -> dict:
    """Eavesdropper outcome as a JSON-ready dict.

    Exceedance rounds are those with a defined estimate whose error against
    the target's true initial value is above the threshold.
    """
    obs = eavesdrop(trace, target)
    truth = float(trace.x0[target - 1])
    errors = np.abs(obs.estimates - truth)
    defined = ~np.isnan(errors)
    exceed = [int(k) for k in range(trace.n_rounds) if defined[k] and errors[k] > threshold]
    final_error = float(errors[-1]) if defined[-1] else None
    return {
        "target": target,
        "protocol": trace.protocol,
        "c": threshold,
        "true_initial": truth,
        "estimates": [None if math.isnan(v) else float(v) for v in obs.estimates],
        "exceedance_rounds": exceed,
        "post_transient_exceedance_rounds": [k for k in exceed if k >= POST_TRANSIENT_ROUND],
        "final_error": final_error,
        "unrecoverable_rounds": list(obs.unrecoverable_rounds),
    }


def write_attack_json(report: dict, path, extra: dict | None = None) -> None:
    payload = dict(report)
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def write_attack_csv(report: dict, path, comment: str | None = None) -> None:
    from .traceio import _csv_writer

    truth = report["true_initial"]
    with open(path, "w", encoding="utf-8") as fh:
        writer = _csv_writer(fh, comment)
        writer.writerow(["k", "estimate", "abs_error"])
        for k, est in enumerate(report["estimates"]):
            if est is None:
                writer.writerow([k, "", ""])
            else:
                writer.writerow([k, repr(est), repr(abs(est - truth))])


# ---------------------------------------------------------------------------
# honest-but-curious coalitions


@dataclass
class CoalitionView:
    """Everything a coalition legitimately sees in a decomposed run.

    Per member a: substates[a] is a (rounds+1, 4) array with columns
    (x_alpha_1, x_alpha_2, x_beta_1, x_beta_2); weight_columns[a] is a
    (rounds, n) array holding a's outgoing weight column per round, with
    retention[a] the matching retention weights; received[a][p] is a
    (rounds, 2) array of the products p sent to a.
    """

    coalition: frozenset[int]
    graph: Digraph
    n_rounds: int
    substates: dict[int, np.ndarray]
    weight_columns: dict[int, np.ndarray]
    retention: dict[int, np.ndarray]
    received: dict[int, dict[int, np.ndarray]]


def build_coalition_view(trace: Trace, coalition) -> CoalitionView:
    """Project a decomposed trace onto a coalition's information set.

    The coalition must be a proper subset of the nodes; an empty coalition
    yields an empty view.
    """
    if trace.protocol != "decomposed":
        raise ValueError("coalition views are defined for decomposed traces")
    g = trace.graph
    members = frozenset(int(a) for a in coalition)
    if not members <= set(g.nodes):
        raise ValueError(f"coalition {sorted(members)} contains non-nodes")
    if members == set(g.nodes):
        raise ValueError("coalition of all nodes is rejected: no one is left to protect")
    states = trace.states()
    n_rounds = trace.n_rounds
    substates: dict[int, np.ndarray] = {}
    weight_columns: dict[int, np.ndarray] = {}
    retention: dict[int, np.ndarray] = {}
    received: dict[int, dict[int, np.ndarray]] = {}
    for a in sorted(members):
        ai = a - 1
        sub = np.empty((n_rounds + 1, 4))
        for k, st in enumerate(states):
            sub[k] = (st.x_alpha_1[ai], st.x_alpha_2[ai], st.x_beta_1[ai], st.x_beta_2[ai])
        substates[a] = sub
        weight_columns[a] = np.stack([rec.weights.p[:, ai] for rec in trace.rounds])
        retention[a] = np.array([rec.weights.alpha[ai] for rec in trace.rounds])
        received[a] = {
            p: np.array([rec.transmitted[(a, p)] for rec in trace.rounds])
            for p in g.in_neighbors[a]
        }
    return CoalitionView(
        coalition=members,
        graph=g,
        n_rounds=n_rounds,
        substates=substates,
        weight_columns=weight_columns,
        retention=retention,
        received=received,
    )


def views_allclose(a: CoalitionView, b: CoalitionView, rtol: float = 1e-12, atol: float = 1e-12) -> bool:
    """Elementwise comparison of two coalition views."""
    if a.coalition != b.coalition or a.n_rounds != b.n_rounds:
        return False
    for member in a.coalition:
        if not np.allclose(a.substates[member], b.substates[member], rtol=rtol, atol=atol):
            return False
        if not np.allclose(a.weight_columns[member], b.weight_columns[member], rtol=rtol, atol=atol):
            return False
        if not np.allclose(a.retention[member], b.retention[member], rtol=rtol, atol=atol):
            return False
        if a.received[member].keys() != b.received[member].keys():
            return False
        for p in a.received[member]:
            if not np.allclose(a.received[member][p], b.received[member][p], rtol=rtol, atol=atol):
                return False
    return True


def equivalent_trace(trace: Trace, i: int, m: int, e: float) -> Trace:
    """Rewrite a decomposed trace so node i starts at x_i(0) + e instead.

    Node m, a neighbor of i, absorbs -e so the sum is unchanged.  The
    rewrite shifts the two retained value substates by +/- 2e and repairs
    exactly two round-0 weights so that every state from round 1 onward is
    identical to the original: if m sends to i, m's self-weight and its
    weight toward i are adjusted against m's exchanged value substate; if i
    sends to m, i's self-weight and its weight toward m are adjusted
    against i's.  No weight generated by any other node, no retention
    weight, and no later round changes, so any coalition excluding i and m
    sees the exact same run.
    """
    if trace.protocol != "decomposed":
        raise ValueError("equivalent traces are defined for decomposed traces")
    g = trace.graph
    if i == m or i not in g.nodes or m not in g.nodes:
        raise ValueError(f"need two distinct nodes, got i={i}, m={m}")
    to_i = m in g.in_neighbors[i]
    from_i = m in g.out_neighbors[i]
    if not (to_i or from_i):
        raise ValueError(f"node {m} is not a neighbor of node {i}")

    out = Trace(
        trace.protocol,
        g,
        trace.x0.copy(),
        trace.seed,
        trace.spread,
        trace.initial_state.copy(),
        [
            replace(
                rec, weights=rec.weights.copy(), state=rec.state.copy(),
                transmitted=dict(rec.transmitted),
            )
            for rec in trace.rounds
        ],
    )
    if e == 0:
        return out

    out.x0[i - 1] += e
    out.x0[m - 1] -= e
    out.initial_state.x_beta_1[i - 1] += 2.0 * e
    out.initial_state.x_beta_1[m - 1] -= 2.0 * e

    # Repair round 0: the adjusted sender's value flow must shift by 2e
    # between its self-term and its edge to the other node.
    sender = m if to_i else i
    receiver = i if to_i else m
    sign = 1.0 if to_i else -1.0
    s = sender - 1
    divisor = trace.initial_state.x_alpha_1[s]
    if abs(divisor) < DIVISOR_GUARD:
        raise ValueError(
            f"node {sender}'s round-0 exchanged value {divisor!r} is too small to rebalance"
        )
    w0 = out.rounds[0].weights
    w0.p[s, s] = (trace.rounds[0].weights.p[s, s] * divisor + sign * 2.0 * e) / divisor
    w0.p[receiver - 1, s] = (
        trace.rounds[0].weights.p[receiver - 1, s] * divisor - sign * 2.0 * e
    ) / divisor
    x2 = trace.initial_state.x_alpha_2[s]
    out.rounds[0].transmitted[(receiver, sender)] = (
        float(w0.p[receiver - 1, s] * divisor),
        float(w0.p[receiver - 1, s] * x2),
    )
    return out


def coalition_reconstruct(view: CoalitionView, target: int, trace_length: int | None = None) -> float:
    """Recover a fully surrounded target's initial value from a coalition view.

    Requires every in- and out-neighbor of the target in the coalition.
    The coalition tracks the target's combined (exchanged + retained)
    substate through a flow balance: it grows by the products the members
    sent to the target and shrinks by the products the target sent out.
    The combined weight substate starts at 2 by construction; anchoring the
    combined value substate at the final round with the target's exchanged
    ratio (read off any received product pair) and rolling the balance back
    to round 0 gives twice the initial value.  Returns NaN if the anchor
    ratio is undefined.
    """
    g = view.graph
    if target in view.coalition:
        raise ValueError(f"target {target} is a coalition member")
    if target not in g.nodes:
        raise ValueError(f"target {target} not a node of the digraph")
    inside = set(g.in_neighbors[target]) | set(g.out_neighbors[target])
    missing = sorted(inside - view.coalition)
    if missing:
        raise ValueError(f"coalition must contain all neighbors of {target}; missing {missing}")
    last = view.n_rounds - 1 if trace_length is None else int(trace_length) - 1
    if not 0 <= last < view.n_rounds:
        raise ValueError(f"trace_length must be in 1..{view.n_rounds}")

    ti = target - 1
    flows = np.zeros((last + 1, 2))
    for m in g.in_neighbors[target]:
        weights_to_target = view.weight_columns[m][: last + 1, ti]
        flows[:, 0] += weights_to_target * view.substates[m][: last + 1, 0]
        flows[:, 1] += weights_to_target * view.substates[m][: last + 1, 1]
    for n_out in g.out_neighbors[target]:
        flows -= view.received[n_out][target][: last + 1]

    anchor = min(g.out_neighbors[target])
    prod_1, prod_2 = view.received[anchor][target][last]
    if abs(prod_2) < ESTIMATE_GUARD:
        return float("nan")
    ratio = prod_1 / prod_2

    z2_last = 2.0 + float(flows[:last, 1].sum())
    z1_last = z2_last * ratio
    z1_start = z1_last - float(flows[:last, 0].sum())
    return z1_start / 2.0
