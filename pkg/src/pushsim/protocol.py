"""Push-sum style averaging protocols.

Two built-in protocols share one trace format:

* ``push_sum``: each node keeps a value/weight pair (x1, x2) and in every
  round splits both across its out-edges and itself with fresh random
  weights drawn from U(0,1).  The running estimate is x1/x2.

* ``decomposed``: each node splits its state into an exchanged substate
  (x_alpha_1, x_alpha_2), which is the only thing ever transmitted, and a
  retained substate (x_beta_1, x_beta_2) that never leaves the node.  Round
  0 uses sign-unrestricted Gaussian weights; later rounds use uniform ones.
  The retention weight alpha_i(k) moves a slice of the exchanged substate
  into the retained one each round.

Weight matrices are column stochastic: p[j-1, i-1] is the weight sender i
assigns to receiver j, and column i plus alpha_i sums to one.  All
randomness flows through per-(purpose, node, round) substreams derived from
one master seed, so any node's draws replay independently of the others.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .graph import Digraph, Edge, check_protocol_usable

# Guard below which a ratio estimate is reported as undefined (NaN).
ESTIMATE_GUARD = 1e-12
# Magnitude below which the round-0 normalizer triggers a redraw.
REDRAW_GUARD = 1e-6

# Substream purposes for the seed derivation scheme documented in SeedStreams.
PURPOSE_INIT_SUBSTATE = 0
PURPOSE_WEIGHTS = 1
PURPOSE_INITIAL_VALUES = 2


class SeedStreams:
    """Derives independent RNG substreams from one master seed.

    The stream for (purpose, node, k) is ``np.random.default_rng((seed,
    purpose, node, k))``: the four integers are fed to numpy's SeedSequence
    as an entropy tuple.  Identical arguments always give an identical
    stream, so a single node's draws for a single round can be replayed
    without touching any other stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, purpose: int, node: int, k: int = 0) -> np.random.Generator:
        return np.random.default_rng((self.seed, purpose, node, k))


@dataclass
class PushSumState:
    """Value and weight vectors (index 0 holds node 1)."""

    x1: np.ndarray
    x2: np.ndarray

    def copy(self) -> "PushSumState":
        return PushSumState(self.x1.copy(), self.x2.copy())


@dataclass
class DecomposedState:
    """Exchanged (alpha) and retained (beta) substate vectors."""

    x_alpha_1: np.ndarray
    x_alpha_2: np.ndarray
    x_beta_1: np.ndarray
    x_beta_2: np.ndarray

    def copy(self) -> "DecomposedState":
        return DecomposedState(
            self.x_alpha_1.copy(),
            self.x_alpha_2.copy(),
            self.x_beta_1.copy(),
            self.x_beta_2.copy(),
        )


State = PushSumState | DecomposedState


@dataclass
class RoundWeights:
    """One round of sampled weights.

    p[j-1, i-1] is sender i's weight toward receiver j; alpha[i-1] is the
    retention weight (all zeros for ``push_sum``).  Nonzero off-diagonal
    entries of p appear only on edges of the digraph.
    """

    p: np.ndarray
    alpha: np.ndarray

    def copy(self) -> "RoundWeights":
        return RoundWeights(self.p.copy(), self.alpha.copy())


@dataclass
class RoundRecord:
    """What one round leaves behind: weights, post-update state, transmissions.

    ``transmitted`` maps each edge (receiver, sender) to the pair of values
    (l=1, l=2) that crossed it this round, i.e. weight times the sender's
    pre-update exchanged state.
    """

    k: int
    weights: RoundWeights
    state: State
    transmitted: dict[Edge, tuple[float, float]]


@dataclass
class Trace:
    """Complete record of one protocol run."""

    protocol: str
    graph: Digraph
    x0: np.ndarray
    seed: int
    spread: float | None
    initial_state: State
    rounds: list[RoundRecord] = field(default_factory=list)

    def states(self) -> list[State]:
        """State at every time step: index k holds the state after k rounds."""
        return [self.initial_state] + [r.state for r in self.rounds]

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)


# ---------------------------------------------------------------------------
# initialization


def init_push_sum(x0: np.ndarray) -> PushSumState:
    """Start state for push_sum: x1 = initial values, x2 = ones."""
    x0 = np.asarray(x0, dtype=np.float64)
    return PushSumState(x1=x0.copy(), x2=np.ones_like(x0))


def init_decomposed(x0: np.ndarray, spread: float, streams: SeedStreams) -> DecomposedState:
    """Start state for the decomposed protocol.

    Each node draws its exchanged value substate uniformly from
    (-spread, spread) and sets the retained one to the complement, so the
    pair sums to twice the true initial value.  The exchanged weight
    substate starts at zero and the retained one at two.

    Args:
        x0: initial values, one per node.
        spread: half-width of the masking draw; must be positive.
        streams: substream source (purpose PURPOSE_INIT_SUBSTATE, per node).
    """
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    x_alpha_1 = np.empty(n)
    for i in range(1, n + 1):
        rng = streams.stream(PURPOSE_INIT_SUBSTATE, i)
        x_alpha_1[i - 1] = rng.uniform(-spread, spread)
    return DecomposedState(
        x_alpha_1=x_alpha_1,
        x_alpha_2=np.zeros(n),
        x_beta_1=2.0 * x0 - x_alpha_1,
        x_beta_2=np.full(n, 2.0),
    )


# ---------------------------------------------------------------------------
# weight sampling


def _positive_uniform(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform draws strictly inside (0, 1); exact 0.0 is redrawn."""
    draws = rng.random(count)
    while (draws == 0.0).any():
        redo = draws == 0.0
        draws[redo] = rng.random(int(redo.sum()))
    return draws


def sample_push_sum_weights(g: Digraph, k: int, streams: SeedStreams) -> RoundWeights:
    """Uniform column-stochastic weights with no retention.

    Each sender i draws one value per out-neighbor plus one for itself from
    U(0,1), in sorted-receiver-then-self order, and normalizes the column
    to sum one.
    """
    n = g.n
    p = np.zeros((n, n))
    for i in g.nodes:
        receivers = g.out_neighbors[i]
        rng = streams.stream(PURPOSE_WEIGHTS, i, k)
        draws = _positive_uniform(rng, len(receivers) + 1)
        draws /= draws.sum()
        for idx, j in enumerate(receivers):
            p[j - 1, i - 1] = draws[idx]
        p[i - 1, i - 1] = draws[-1]
    return RoundWeights(p=p, alpha=np.zeros(n))


def sample_round_weights(g: Digraph, k: int, spread: float, streams: SeedStreams) -> RoundWeights:
    """Weights for the decomposed protocol.

    Each sender draws one value per out-neighbor, one self-weight, and one
    retention weight, in sorted-receiver, self, retention order.  At k = 0
    the draws are Gaussian with mean 0 and standard deviation sqrt(spread),
    so normalized entries may fall outside (0, 1); whenever the normalizer
    magnitude falls below REDRAW_GUARD the node redraws the whole set.  From
    k = 1 on the draws are U(0,1), giving entries strictly inside (0, 1).
    The column plus retention always sums to one.
    """
    n = g.n
    p = np.zeros((n, n))
    alpha = np.zeros(n)
    for i in g.nodes:
        receivers = g.out_neighbors[i]
        count = len(receivers) + 2
        rng = streams.stream(PURPOSE_WEIGHTS, i, k)
        if k == 0:
            draws = rng.normal(0.0, np.sqrt(spread), count)
            while abs(draws.sum()) < REDRAW_GUARD:
                draws = rng.normal(0.0, np.sqrt(spread), count)
        else:
            draws = _positive_uniform(rng, count)
        draws /= draws.sum()
        for idx, j in enumerate(receivers):
            p[j - 1, i - 1] = draws[idx]
        p[i - 1, i - 1] = draws[-2]
        alpha[i - 1] = draws[-1]
    return RoundWeights(p=p, alpha=alpha)


# ---------------------------------------------------------------------------
# round updates


def _edge_products(g: Digraph, p: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> dict[Edge, tuple[float, float]]:
    return {
        (j, i): (float(p[j - 1, i - 1] * v1[i - 1]), float(p[j - 1, i - 1] * v2[i - 1]))
        for (j, i) in g.sorted_edges
    }


def push_sum_round(state: PushSumState, w: RoundWeights, g: Digraph) -> tuple[PushSumState, dict[Edge, tuple[float, float]]]:
    """One synchronous push_sum round.

    Returns the post-update state and the transmitted products
    weight * sender's pre-update state for every edge.
    """
    new = PushSumState(x1=w.p @ state.x1, x2=w.p @ state.x2)
    products = _edge_products(g, w.p, state.x1, state.x2)
    return new, products


def decomposed_round(state: DecomposedState, w: RoundWeights, g: Digraph) -> tuple[DecomposedState, dict[Edge, tuple[float, float]]]:
    """One synchronous round of the decomposed protocol.

    The exchanged substate mixes over in-edges and absorbs the retained
    substate; the new retained substate is the retention weight times the
    pre-update exchanged substate.  Only exchanged-substate products ever
    appear on the wire.
    """
    new = DecomposedState(
        x_alpha_1=w.p @ state.x_alpha_1 + state.x_beta_1,
        x_alpha_2=w.p @ state.x_alpha_2 + state.x_beta_2,
        x_beta_1=w.alpha * state.x_alpha_1,
        x_beta_2=w.alpha * state.x_alpha_2,
    )
    products = _edge_products(g, w.p, state.x_alpha_1, state.x_alpha_2)
    return new, products


# ---------------------------------------------------------------------------
# estimates


def estimate_average(numerator, denominator):
    """Ratio estimate with an undefined guard.

    Works elementwise on arrays; wherever |denominator| < ESTIMATE_GUARD the
    result is NaN (undefined), which is a value, not an error.
    """
    num = np.asarray(numerator, dtype=np.float64)
    den = np.asarray(denominator, dtype=np.float64)
    out = np.full(np.broadcast(num, den).shape, np.nan)
    ok = np.abs(den) >= ESTIMATE_GUARD
    np.divide(num, den, out=out, where=ok)
    if out.shape == ():
        return float(out)
    return out


def estimate_series(trace: Trace) -> np.ndarray:
    """Per-round ratio estimates, shape (rounds+1, n); NaN where undefined.

    Row k holds each node's estimate after k rounds: x1/x2 for push_sum,
    exchanged-substate ratio for the decomposed protocol.
    """
    rows = []
    for state in trace.states():
        if isinstance(state, PushSumState):
            rows.append(estimate_average(state.x1, state.x2))
        else:
            rows.append(estimate_average(state.x_alpha_1, state.x_alpha_2))
    return np.vstack(rows)


def retained_ratio_series(trace: Trace) -> np.ndarray:
    """Retained-substate ratio per round for decomposed traces; NaN where undefined."""
    rows = []
    for state in trace.states():
        if not isinstance(state, DecomposedState):
            raise ValueError("retained ratios exist only for decomposed traces")
        rows.append(estimate_average(state.x_beta_1, state.x_beta_2))
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# running and replaying

ProtocolRunner = Callable[[Digraph, np.ndarray, int, float, int], Trace]
_PROTOCOLS: dict[str, ProtocolRunner] = {}


def register_protocol(tag: str, runner: ProtocolRunner) -> None:
    """Attach a protocol runner under a tag; external baselines plug in here."""
    _PROTOCOLS[tag] = runner


def registered_protocols() -> tuple[str, ...]:
    return tuple(sorted(_PROTOCOLS))


def run_protocol(g: Digraph, x0, protocol: str, rounds: int, spread: float = 100.0, seed: int = 0) -> Trace:
    """Run a registered protocol and return its complete trace.

    Deterministic in all arguments: the same inputs give a bit-identical
    trace.  Rejects unknown tags, graphs unusable for protocol runs, an x0
    length mismatch, and a non-positive round count.
    """
    if protocol not in _PROTOCOLS:
        raise ValueError(
            f"unknown protocol {protocol!r}; registered: {', '.join(registered_protocols())}"
        )
    check_protocol_usable(g)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (g.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({g.n},)")
    if rounds < 1:
        raise ValueError(f"rounds must be positive, got {rounds}")
    return _PROTOCOLS[protocol](g, x0, rounds, spread, seed)


def _run_push_sum(g: Digraph, x0: np.ndarray, rounds: int, spread: float, seed: int) -> Trace:
    streams = SeedStreams(seed)
    state = init_push_sum(x0)
    trace = Trace("push_sum", g, x0.copy(), seed, spread, state.copy())
    for k in range(rounds):
        w = sample_push_sum_weights(g, k, streams)
        state, products = push_sum_round(state, w, g)
        trace.rounds.append(RoundRecord(k, w, state, products))
    return trace


def _run_decomposed(g: Digraph, x0: np.ndarray, rounds: int, spread: float, seed: int) -> Trace:
    streams = SeedStreams(seed)
    state = init_decomposed(x0, spread, streams)
    trace = Trace("decomposed", g, x0.copy(), seed, spread, state.copy())
    for k in range(rounds):
        w = sample_round_weights(g, k, spread, streams)
        state, products = decomposed_round(state, w, g)
        trace.rounds.append(RoundRecord(k, w, state, products))
    return trace


register_protocol("push_sum", _run_push_sum)
register_protocol("decomposed", _run_decomposed)


def round_function(protocol: str):
    """The single-round update used by a built-in protocol tag."""
    if protocol == "push_sum":
        return push_sum_round
    if protocol == "decomposed":
        return decomposed_round
    raise ValueError(f"no built-in round function for protocol {protocol!r}")


def replay(trace: Trace) -> Trace:
    """Recompute a trace from its initial state and recorded weights.

    Applies the protocol's round update to the stored weight sequence,
    ignoring the recorded states and products.  For traces produced by
    run_protocol the result is bit-identical to the original.
    """
    step = round_function(trace.protocol)
    state = trace.initial_state.copy()
    out = Trace(trace.protocol, trace.graph, trace.x0.copy(), trace.seed, trace.spread, state.copy())
    for rec in trace.rounds:
        state, products = step(state, rec.weights, trace.graph)
        out.rounds.append(RoundRecord(rec.k, rec.weights.copy(), state, products))
    return out


def conserved_sums(trace: Trace) -> tuple[np.ndarray, np.ndarray]:
    """Per-round totals of the value and weight coordinates.

    For push_sum these are sum(x1) and sum(x2); for the decomposed protocol
    the exchanged and retained substates are summed together.  Both stay
    constant over rounds (push_sum: sum(x0) and n; decomposed: twice
    sum(x0) and 2n).
    """
    s1, s2 = [], []
    for state in trace.states():
        if isinstance(state, PushSumState):
            s1.append(float(state.x1.sum()))
            s2.append(float(state.x2.sum()))
        else:
            s1.append(float(state.x_alpha_1.sum() + state.x_beta_1.sum()))
            s2.append(float(state.x_alpha_2.sum() + state.x_beta_2.sum()))
    return np.array(s1), np.array(s2)


def sample_initial_values(n: int, dist: dict, streams: SeedStreams) -> np.ndarray:
    """Draw initial node values from a distribution spec.

    Supported specs: {"dist": "uniform", "low": a, "high": b} with one
    per-node draw (purpose PURPOSE_INITIAL_VALUES), and
    {"dist": "constant", "value": v}.
    """
    kind = dist.get("dist", "uniform")
    if kind == "uniform":
        low, high = float(dist.get("low", 0.0)), float(dist.get("high", 50.0))
        out = np.empty(n)
        for i in range(1, n + 1):
            rng = streams.stream(PURPOSE_INITIAL_VALUES, i)
            out[i - 1] = rng.uniform(low, high)
        return out
    if kind == "constant":
        return np.full(n, float(dist.get("value", 0.0)))
    raise ValueError(f"unknown initial-value distribution {kind!r}")
