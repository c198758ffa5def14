"""Experiment harness: configs, scenario runs, invariant checks, comparisons.

A scenario config is a flat JSON object; unknown keys are rejected so a
typo never silently runs the wrong experiment.  Every output file embeds a
hash of the materialized config (output location excluded), and rerunning
an identical config reproduces every file byte for byte apart from the
summary's metadata block.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import adversary, analysis, graph as graphmod, protocol, traceio

ENV_OUTPUT_ROOT = "PUSHSIM_OUTPUT_ROOT"

DEFAULTS = {
    "protocol": "decomposed",
    "rounds": 500,
    "seeds": [1, 2, 3],
    "M": 100.0,
    "c": 500.0,
    "initials": {"dist": "uniform", "low": 0.0, "high": 50.0},
    "graph": {"demo": True},
    "attack_target": None,
    "L": None,
    "output_dir": "out",
}


class ConfigError(ValueError):
    """A config failed validation; the message names the offending field."""


@dataclass
class ExperimentConfig:
    protocol: str
    rounds: int
    seeds: list[int]
    spread: float
    threshold: float
    initials: dict
    graph_spec: dict
    attack_target: int | None
    extra_rounds_hint: int | None  # the L knob: accepted for plug-ins, unused here
    output_dir: str

    def resolve_graph(self) -> graphmod.Digraph:
        spec = self.graph_spec
        if spec.get("demo"):
            return graphmod.demo_digraph()
        if "file" in spec:
            try:
                return graphmod.load_digraph(spec["file"])
            except (OSError, ValueError) as exc:
                raise ConfigError(f"graph.file: cannot load {spec['file']!r}: {exc}") from exc
        gen = spec["generator"]
        try:
            return graphmod.random_strongly_connected(
                int(gen["n"]), float(gen.get("extra_edge_prob", 0.3)), int(gen.get("seed", 0))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"graph.generator: {exc}") from exc

    def materialized(self) -> dict:
        """Canonical config echo; output location is ambient, not content."""
        return {
            "protocol": self.protocol,
            "rounds": self.rounds,
            "seeds": list(self.seeds),
            "M": self.spread,
            "c": self.threshold,
            "initials": dict(self.initials),
            "graph": dict(self.graph_spec),
            "attack_target": self.attack_target,
            "L": self.extra_rounds_hint,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.materialized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(ENV_OUTPUT_ROOT)
        path = Path(self.output_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


def parse_config(data: dict, n_hint: int | None = None) -> ExperimentConfig:
    """Validate a raw config dict, applying defaults for missing keys."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(DEFAULTS) - {"n"})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = {**DEFAULTS, **data}

    tag = merged["protocol"]
    if tag not in protocol.registered_protocols():
        raise ConfigError(
            f"protocol: unknown tag {tag!r}; registered: {', '.join(protocol.registered_protocols())}"
        )
    try:
        rounds = int(merged["rounds"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"rounds: {exc}") from exc
    if rounds < 1:
        raise ConfigError(f"rounds: must be positive, got {rounds}")
    seeds = merged["seeds"]
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigError("seeds: must be a non-empty list of integers")
    try:
        seeds = [int(s) for s in seeds]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seeds: {exc}") from exc
    spread = float(merged["M"])
    if spread <= 0:
        raise ConfigError(f"M: must be positive, got {spread}")
    threshold = float(merged["c"])
    if threshold <= 0:
        raise ConfigError(f"c: must be positive, got {threshold}")
    initials = merged["initials"]
    if not isinstance(initials, dict) or initials.get("dist") not in ("uniform", "constant"):
        raise ConfigError("initials: need {'dist': 'uniform'|'constant', ...}")
    gspec = merged["graph"]
    if not isinstance(gspec, dict) or not any(k in gspec for k in ("demo", "file", "generator")):
        raise ConfigError("graph: need one of demo, file, generator")

    cfg = ExperimentConfig(
        protocol=tag,
        rounds=rounds,
        seeds=seeds,
        spread=spread,
        threshold=threshold,
        initials=initials,
        graph_spec=gspec,
        attack_target=None if merged["attack_target"] is None else int(merged["attack_target"]),
        extra_rounds_hint=None if merged["L"] is None else int(merged["L"]),
        output_dir=str(merged["output_dir"]),
    )
    g = cfg.resolve_graph()
    try:
        graphmod.check_protocol_usable(g)
    except ValueError as exc:
        raise ConfigError(f"graph: {exc}") from exc
    declared_n = data.get("n", n_hint)
    if declared_n is not None and int(declared_n) != g.n:
        raise ConfigError(f"n: declared {declared_n}, but the graph has {g.n} nodes")
    if cfg.attack_target is not None and not 1 <= cfg.attack_target <= g.n:
        raise ConfigError(f"attack_target: {cfg.attack_target} outside 1..{g.n}")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(data)


# ---------------------------------------------------------------------------
# scenario runs


def _run_one_seed(cfg: ExperimentConfig, g: graphmod.Digraph, seed: int) -> dict:
    x0 = protocol.sample_initial_values(g.n, cfg.initials, protocol.SeedStreams(seed))
    trace = protocol.run_protocol(g, x0, cfg.protocol, cfg.rounds, cfg.spread, seed)
    metrics = analysis.run_metrics(trace)
    conv = analysis.convergence_round(metrics.abs_error)
    target = cfg.attack_target if cfg.attack_target is not None else g.n
    attack = adversary.attack_report(trace, target, cfg.threshold)
    result = {
        "seed": seed,
        "trace": trace,
        "metrics": metrics,
        "attack": attack,
        "convergence_round": conv,
        "final_max_error": float(np.nanmax(metrics.abs_error[-1])),
        "beta_convergence_round": None,
        "ergodicity": None,
    }
    if cfg.protocol == "decomposed":
        beta_err = np.abs(protocol.retained_ratio_series(trace) - metrics.target)
        result["beta_convergence_round"] = analysis.convergence_round(beta_err)
        if cfg.rounds >= 2:
            result["ergodicity"] = analysis.forward_product(trace)
    return result


def run_scenario(cfg: ExperimentConfig, workers: int = 1, verbose: bool = False) -> dict:
    """Run every seed of a scenario and write the output bundle.

    Seeds run independently (optionally on a thread pool); all files are
    written by this thread afterwards, in seed order, so the bundle content
    never depends on scheduling.
    """
    g = cfg.resolve_graph()
    chash = cfg.config_hash()
    outdir = cfg.resolved_output_dir()
    outdir.mkdir(parents=True, exist_ok=True)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _run_one_seed(cfg, g, s), cfg.seeds))
    else:
        results = [_run_one_seed(cfg, g, s) for s in cfg.seeds]

    with open(outdir / "config.json", "w", encoding="utf-8") as fh:
        json.dump({**cfg.materialized(), "config_hash": chash}, fh, sort_keys=True)
        fh.write("\n")

    runs_summary = []
    for res in results:
        seed = res["seed"]
        seed_dir = outdir / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        traceio.write_trace(res["trace"], seed_dir / "trace.jsonl", {"config_hash": chash})
        traceio.write_estimates_csv(res["trace"], seed_dir / "estimates.csv", f"config_hash={chash}")
        adversary.write_attack_json(res["attack"], seed_dir / "attack.json", {"config_hash": chash})
        adversary.write_attack_csv(res["attack"], seed_dir / "attack.csv", f"config_hash={chash}")
        entry = {
            "seed": seed,
            "convergence_round": res["convergence_round"],
            "beta_convergence_round": res["beta_convergence_round"],
            "final_max_error": res["final_max_error"],
            "attack": {
                "target": res["attack"]["target"],
                "exceedance_count": len(res["attack"]["exceedance_rounds"]),
                "post_transient_exceedance_count": len(
                    res["attack"]["post_transient_exceedance_rounds"]
                ),
                "final_error": res["attack"]["final_error"],
            },
        }
        if res["ergodicity"] is not None:
            report = res["ergodicity"]
            analysis.write_analysis_csv(
                report, res["metrics"], seed_dir / "ergodicity.csv", f"config_hash={chash}"
            )
            analysis.write_analysis_json(
                report, res["convergence_round"], seed_dir / "ergodicity.json",
                {"config_hash": chash},
            )
            entry["ergodicity"] = {
                "epsilon": report.epsilon,
                "final_delta": float(report.delta[-1]),
            }
        runs_summary.append(entry)
        if verbose:
            conv = res["convergence_round"]
            print(f"seed {seed}: converged at k={conv}" if conv is not None else f"seed {seed}: no convergence within {cfg.rounds} rounds")

    summary = {
        "config": cfg.materialized(),
        "config_hash": chash,
        "metadata": {"created_utc": datetime.now(timezone.utc).isoformat()},
        "runs": runs_summary,
    }
    with open(outdir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# invariant checking


@dataclass
class InvariantResult:
    name: str
    status: str  # "pass" | "fail" | "skip"
    detail: str


@dataclass
class InvariantReport:
    items: list[InvariantResult]

    @property
    def ok(self) -> bool:
        return all(item.status != "fail" for item in self.items)


def check_invariants(trace_or_path) -> InvariantReport:
    """Check a trace (object or file) against the protocol invariants.

    Covered: conservation of both coordinate sums, column stochasticity of
    every round's weights, the zero pattern against the digraph, replay
    consistency of states and transmitted products, and the contraction
    bound for decomposed traces.
    """
    trace = trace_or_path
    if not isinstance(trace, protocol.Trace):
        trace = traceio.read_trace(trace_or_path)
    items: list[InvariantResult] = []
    g = trace.graph
    n = g.n

    s1, s2 = protocol.conserved_sums(trace)
    bad = None
    for k in range(len(s1)):
        if abs(s1[k] - s1[0]) > 1e-9 * max(1.0, abs(s1[0])) or abs(s2[k] - s2[0]) > 1e-9 * max(1.0, abs(s2[0])):
            bad = k
            break
    items.append(
        InvariantResult(
            "conservation",
            "pass" if bad is None else "fail",
            f"sums {s1[0]:.6g}/{s2[0]:.6g} held for {len(s1)} states"
            if bad is None
            else f"first violation after round {bad - 1}: sums {s1[bad]:.6g}/{s2[bad]:.6g} vs {s1[0]:.6g}/{s2[0]:.6g}",
        )
    )

    bad_detail = None
    for rec in trace.rounds:
        err = np.abs(rec.weights.p.sum(axis=0) + rec.weights.alpha - 1.0)
        if err.max() > 1e-12:
            col = int(err.argmax())
            bad_detail = f"round {rec.k}, sender {col + 1}: column sum off by {err.max():.3e}"
            break
    items.append(
        InvariantResult(
            "column_stochasticity",
            "pass" if bad_detail is None else "fail",
            bad_detail or "all columns plus retention sum to 1 within 1e-12",
        )
    )

    bad_detail = None
    for rec in trace.rounds:
        nz = np.argwhere(rec.weights.p != 0.0)
        for j0, i0 in nz:
            if j0 != i0 and (int(j0) + 1, int(i0) + 1) not in g.edges:
                bad_detail = f"round {rec.k}: weight on missing edge ({int(j0) + 1}, {int(i0) + 1})"
                break
        if bad_detail:
            break
    items.append(
        InvariantResult(
            "zero_pattern",
            "pass" if bad_detail is None else "fail",
            bad_detail or "nonzero weights only on edges and the diagonal",
        )
    )

    bad_detail = None
    redone = protocol.replay(trace)
    for rec, rrec in zip(trace.rounds, redone.rounds):
        state_pairs = (
            (rec.state.x1, rrec.state.x1, "x1"), (rec.state.x2, rrec.state.x2, "x2")
        ) if isinstance(rec.state, protocol.PushSumState) else (
            (rec.state.x_alpha_1, rrec.state.x_alpha_1, "x_alpha_1"),
            (rec.state.x_alpha_2, rrec.state.x_alpha_2, "x_alpha_2"),
            (rec.state.x_beta_1, rrec.state.x_beta_1, "x_beta_1"),
            (rec.state.x_beta_2, rrec.state.x_beta_2, "x_beta_2"),
        )
        for recorded, replayed, label in state_pairs:
            if not np.allclose(recorded, replayed, rtol=1e-9, atol=1e-12):
                bad_detail = f"round {rec.k}: recorded {label} diverges from replay"
                break
        if bad_detail is None:
            for edge in g.sorted_edges:
                a, b = rec.transmitted[edge], rrec.transmitted[edge]
                if not np.allclose(a, b, rtol=1e-9, atol=1e-12):
                    bad_detail = f"round {rec.k}: transmitted product on edge {edge} diverges from replay"
                    break
        if bad_detail:
            break
    items.append(
        InvariantResult(
            "replay_consistency",
            "pass" if bad_detail is None else "fail",
            bad_detail or "states and products match a fresh replay",
        )
    )

    if trace.protocol == "decomposed" and trace.n_rounds >= 2:
        try:
            report = analysis.forward_product(trace)
        except ValueError as exc:
            # e.g. recorded weights whose columns no longer sum to one
            items.append(InvariantResult("ergodicity_bound", "fail", str(exc)))
            return InvariantReport(items)
        excess = report.delta - (report.bound + 1e-12)
        if (excess > 0).any():
            t = int(np.argmax(excess > 0))
            items.append(
                InvariantResult(
                    "ergodicity_bound",
                    "fail",
                    f"round {int(report.rounds[t])}: delta {report.delta[t]:.3e} above bound {report.bound[t]:.3e}",
                )
            )
        else:
            items.append(
                InvariantResult(
                    "ergodicity_bound",
                    "pass",
                    f"delta stayed within the bound; final delta {report.delta[-1]:.3e}",
                )
            )
    else:
        items.append(
            InvariantResult("ergodicity_bound", "skip", "only defined for decomposed traces with 2+ rounds")
        )
    return InvariantReport(items)


# ---------------------------------------------------------------------------
# protocol comparison


def compare_protocols(cfg: ExperimentConfig, protocols: list[str] | None = None) -> dict:
    """Run several protocols on identical seeds/initials and tabulate MSE.

    Writes compare.csv (seed, k, one mse column per protocol) and
    compare.json next to it.  Unknown tags are rejected with the list of
    registered ones.
    """
    tags = protocols if protocols else ["push_sum", "decomposed"]
    for tag in tags:
        if tag not in protocol.registered_protocols():
            raise ConfigError(
                f"unknown protocol {tag!r}; registered: {', '.join(protocol.registered_protocols())}"
            )
    g = cfg.resolve_graph()
    chash = cfg.config_hash()
    outdir = cfg.resolved_output_dir()
    outdir.mkdir(parents=True, exist_ok=True)

    x0_by_seed: dict[int, np.ndarray] = {
        seed: protocol.sample_initial_values(g.n, cfg.initials, protocol.SeedStreams(seed))
        for seed in cfg.seeds
    }
    mse: dict[tuple[str, int], np.ndarray] = {}
    for tag in tags:
        for seed in cfg.seeds:
            trace = protocol.run_protocol(g, x0_by_seed[seed], tag, cfg.rounds, cfg.spread, seed)
            mse[(tag, seed)] = analysis.run_metrics(trace).mse

    from .traceio import _cell, _csv_writer

    with open(outdir / "compare.csv", "w", encoding="utf-8") as fh:
        writer = _csv_writer(fh, f"config_hash={chash}")
        writer.writerow(["seed", "k"] + [f"mse_{tag}" for tag in tags])
        for seed in cfg.seeds:
            for k in range(cfg.rounds + 1):
                writer.writerow([seed, k] + [_cell(mse[(tag, seed)][k]) for tag in tags])

    payload = {
        "config_hash": chash,
        "protocols": list(tags),
        "seeds": list(cfg.seeds),
        "x0": {str(seed): x0_by_seed[seed].tolist() for seed in cfg.seeds},
        "csv": "compare.csv",
    }
    with open(outdir / "compare.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    return payload
