"""Config parsing, scenario bundles, invariant checking, comparison, CLI."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from pushsim import (
    ConfigError,
    check_invariants,
    compare_protocols,
    demo_digraph,
    load_digraph,
    parse_config,
    run_scenario,
)
from pushsim.cli import main as cli_main
from pushsim.harness import ENV_OUTPUT_ROOT, load_config
from pushsim.protocol import SeedStreams, sample_initial_values
from pushsim.traceio import TraceFormatError, read_trace


def small_config(tmp_path: Path, **extra) -> dict:
    data = {
        "rounds": 60,
        "seeds": [1, 2],
        "output_dir": str(tmp_path / "out"),
        "graph": {"demo": True},
    }
    data.update(extra)
    return data


# ---------------------------------------------------------------------------
# config parsing


def test_parse_config_defaults() -> None:
    cfg = parse_config({})
    assert cfg.protocol == "decomposed"
    assert cfg.rounds == 500
    assert cfg.seeds == [1, 2, 3]
    assert cfg.spread == 100.0
    assert cfg.threshold == 500.0
    assert cfg.initials == {"dist": "uniform", "low": 0.0, "high": 50.0}
    assert cfg.attack_target is None
    assert cfg.extra_rounds_hint is None
    assert cfg.resolve_graph() == demo_digraph()


def test_parse_config_rejections() -> None:
    cases = [
        ({"bogus": 1, "also_bad": 2}, "unknown config key"),
        ({"protocol": "magic"}, "registered"),
        ({"rounds": 0}, "rounds"),
        ({"rounds": "many"}, "rounds"),
        ({"seeds": []}, "seeds"),
        ({"seeds": "1,2"}, "seeds"),
        ({"M": -1.0}, "M"),
        ({"c": 0.0}, "c"),
        ({"initials": {"dist": "exotic"}}, "initials"),
        ({"graph": {"nodes": 5}}, "graph"),
        ({"graph": {"generator": {"n": 2}}}, "graph"),
        ({"n": 4}, "declared 4"),
        ({"attack_target": 9}, "attack_target"),
    ]
    for data, needle in cases:
        with pytest.raises(ConfigError, match=needle):
            parse_config(data)


def test_parse_config_accepts_extra_rounds_hint() -> None:
    cfg = parse_config({"L": 25})
    assert cfg.extra_rounds_hint == 25


def test_parse_config_n_crosscheck_passes() -> None:
    cfg = parse_config({"n": 5})
    assert cfg.resolve_graph().n == 5


def test_load_config_overrides(tmp_path: Path) -> None:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"rounds": 80, "seeds": [4]}))
    cfg = load_config(path, {"rounds": 90, "protocol": None})
    assert cfg.rounds == 90  # flag beats file
    assert cfg.seeds == [4]  # file beats default
    assert cfg.protocol == "decomposed"  # None override ignored


def test_config_hash_ignores_output_dir(tmp_path: Path) -> None:
    a = parse_config(small_config(tmp_path))
    b = parse_config(small_config(tmp_path, output_dir=str(tmp_path / "elsewhere")))
    c = parse_config(small_config(tmp_path, rounds=61))
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_output_root_env(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.setenv(ENV_OUTPUT_ROOT, str(tmp_path / "root"))
    cfg = parse_config({"output_dir": "rel/out"})
    assert cfg.resolved_output_dir() == tmp_path / "root" / "rel" / "out"
    absolute = parse_config({"output_dir": str(tmp_path / "abs")})
    assert absolute.resolved_output_dir() == tmp_path / "abs"


# ---------------------------------------------------------------------------
# scenario bundles


def test_run_scenario_bundle(tmp_path: Path) -> None:
    cfg = parse_config(small_config(tmp_path))
    summary = run_scenario(cfg)
    out = tmp_path / "out"
    chash = cfg.config_hash()

    config_echo = json.loads((out / "config.json").read_text())
    assert config_echo["config_hash"] == chash
    assert config_echo["rounds"] == 60
    assert "output_dir" not in config_echo

    for seed in (1, 2):
        seed_dir = out / f"seed_{seed}"
        for name in (
            "trace.jsonl",
            "estimates.csv",
            "attack.json",
            "attack.csv",
            "ergodicity.csv",
            "ergodicity.json",
        ):
            assert (seed_dir / name).exists(), name
        header = json.loads((seed_dir / "trace.jsonl").read_text().splitlines()[0])
        assert header["config_hash"] == chash
        for csv_name in ("estimates.csv", "attack.csv", "ergodicity.csv"):
            first = (seed_dir / csv_name).read_text().splitlines()[0]
            assert first == f"# config_hash={chash}"
        attack = json.loads((seed_dir / "attack.json").read_text())
        assert attack["config_hash"] == chash
        assert attack["target"] == 5  # defaults to the highest-numbered node
        report = check_invariants(seed_dir / "trace.jsonl")
        assert report.ok, [item for item in report.items if item.status == "fail"]

    assert summary["config_hash"] == chash
    assert [run["seed"] for run in summary["runs"]] == [1, 2]
    for run in summary["runs"]:
        assert set(run) == {
            "seed",
            "convergence_round",
            "beta_convergence_round",
            "final_max_error",
            "attack",
            "ergodicity",
        }
        assert run["final_max_error"] < 1e-4
        assert run["ergodicity"]["epsilon"] > 0
    on_disk = json.loads((out / "summary.json").read_text())
    assert "created_utc" in on_disk["metadata"]


def test_run_scenario_deterministic_bundles(tmp_path: Path) -> None:
    cfg_a = parse_config(small_config(tmp_path, output_dir=str(tmp_path / "a")))
    cfg_b = parse_config(small_config(tmp_path, output_dir=str(tmp_path / "b")))
    run_scenario(cfg_a)
    run_scenario(cfg_b, workers=2)  # thread count must not leak into content

    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        blob_a = (tmp_path / "a" / rel).read_bytes()
        blob_b = (tmp_path / "b" / rel).read_bytes()
        if rel.name == "summary.json":
            sa = json.loads(blob_a)
            sb = json.loads(blob_b)
            sa.pop("metadata")
            sb.pop("metadata")
            assert sa == sb
        else:
            assert blob_a == blob_b, rel


def test_run_scenario_push_sum_skips_ergodicity_files(tmp_path: Path) -> None:
    cfg = parse_config(small_config(tmp_path, protocol="push_sum", seeds=[3]))
    summary = run_scenario(cfg)
    seed_dir = tmp_path / "out" / "seed_3"
    assert (seed_dir / "trace.jsonl").exists()
    assert not (seed_dir / "ergodicity.csv").exists()
    assert "ergodicity" not in summary["runs"][0]
    assert summary["runs"][0]["beta_convergence_round"] is None


# ---------------------------------------------------------------------------
# invariant checking on tampered files


def write_small_trace(tmp_path: Path) -> Path:
    cfg = parse_config(small_config(tmp_path, seeds=[1]))
    run_scenario(cfg)
    return tmp_path / "out" / "seed_1" / "trace.jsonl"


def tampered_copy(path: Path, line_no: int, mutate) -> Path:
    lines = path.read_text().splitlines()
    record = json.loads(lines[line_no - 1])
    mutate(record)
    lines[line_no - 1] = json.dumps(record, sort_keys=True)
    out = path.with_name(f"tampered_{line_no}.jsonl")
    out.write_text("\n".join(lines) + "\n")
    return out


def test_check_invariants_catches_bad_weight(tmp_path: Path) -> None:
    path = write_small_trace(tmp_path)

    def bump_weight(record: dict) -> None:
        record["p"][0] += 1e-3

    bad = tampered_copy(path, 4, bump_weight)  # line 4 holds round k=2
    report = check_invariants(bad)
    assert not report.ok
    failed = {item.name: item.detail for item in report.items if item.status == "fail"}
    assert "column_stochasticity" in failed
    assert "round 2" in failed["column_stochasticity"]
    assert "sender 1" in failed["column_stochasticity"]


def test_check_invariants_catches_bad_product(tmp_path: Path) -> None:
    path = write_small_trace(tmp_path)

    def bump_product(record: dict) -> None:
        biggest = max(record["transmitted"], key=lambda t: abs(t["value"]))
        biggest["value"] *= 1.5

    bad = tampered_copy(path, 3, bump_product)
    report = check_invariants(bad)
    failed = {item.name for item in report.items if item.status == "fail"}
    assert failed == {"replay_consistency"}


def test_check_invariants_catches_bad_state(tmp_path: Path) -> None:
    path = write_small_trace(tmp_path)

    def bump_state(record: dict) -> None:
        key = sorted(record["state"])[0]
        record["state"][key][0] += 0.5

    bad = tampered_copy(path, 5, bump_state)
    report = check_invariants(bad)
    failed = {item.name for item in report.items if item.status == "fail"}
    assert "replay_consistency" in failed or "conservation" in failed


def test_corrupt_line_raises_format_error(tmp_path: Path) -> None:
    path = write_small_trace(tmp_path)
    lines = path.read_text().splitlines()
    lines[2] = "definitely not json"
    bad = path.with_name("garbled.jsonl")
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceFormatError, match="line 3"):
        read_trace(bad)
    with pytest.raises(TraceFormatError):
        check_invariants(bad)


# ---------------------------------------------------------------------------
# comparison


def test_compare_protocols(tmp_path: Path) -> None:
    cfg = parse_config(small_config(tmp_path, rounds=40))
    payload = compare_protocols(cfg)
    out = tmp_path / "out"
    assert payload["protocols"] == ["push_sum", "decomposed"]

    lines = (out / "compare.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash={cfg.config_hash()}"
    assert lines[1] == "seed,k,mse_push_sum,mse_decomposed"
    first = lines[2].split(",")
    assert first[:2] == ["1", "0"]
    assert first[2] != ""  # push-sum is defined from the start
    assert first[3] == ""  # decomposed estimates start undefined
    assert len(lines) == 2 + 2 * 41

    saved = json.loads((out / "compare.json").read_text())
    for seed in (1, 2):
        expected = sample_initial_values(5, cfg.initials, SeedStreams(seed))
        assert np.allclose(saved["x0"][str(seed)], expected, atol=0)


def test_compare_protocols_unknown_tag(tmp_path: Path) -> None:
    cfg = parse_config(small_config(tmp_path))
    with pytest.raises(ConfigError, match="registered"):
        compare_protocols(cfg, ["push_sum", "teleport"])


# ---------------------------------------------------------------------------
# command line


def test_cli_gen_graph(tmp_path: Path) -> None:
    demo_path = tmp_path / "demo.json"
    assert cli_main(["gen-graph", "--demo", "--out", str(demo_path)]) == 0
    assert load_digraph(demo_path) == demo_digraph()

    rand_path = tmp_path / "rand.json"
    code = cli_main(
        ["gen-graph", "--n", "6", "--extra-edge-prob", "0.2", "--seed", "3", "--out", str(rand_path)]
    )
    assert code == 0
    assert load_digraph(rand_path).n == 6


def test_cli_run_check_attack(tmp_path: Path, capsys) -> None:
    out = tmp_path / "bundle"
    code = cli_main(
        [
            "run",
            "--rounds", "60",
            "--seeds", "7",
            "--graph", "demo",
            "--output-dir", str(out),
        ]
    )
    assert code == 0
    trace_path = out / "seed_7" / "trace.jsonl"
    assert trace_path.exists()

    assert cli_main(["check", str(trace_path)]) == 0
    printed = capsys.readouterr().out
    assert "PASS" in printed and "conservation" in printed

    json_out = tmp_path / "attack.json"
    csv_out = tmp_path / "attack.csv"
    code = cli_main(
        ["attack", str(trace_path), "--target", "5", "--json", str(json_out), "--csv", str(csv_out)]
    )
    assert code == 0
    assert json.loads(json_out.read_text())["target"] == 5
    assert csv_out.read_text().splitlines()[0] == "k,estimate,abs_error"


def test_cli_check_tampered_exits_one(tmp_path: Path) -> None:
    path = write_small_trace(tmp_path)

    def bump_weight(record: dict) -> None:
        record["p"][3] += 1e-3

    bad = tampered_copy(path, 3, bump_weight)
    assert cli_main(["check", str(bad)]) == 1


def test_cli_error_paths(tmp_path: Path, capsys) -> None:
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"mystery": 1}))
    assert cli_main(["run", "--config", str(bad_cfg)]) == 2
    assert "unknown config key" in capsys.readouterr().err

    assert cli_main(["check", str(tmp_path / "missing.jsonl")]) == 2
    assert cli_main(["run", "--rounds", "0", "--output-dir", str(tmp_path / "x")]) == 2


def test_cli_compare(tmp_path: Path) -> None:
    out = tmp_path / "cmp"
    code = cli_main(
        [
            "compare",
            "--rounds", "30",
            "--seeds", "1",
            "--graph", "demo",
            "--output-dir", str(out),
            "--protocols", "push_sum,decomposed",
        ]
    )
    assert code == 0
    assert (out / "compare.csv").exists()
