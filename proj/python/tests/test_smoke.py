import json
import math

import pytest

import gensfc


def test_preference_projection_is_on_simplex():
    s = gensfc.project_preference([2.0, 0.0, 1.0, 1.0])
    assert abs(sum(s) - 1.0) < 1e-12
    assert min(s) >= 1e-3
    assert gensfc.angular_distance(s, s) == pytest.approx(0.0, abs=1e-7)


def test_queueing_and_outage():
    r = gensfc.agent_latency(0.5, 1.0, 1.0)
    assert r["latency"] == pytest.approx(2.0, rel=1e-12)
    tail = 1.0 - sum(math.exp(-2.0) * 2.0**k / math.factorial(k) for k in range(3))
    assert gensfc.poisson_overload_prob(2.0, 2.0) == pytest.approx(tail, abs=1e-12)
    with pytest.raises(gensfc.StabilityError):
        gensfc.agent_latency(2.0, 1.0, 0.0)


def test_scaling_law_monotone():
    losses = [gensfc.pretraining_loss(10.0**e)["loss"] for e in range(18, 25)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_scenario_and_brute_force():
    cfg = json.dumps({"n_agents": 9, "topology": "complete"})
    text = gensfc.generate_scenario(cfg, 3)
    assert text == gensfc.generate_scenario(cfg, 3)
    scenario = json.loads(text)
    assert len(scenario["agents"]) == 9
    best = gensfc.brute_force_optimum(text, [0.25, 0.25, 0.25, 0.25], [0.0, 0.1])
    assert best["elam"] == 0
    assert len(best["chain"]) == 3
    b = gensfc.evaluate_chain(text, best["chain"])
    assert 0.0 <= b["capability"] <= 1.0
    with pytest.raises(gensfc.ConfigError):
        gensfc.generate_scenario(json.dumps({"n_agent": 9}), 1)


def test_tiny_experiment(tmp_path):
    cfg = {
        "variants": ["greedy", "random"],
        "seeds": [1],
        "episodes": 8,
        "final_window": 4,
        "scenario": {"n_agents": 12, "edge_prob": 0.5},
        "counts": {"demo": 4, "test": 6, "train": 10, "history_per_app": 5, "contrastive_k": 1, "prompt_pool": 40},
        "distill": {"epochs": 1, "warm_start_epochs": 1},
    }
    summary = json.loads(gensfc.run_experiment(json.dumps(cfg), 5, tmp_path))
    assert len(summary["runs"]) == 2
    assert (tmp_path / "greedy_seed1.csv").exists()
    again = json.loads(gensfc.summarize_dir(tmp_path, 4))
    assert again["logs_hash"] == summary["logs_hash"]


def test_scenario_matches_schema():
    jsonschema = pytest.importorskip("jsonschema")
    from pathlib import Path

    schema = json.loads((Path(__file__).parents[2] / "docs" / "scenario.schema.json").read_text())
    jsonschema.validate(json.loads(gensfc.generate_scenario("{}", 2)), schema)
