"""Smoke test for the inflight extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
then run:
    python python/smoke_test.py
"""

import math
import pathlib

import inflight

ASSETS = pathlib.Path(__file__).resolve().parent.parent / "assets"


def check_model():
    spec = inflight.ClusterSpec.load(str(ASSETS / "model_case_study.toml"))
    cs = spec.case_study()
    speedup = cs["pipeline"]["r_total"] / cs["conventional"]["r_total"]
    assert 1.4 <= speedup <= 1.7, speedup
    assert abs(cs["pipeline"]["g_max"] - 133) <= 2
    assert inflight.pipeline_max_lag(192, 44, {"kind": "empirical", "values": [1, 1, 4]}, 128) == 132
    rows = spec.speedup_vs_lag([8, 64])
    assert len(rows) == 2
    print(f"model: speedup {speedup:.3f} at g_max {cs['pipeline']['g_max']}")


def check_rl_math():
    assert abs(inflight.ess([1.0, 1.0, 1.0, 1.0]) - 1.0) < 1e-12
    assert 0.0 < inflight.ess([1.0, 0.0, 3.0]) < 1.0
    assert inflight.truncated_is_weight(-1.0, -1.0, 5.0) == 1.0
    lp = inflight.log_softmax([0.0, 1.0, 2.0])
    assert abs(sum(math.exp(x) for x in lp) - 1.0) < 1e-12
    assert inflight.categorical_kl(lp, lp) == 0.0

    base = inflight.Policy.recurrent(8, 4, 1.0, seed=1)
    cps = base.drift(3, 0.1, seed=2)
    assert cps[0] == base
    doc = base.to_document()
    assert inflight.Policy.from_document(doc) == base
    traj = inflight.mixed_policy_sample(cps, max_len=12, max_lag=4, prompt_id=0, seed=5)
    assert len(traj[0]["tokens"]) == 12
    assert base.logprobs(0, traj[0]["tokens"][:3])

    grad = inflight.grad_check(
        {"vocab_size": 3, "context_order": 1, "prompts": 2, "trajectories_per_prompt": 6, "max_len": 4, "seed": 1}
    )
    assert grad["max_relative_error"] < 1e-4
    study = inflight.ess_study(
        {
            "vocab_size": 4,
            "context_order": 0,
            "prompts": 2,
            "trajectories_per_prompt": 16,
            "max_len": 8,
            "seed": 3,
            "drift_magnitudes": [0.0, 0.5],
        }
    )
    assert abs(study["rows"][0]["ess"] - 1.0) < 1e-12
    print(f"rl math: grad error {grad['max_relative_error']:.2e}, ESS at drift 0.5 {study['rows'][1]['ess']:.3f}")


def check_sim():
    trace = inflight.simulate(str(ASSETS / "sim" / "pipeline_toy.toml"))
    assert len(trace) > 0
    assert trace.steady_state_start() is not None
    ess = trace.ess_trace(0.02, seed=11)
    assert all(0.0 < e <= 1.0 for e in ess)
    print(f"sim: {len(trace)} steps, mean ESS {sum(ess) / len(ess):.3f}")


def check_protocol():
    base = inflight.Policy.recurrent(8, 6, 1.0, seed=30)
    cps = base.drift(3, 0.3, seed=31)
    actions = [
        {"action": "start", "stream": f"s{k}", "prompt_id": k, "max_tokens": 24, "seed": 100 + k,
         "gates": [{"position": 8 * g + k, "min_version": g} for g in (1, 2)]}
        for k in range(4)
    ]
    for g in (1, 2):
        actions.append({"action": "wait_for", "position": 8 * g - 1})
        actions.append({"action": "update", "checkpoint": g})
    actions.append({"action": "await"})
    transcript = inflight.run_scenario(base, cps, {"actions": actions})
    assert transcript["status"]["status"] == "completed", transcript["status"]
    report = inflight.verify(transcript, base, cps)
    assert not report["problems"], report["problems"]
    versions = sorted({e["weight_version"] for s in transcript["streams"] for e in s["events"]})
    assert versions == [0, 1, 2], versions

    engine = inflight.Engine(base)
    assert engine.address.startswith("127.0.0.1:")
    assert engine.weight_version == 0
    engine.shutdown()
    print(f"protocol: {report['events']} events verified across versions {versions}")


if __name__ == "__main__":
    check_model()
    check_rl_math()
    check_sim()
    check_protocol()
    print("smoke test passed")
