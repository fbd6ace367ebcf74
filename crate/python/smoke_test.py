"""Smoke test for the mrcom Python extension.

Build and install first:  pip install -e crates/python --no-build-isolation
"""

import math
import tempfile

import mrcom


def main() -> None:
    assert mrcom.MORPHOLOGIES == ["hop", "walk", "dash"]

    spec = mrcom.ScenarioSpec.sample("hop", 10.0, 50.0, seed=0).with_id(7)
    assert spec.id == 7 and spec.morphology == "hop"
    env = mrcom.Env(spec, stream=1)
    obs = env.reset()
    assert len(obs) == spec.obs_dim
    total = 0.0
    for _ in range(20):
        obs, reward, done = env.step([0.0] * spec.act_dim)
        assert 0.0 <= reward <= 1.0
        total += reward
    print(f"hop: 20 idle steps, return {total:.3f}, normalized {mrcom.normalized_return(spec, total):.1f}")

    noisy = spec.with_transform("addd")
    assert noisy.obs_dim == spec.obs_dim + 1

    scenarios = mrcom.ScenarioSet.sample(["hop", "walk"], 1, 10.0, 50.0, seed=3)
    assert len(scenarios) == 2
    assert mrcom.ScenarioSet.from_text(scenarios.to_text()).to_text() == scenarios.to_text()

    cfg = mrcom.Config("tiny")
    trainer = mrcom.Trainer(cfg, scenarios, 3)
    metrics = trainer.run()
    assert len(metrics) == cfg.outer_iters and metrics[-1]["phase"] == "train"
    assert all(math.isfinite(metrics[-1][k]) for k in ("loss_var", "loss_s", "loss_v", "loss_total"))
    print(f"trained {trainer.iteration} iteration(s), loss_total {metrics[-1]['loss_total']:.3f}")

    with tempfile.TemporaryDirectory() as d:
        trainer.save(d)
        resumed = mrcom.Trainer.load(d, cfg, scenarios, 3)
        assert resumed.iteration == trainer.iteration

    target = mrcom.ScenarioSpec.sample("hop", 10.0, 50.0, seed=9).with_id(1000)
    out = trainer.finish().adapt(target, 3)
    assert out["real_steps"] == cfg.adapt_steps and math.isfinite(out["normalized_return"])
    print(f"adapted {out['real_steps']} steps, normalized return {out['normalized_return']:.1f}")

    b = mrcom.BoundInputs(eps_t=0.1, eps_s=0.2, eps_pi=0.05, c_t=1.0, c_pi=2.0, r=1.0, gamma=0.9)
    assert abs(b.dyn_bound() - 0.3) < 1e-12
    assert b.gen_bound() >= b.perf_bound() >= 0.0
    assert mrcom.tv_distance([0.5, 0.5], [0.75, 0.25]) == 0.25
    report = mrcom.verify_bounds(seed=1, trials=0)
    assert report["violations"] == 0
    assert abs(mrcom.linear_probe_r2([[0.0], [1.0], [2.0]], [[1.0], [3.0], [5.0]]) - 1.0) < 1e-12
    print("smoke test passed")


if __name__ == "__main__":
    main()
