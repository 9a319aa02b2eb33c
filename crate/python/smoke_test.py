"""Smoke test for the lanecraft_py extension module."""

import json

import lanecraft_py as lc


def main():
    assert sorted(lc.Scenario.kinds()) == sorted(
        ["straight", "curve", "intersection", "multi_lane", "blocked_lane", "red_light"]
    )

    spec = lc.Scenario("straight", 0)
    again = lc.Scenario.from_json(spec.to_json())
    assert again.to_json() == spec.to_json()

    scene, target = spec.initial_scene()
    assert scene.validate() == []
    assert lc.Scene.from_json(scene.to_json()).to_json() == scene.to_json()

    traj = scene.interpret()
    assert len(traj.path) > 1 and not traj.stop
    steer, throttle, brake = traj.track((0.0, 0.0, 0.0, 0.0))
    assert throttle > 0.0 and brake == 0.0

    stopped = lc.Trajectory(traj.path, traj.speed, stop=True)
    assert stopped.track((0.0, 0.0, 0.0, 5.0)) == (0.0, 0.0, 1.0)

    assert lc.hungarian([[4.0, 1.0, 3.0], [2.0, 6.0, 5.0]]) == [1, 0]
    try:
        lc.hungarian([[1.0], [2.0]])
        raise AssertionError("expected ValueError")
    except ValueError:
        pass

    result = lc.run_episode(spec, mode="oracle")
    assert result.rc == 1.0 and result.infractions == []
    assert abs(result.ds - result.rc * result.is_score) < 1e-9
    assert result.termination == "completed"

    blocked = lc.run_episode(lc.Scenario("blocked_lane", 0), dlf=False)
    assert any(kind == "collision" for _, kind in blocked.infractions)

    pipe = lc.Pipeline(seed=3)
    planned = pipe.plan(scene, target)
    assert all(abs(x) < 1e6 and abs(y) < 1e6 for x, y in planned.path)
    report = json.loads(pipe.bench(scene, target, ticks=3))
    assert report["median_ms"] > 0.0 and report["fps"] > 0.0

    passed, report = lc.check("fusion")
    assert passed and json.loads(report)["check"] == "fusion"

    print("smoke test passed")


if __name__ == "__main__":
    main()
