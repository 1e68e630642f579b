"""Quick end-to-end check of the Python bindings."""

import math
import pathlib
import tempfile

import platoon_safety as ps

ROOT = pathlib.Path(__file__).resolve().parent.parent
CASES = ROOT / "crates" / "core" / "scenarios"


def main():
    case1 = ps.Scenario.load(str(CASES / "case1.json"))
    assert case1.name == "case1" and case1.vehicles == 2, case1

    nc = ps.run(case1, "nc", seed=0)
    sv = ps.run(case1, "sv2i", seed=0)
    assert nc.summary["r_steps"] == 70
    assert sv.summary["r_steps"] in (2, 3)
    assert nc.summary["max_slip"] > sv.summary["max_slip"]
    assert not nc.summary["collided"]
    assert len(nc.column("v_abs", vehicle=1)) == nc.steps

    again = ps.run(case1, "nc", seed=0)
    assert again.column("p_abs") == nc.column("p_abs")

    with tempfile.TemporaryDirectory() as out:
        nc.write_csv(out)
        metrics = ps.analyze_trace(str(pathlib.Path(out) / "trace.csv"))
        assert metrics["r_steps"] == 70
        assert math.isclose(metrics["max_slip"], nc.summary["max_slip"])

    case2 = ps.Scenario.load(str(CASES / "case2.json"))
    rows = ps.sweep(case2, ["nc", "sv2i"], seeds=5)
    assert [r["channel"] for r in rows] == ["nc"] * 5 + ["sv2i"] * 5
    assert all(r["collided"] for r in rows[:5])
    assert not any(r["collided"] for r in rows[5:])

    assert ps.delay_to_steps(ps.delay_nc(), 0.01) == 70
    assert math.isclose(ps.delay_lte(0.05), 0.065)
    fast = ps.sample_delays("sv2i", 1000, seed=1)
    assert 0.020 <= sum(fast) / len(fast) <= 0.030

    ad, bd = ps.zoh([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], 0.01)
    assert math.isclose(ad[0][1], 0.01) and math.isclose(bd[0][0], 5e-5)

    assert math.isclose(ps.max_slip(5.0), 0.098750, rel_tol=1e-6)
    req = ps.required_deceleration(20, 500, position=-2.0, speed=3.0, target_gap=-30.0)
    assert req["feasible"] and req["u_required"] < 0
    assert ps.relative_distance_bound(20, 500, -2.0, 3.0) > 0

    try:
        ps.Scenario.from_json('{"platoon": {}}')
    except ValueError as e:
        assert "line" in str(e), e
    else:
        raise AssertionError("malformed scenario accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
