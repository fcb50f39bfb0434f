"""Smoke test for the gne_esc Python extension.

Build and install first:

    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/gne_esc-*.whl
"""

import math
import pathlib
import sys

import gne_esc

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    game = gne_esc.Game.two_agent_quadratic()
    assert game.n_agents == 2 and game.n_coupling == 1

    u, lam, res = game.solve()
    assert close(u, [0.5, 0.5], 1e-9), u
    assert close(lam, [1.0], 1e-9), lam
    assert res < 1e-9

    assert close(game.pseudo_gradient([0.5, 0.5]), [-1.0, -1.0], 1e-12)
    assert game.kkt_residual(u, lam) < 1e-9
    du, dlam = game.flow(u, lam, [0.1, 0.1], 0.1)
    assert max(map(abs, du + dlam)) < 1e-9

    assert gne_esc.project_box([2.0, -3.0], [0.0, 0.0], [1.0, 1.0]) == [1.0, 0.0]
    p = gne_esc.project_ball([3.0, 4.0], [0.0, 0.0], 1.0)
    assert close(p, [0.6, 0.8], 1e-12)

    sc = gne_esc.Scenario(str(SCENARIOS / "quadratic2.toml"), horizon=100.0)
    checks = sc.verify()
    assert all(v in ("pass", "skip") for _, v, _ in checks), checks

    out = sc.run()
    assert out.status == "ok"
    assert len(out.times) == len(out.states)
    m = out.metrics
    assert m["summary"]["dist_to_vgne"] < 1e-4, m["summary"]
    final = out.states[-1]
    assert math.hypot(final[0] - 0.5, final[1] - 0.5) < 1e-4

    try:
        gne_esc.Scenario(str(SCENARIOS / "quadratic2.toml"), mode="bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("bad mode accepted")

    print(f"ok: u* = {u}, run distance {m['summary']['dist_to_vgne']:.2e}, {len(checks)} checks clean")


if __name__ == "__main__":
    sys.exit(main())
