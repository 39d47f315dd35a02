"""Quick check that the extension module imports and the solvers agree.

Build and install first, e.g.
    maturin build --release -m crates/python/Cargo.toml --features extension-module
    pip install target/wheels/collrad_py-*.whl
"""

import math
import sys
import tempfile

import collrad


def main():
    ring = collrad.System("ring", 6, 0.15)
    assert len(ring) == 6
    gamma = ring.gamma
    assert all(abs(gamma[i][i] - 1.0) < 1e-12 for i in range(6))

    modes = ring.modes()
    assert abs(sum(modes.gamma) - 6.0) < 1e-10
    print(f"ring N=6: {modes.kept_count} modes, {modes.tracked_equations} tracked equations")

    coll = modes.evolve(2.0, 201)
    exact = ring.evolve_exact(2.0, 201)
    c2 = ring.evolve_cumulant2(2.0, 201)
    peak_c, peak_e, peak_2 = (max(r["p_out"]) for r in (coll, exact, c2))
    print(f"peak p_out: collective {peak_c:.4f}, exact {peak_e:.4f}, cumulant2 {peak_2:.4f}")
    assert abs(peak_c - peak_e) / peak_e < 0.1
    assert c2["g2"][0] is None

    indep = collrad.System("chain", 4, 0.15, environment="independent").evolve_exact(1.0, 11)
    assert abs(indep["p_exc"][-1] - 4.0 / math.e) < 1e-6

    with tempfile.TemporaryDirectory() as out:
        sc = collrad.Scenario(geometry="chain", n=8, spacing=0.2, t_max=1.0, points=51, output=out)
        res = sc.simulate()
        assert res["kept_modes"] == 8 and len(res["t"]) == 51
        csv, meta = sc.run()
        with open(csv) as f:
            assert f.readline().strip() == collrad.CSV_HEADER

    try:
        collrad.Scenario(geometry="hexagon")
    except ValueError as e:
        print(f"config error reported: {e}")
    else:
        sys.exit("bad geometry accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
