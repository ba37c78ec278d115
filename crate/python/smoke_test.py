"""Smoke test for the pyroughdyn extension module.

Build first:

    cargo build -p roughdyn-py --release --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built
library next to a temporary import path under the module name.
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libpyroughdyn.so")
        if os.path.exists(lib):
            break
    else:
        sys.exit("libpyroughdyn.so not found; build the roughdyn-py crate first")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "pyroughdyn.so"))
    sys.path.insert(0, tmp)
    import pyroughdyn

    return pyroughdyn


def main():
    rd = load()
    print("pyroughdyn", rd.__version__)

    # level-3 closed forms in one dimension
    g = rd.Signature.segment([0.3]) * rd.Signature.segment([0.2])
    assert abs(g.level2[0][0] - 0.5**2 / 2) < 1e-15
    assert abs(g.level3[0][0][0] - 0.5**3 / 6) < 1e-15

    drv = rd.Driver.fbm(0.35, 2, 256, horizon=1.0, seed=3)
    assert len(drv) == 256 and drv.max_shuffle_defect() < 1e-10
    whole = drv.sig(0, 256)
    split = drv.sig(0, 100) * drv.sig(100, 256)
    assert whole.max_abs_diff(split) < 1e-12

    p = rd.Problem("scalar-geometric")
    sol = p.solve([1.0], 1024, horizon=1.0, seed=11)
    incs = rd.sample_fbm(0.35, 1, 4096, 1.0, seed=11)
    exact = math.exp(0.1 * sum(r[0] for r in incs) + 0.3)
    err = abs(sol["states"][-1][0] - exact)
    assert err < 1e-5, err

    psi, inv = rd.Problem("stable-example").jacobian([0.2, -0.1], 128, horizon=2.0, seed=1)
    prod = [[sum(inv[i][k] * psi[k][j] for k in range(2)) for j in range(2)] for i in range(2)]
    assert all(abs(prod[i][j] - (i == j)) < 1e-10 for i in range(2) for j in range(2))

    # step h = 1/64: the local Taylor error bounds the bias by ~(2h)^3 for mu_2
    s = rd.Problem("linear-diagonal").spectrum(1.0, 64, 64, [0, 1])
    assert abs(s["exponents"][0] + 1.0) < 1e-5 and abs(s["exponents"][1] + 2.0) < 1e-5

    reps = rd.Problem("stable-example").stability_probe([[0.01, 0.0]], 0.5, 1.0, 16, 16, seed=7)
    assert reps[0]["verdict"] == "stable", reps[0]["verdict"]

    back = rd.Problem("linear-saddle").backward([0.1, 0.0], 1.0, 16, 16, seed=5)
    assert abs(back["fitted_rate"] + 1.0) < 0.15 and back["round_trip_error"] < 1e-6

    out = tempfile.mkdtemp()
    res = rd.run("bistable-cubic", out)
    assert res["failure"] is None and all(c["passed"] for c in res["checks"])
    assert rd.verify(out) == []

    try:
        rd.Problem("task = 'solve'\nbogus = 1\n")
    except ValueError as e:
        assert "line" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print("smoke test passed:", ", ".join(rd.builtin_names()))


if __name__ == "__main__":
    main()
