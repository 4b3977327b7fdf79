"""Smoke test for the Python bindings.

Build first:  maturin develop -m crates/py/Cargo.toml --release
Run:          python python/smoke_test.py   (or pytest python/)
"""
import math

import slowbond_py as sb


def test_constants():
    c = sb.constants(16, 0.25)
    p = 0.5 * 16**2 + 0.5 * 16**1.5
    q = 0.5 * 16**2
    assert math.isclose(c["lambda"], 0.5 * math.log(p / q), rel_tol=1e-12)
    assert math.isclose(c["nu"], p + q - 2 * math.sqrt(p * q), rel_tol=1e-9)


def test_kernel_row_is_stochastic():
    row = sb.kernel_row(8, 0.25, 0.01)
    assert len(row) == 65
    assert abs(sum(row) - 1.0) < 1e-10
    assert min(row) > -1e-12


def test_simulate_shapes():
    out = sb.simulate(8, 0.25, 0.05, 0.01, 65, seed=1)
    assert len(out["times"]) == len(out["spins"]) == len(out["flux"])
    assert all(len(s) == 65 for s in out["spins"])
    again = sb.simulate(8, 0.25, 0.05, 0.01, 65, seed=1)
    assert again == out


def test_suite_and_errors():
    ok, rows = sb.run_suite("kernel", seed=0, n=8, window=65)
    assert ok and rows and all(r["pass"] for r in rows)
    for bad in (lambda: sb.run_suite("nope"), lambda: sb.kernel_row(8, 0.25, -1.0)):
        try:
            bad()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
