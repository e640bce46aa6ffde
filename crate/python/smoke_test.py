"""Smoke test for the crt_infer extension module.

Build first with `cargo build --release -p crt-infer-py`, then run
`python3 python/smoke_test.py`. The script copies the compiled library
to a temporary directory under the importable name `crt_infer`.
"""

import importlib
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libcrt_infer_py.so"
        if lib.exists():
            break
    else:
        sys.exit("build the extension with `cargo build --release -p crt-infer-py` first")
    dest = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, dest / "crt_infer.so")
    sys.path.insert(0, str(dest))
    return importlib.import_module("crt_infer")


def main():
    ci = load_module()

    records = [
        ("a", 1, [2.0], "s", 1),
        ("b", 3, [4.0, 5.0, 6.0], "s", 1),
        ("c", 1, [1.0], "s", 0),
        ("d", 3, [2.0, 3.0, 4.0], "s", 0),
    ]
    sample = ci.Sample(records, pi=0.5, tau=0.0)
    assert sample.g == 4
    assert math.isclose(sample.point_estimate("theta1"), 1.5)
    assert math.isclose(sample.point_estimate("theta2"), 1.75)
    report = sample.estimate("theta1")
    assert report["ci_lower"] <= report["estimate"] <= report["ci_upper"]
    assert report["variance_kind"] == "consistent"
    conv = sample.estimate_conventional("theta1")
    assert math.isclose(conv["variance"], 6.5)

    try:
        sample.point_estimate("theta3")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown target accepted")

    lonely = ci.Sample(records + [("e", 1, [1.0], "t", 1)], tau={"s": 0.0, "t": 0.0})
    try:
        lonely.estimate("theta1")
    except ci.EstimationError as e:
        assert "t" in str(e)
    else:
        raise AssertionError("empty cell not reported")

    assert abs(ci.normal_quantile(0.975) - 1.959964) < 1e-6
    total = sum(ci.beta_binomial_pmf(10.0, 50.0, 49, k) for k in range(50))
    assert abs(total - 1.0) < 1e-12

    theta1, theta2, vartheta = ci.schools_example()
    assert (theta1, theta2, vartheta) == (-0.5, 0.4, 0.0)

    cfg = ('{"size_dist": {"a": 10, "b": 50, "n_supp": 49}, "design": "design2", '
           '"sampling_rule": "full", "car": "car2", "G": 200}')
    (t1, t2), = ci.true_estimands(cfg)
    assert f"{t1:.4f} {t2:.4f}" == "-0.1410 0.1624"
    rows = ci.run_study(cfg, 20, seed=3, workers=2)
    assert rows[0]["replications"] + rows[0]["excluded"] == 20
    assert rows == ci.run_study(cfg, 20, seed=3, workers=1)

    print("crt_infer smoke test passed")


if __name__ == "__main__":
    main()
