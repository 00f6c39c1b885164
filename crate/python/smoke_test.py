"""Smoke test for the fairtensor_py extension.

Build and install the module first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/fairtensor_py-*.whl
    python python/smoke_test.py
"""

import math
import sys
import tempfile

import numpy as np

import fairtensor_py as ft


def rbf(m, gamma):
    sq = ((m[:, None, :] - m[None, :, :]) ** 2).sum(-1)
    return np.exp(-gamma * sq)


def centered(k):
    n = k.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    return h @ k @ h


def check(name, cond, detail=""):
    print(f"{'ok  ' if cond else 'FAIL'} {name} {detail}")
    return bool(cond)


def main():
    rng = np.random.default_rng(0)
    results = []

    report = ft.counterexample()
    results.append(check("counterexample", report["orthogonality_norm"] == 0.0
                         and report["threshold_probe_accuracy"] == 1.0))

    a = rng.normal(size=(7, 3))
    s = rng.normal(size=(7, 2))
    n = a.shape[0]
    ka, ks = centered(rbf(a, 0.5)), centered(rbf(s, 2.0))
    expected = (ka * ks).sum() / n**2
    got = ft.khsic(a.tolist(), s.tolist(), 0.5, 2.0)
    results.append(check("khsic vs numpy", math.isclose(got, expected, rel_tol=1e-10), f"{got:.6e}"))

    rho = (ka * ks).sum() / (np.linalg.norm(ka) * np.linalg.norm(ks))
    got = ft.normalized_khsic(a, s, 0.5, 2.0)
    results.append(check("alignment vs numpy", math.isclose(got, rho, rel_tol=1e-10), f"{got:.6f}"))

    ac, sc = a - a.mean(0), s - s.mean(0)
    results.append(check("hsic vs numpy", math.isclose(ft.hsic_linear(a, s), ((ac.T @ sc) ** 2).sum(), rel_tol=1e-10)))
    results.append(check("fatr vs numpy", math.isclose(ft.fatr_orthogonality(a, s), ((a.T @ s) ** 2).sum(), rel_tol=1e-10)))

    fa, fb, fc = rng.normal(size=(4, 2)), rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    x = np.einsum("ir,jr,kr->ijk", fa, fb, fc)
    recon = np.array(ft.reconstruct(fa, fb, fc))
    results.append(check("reconstruct vs einsum", np.abs(recon - x).max() < 1e-12))
    noisy = x + 0.1 * rng.normal(size=x.shape)
    rr = np.linalg.norm(noisy - x) / np.linalg.norm(noisy)
    results.append(check("relative residual", math.isclose(ft.relative_residual(noisy.tolist(), fa, fb, fc), rr, rel_tol=1e-10)))

    labels = [i % 2 for i in range(200)]
    pts = [[(3.0 if y else -3.0) + rng.normal(), (3.0 if y else -3.0) + rng.normal()] for y in labels]
    audit = ft.unfairness(pts, labels, seed=1)
    results.append(check("probe on separable clusters", audit["accuracy"] > 0.95, f"accuracy {audit['accuracy']:.3f}"))

    data = ft.Dataset.synthetic(small=True, seed=0)
    results.append(check("synthetic dataset", data.shape == [60, 30, 30] and len(data) == 60 and sum(data.labels) == 30))
    cmc = ft.Dataset.contraceptive()
    results.append(check("contraceptive dataset", cmc.shape == [1473, 9]))

    exp = ft.Experiment.preset("fig2b").with_overrides(small=True, method="khsic", epochs=3, inner_steps=20)
    fit = exp.fit()
    m = fit.metrics
    results.append(check("fit", len(fit.trace) == 3 and np.array(fit.a).shape == (60, 5)
                         and 0.0 < m["relative_residual"] < 1.0, repr(fit)))
    with tempfile.TemporaryDirectory() as tmp:
        fit.save(tmp)

    sweep_exp = ft.Experiment.from_toml(ft.Experiment.preset("fig1b").to_toml()).with_overrides(
        small=True, epochs=2, inner_steps=10, seed=0)
    rows = sweep_exp.sweep()
    results.append(check("sweep", len(rows) == 11 and set(ft.METRICS_HEADER.split(",")) <= set(rows[0])))

    try:
        ft.Experiment.preset("nope")
        results.append(check("bad preset raises", False))
    except ft.FairTensorError as e:
        results.append(check("bad preset raises", True, str(e)))

    passed = sum(results)
    print(f"{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
