"""Smoke test for the Python bindings. Build first with
`maturin develop -m crates/python/Cargo.toml` (or install the wheel)."""

import json
import random

import loda


def rand_matrix(rows, cols, rng):
    return [[rng.uniform(-1, 1) for _ in range(cols)] for _ in range(rows)]


def matmul_t(u, v):
    # uᵀ v for column-stacked lists
    return [[sum(u[k][i] * v[k][j] for k in range(len(u))) for j in range(len(v[0]))] for i in range(len(u[0]))]


def main():
    rng = random.Random(0)
    past = loda.second_moment(rand_matrix(40, 6, rng))
    new = loda.second_moment(rand_matrix(30, 6, rng))

    ug = loda.general_bases(past, new, 2)
    gram = matmul_t(ug, ug)
    assert all(abs(gram[i][j] - (i == j)) < 1e-10 for i in range(2) for j in range(2)), gram

    ui, spectrum = loda.isolated_bases(past, new, 2)
    assert len(ui) == 6 and len(ui[0]) == 2
    assert spectrum[0] >= spectrum[1] > 0

    null = loda.null_space_baseline(past, 2)
    r = loda.relative_energy(new, past, null)
    assert r > 0, r

    gammas = loda.rescale_factors([list(col) for col in zip(*ug)], new, past)
    assert all(0.0 <= g <= 1.0 for g in gammas), gammas

    try:
        loda.general_bases(past, new, 9)
    except ValueError as e:
        assert "rank" in str(e)
    else:
        raise AssertionError("rank above dimension was accepted")

    assert "full_loda" in loda.presets()
    config = "[stream]\ntasks = 2\ntrain_per_class = 20\ntest_per_class = 10\n"
    report = json.loads(loda.run_experiment(config, seed=1, preset="full_loda"))
    assert len(report["session_accuracy"]) == 2
    assert 0.0 <= report["a_last"] <= 100.0
    again = json.loads(loda.run_experiment(config, seed=1, preset="full_loda"))
    assert again == report
    print(f"smoke test ok: A_last {report['a_last']:.2f}, A_avg {report['a_avg']:.2f}")


if __name__ == "__main__":
    main()
