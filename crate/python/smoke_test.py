"""Smoke test for the Python bindings.

Build and install first:
    pip install -e crates/python --no-build-isolation
"""

import spectral_nj_py as snj


def main():
    tree = snj.generate_tree("coalescent", 12, delta=0.85, seed=3)
    assert tree.leaf_count == 12

    back = snj.Tree.parse(tree.newick())
    assert back.rf_distance(tree) == 0

    pop = tree.population_similarity()
    for method in ("snj", "nj", "maxq"):
        est, trace = snj.reconstruct(pop, method)
        assert est.rf_distance(tree) == 0, method
        assert trace.count("\n") == 12 - 3 + 1

    x = snj.simulate(tree, 20000, d=4, seed=1)
    assert (x.rows, x.sites, x.states) == (12, 20000, 4)
    r, clamped = x.estimate("jc")
    assert r.size == 12 and clamped == 0
    est, _ = snj.reconstruct(r, "snj")
    print("snj rf at n=20000:", est.rf_distance(tree))

    m = snj.SimilarityMatrix(["a", "b", "c", "d"], [
        [1.0, 0.81, 0.4, 0.4],
        [0.81, 1.0, 0.4, 0.4],
        [0.4, 0.4, 1.0, 0.81],
        [0.4, 0.4, 0.81, 1.0],
    ])
    quartet, _ = snj.reconstruct(m)
    assert quartet.rf_distance(snj.Tree.parse("((a,b),(c,d));")) == 0

    try:
        snj.generate_tree("binary", 12)
    except ValueError as e:
        assert "power of two" in str(e)
    else:
        raise AssertionError("expected ValueError")

    reports = snj.verify(seed=0)
    for rep in reports:
        print("PASS" if rep["passed"] else "FAIL", rep["name"])
    assert all(rep["passed"] for rep in reports)
    print("ok")


if __name__ == "__main__":
    main()
