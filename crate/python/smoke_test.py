"""Smoke test for the tsod_lqr extension.

Build and run from the repository root:

    cargo build -p tsod-lqr-py --release --features extension-module
    cp target/release/libtsod_lqr.so python/tsod_lqr.so
    PYTHONPATH=python python3 python/smoke_test.py
"""

import math
import pathlib

import tsod_lqr as t

A_STAR = [[0.6, 0.5, 0.4], [0.0, 0.5, 0.4], [0.0, 0.0, 0.4]]
B_STAR = [[1.0, 0.5], [0.5, 1.0], [0.5, 0.5]]
A_SIM = [[0.7, 0.5, 0.4], [0.0, 0.5, 0.4], [0.0, 0.0, 0.4]]
B_SIM = [[1.1, 0.5], [0.5, 1.0], [0.5, 0.5]]


def main():
    # zero dynamics: P = Q, K = 0
    p, k, j = t.solve_dare(t.Theta([[0.0]], [[1.0]]), q=[[2.0]], r=[[1.0]])
    assert p == [[2.0]] and k == [[0.0]] and j == 2.0

    star, sim = t.Theta(A_STAR, B_STAR), t.Theta(A_SIM, B_SIM)
    assert t.Theta.from_stacked(star.stacked(), 3).a == A_STAR
    p, k, j = t.solve_dare(star)
    assert abs(j - sum(p[i][i] for i in range(3))) < 1e-12
    assert t.closed_loop_norm(star, k) < 0.99
    assert t.in_set_q(star, 50.0, 0.99)
    assert t.in_set_p(sim, 50.0, 5.0, 0.99)

    summary = t.run_offline(sim, 2000, 0.05, 0.15, seed=3)
    excited, covered = summary.check(sim)
    assert excited and covered, (excited, covered)

    belief = t.Belief([summary])
    assert belief.t == 0 and belief.beta(0.01) > summary.alpha
    w = belief.update([1.0, 0.0, 0.0, 0.5, 0.0], [0.6, 0.0, 0.1])
    assert w > 0 and belief.t == 1
    assert abs(belief.logdet_ratio - math.log1p(w)) < 1e-12

    ep = t.run_episode(star, [summary], 200, 0.01, seed=4)
    assert len(ep.cum_regret) == 200
    assert abs(ep.cum_regret[0] - (ep.cost[0] - ep.j_star)) < 1e-12
    oracle = t.run_episode(star, [summary], 200, 0.01, seed=4, variant="oracle")
    assert oracle.fallbacks == 0

    cfg = pathlib.Path(__file__).resolve().parent.parent / "crates/core/examples/paper_fig1.cfg"
    series = t.run_experiment(str(cfg), ["experiment.num_runs=2", "experiment.t=100"])
    assert [label for label, _, _ in series] == ["tsod", "ts_no_offline", "offline_estimate_only"]
    assert all(len(mean) == 100 and len(std) == 100 for _, mean, std in series)

    try:
        t.Theta([[1.0, 2.0]], [[1.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("non-square A accepted")

    print("tsod_lqr smoke test passed")


if __name__ == "__main__":
    main()
