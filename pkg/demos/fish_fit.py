"""Simulate one fish pattern, fit it by the three-step procedure and test the fit.

Run ``python3 demos/fish_fit.py``; takes about a minute on one core.
"""

import numpy as np

from nslgcp import ModelSpec, envelope_test, fish_scenario, fit_three_step, make_statistic, partition_by_covariate
from nslgcp.gof import default_r_grid
from nslgcp.study import fitted_simulator


def main(seed: int = 1) -> None:
    sc = fish_scenario(7)
    pattern = sc.simulate(np.random.default_rng(seed))
    print(f"simulated {pattern.n} events; truth {dict(sc.truth)}")

    result = fit_three_step(pattern, sc.covariates, ModelSpec.fish())
    for k, v in sorted(result.estimates.items()):
        print(f"  {k:>8s} = {v: .4f}")
    print(f"  gamma1 = 0 test p-value {result.regression['p_value']:.3f}")

    depth = sc.covariates["depth"]
    part = partition_by_covariate(pattern, depth, 5)
    stat = make_statistic(result.intensity, part.grid, default_r_grid(sc.window, part), part, depth)
    sim = fitted_simulator(result, sc.window)
    _, env = envelope_test(pattern, stat, sim.simulate, nsim=99, seed=seed, level=0.05)
    print(f"envelope test p-interval {env.p_interval}, rejected: {env.rejected}")


if __name__ == "__main__":
    main()
