"""Fit the space-deformation model to one dispersal pattern with both procedures.

Run ``python3 demos/dispersal_fit.py``; takes about a minute on one core.
"""

import numpy as np

from nslgcp import ModelSpec, dispersal_scenario, fit


def main(seed: int = 2) -> None:
    sc = dispersal_scenario(2)
    pattern = sc.simulate(np.random.default_rng(seed))
    print(f"simulated {pattern.n} events")
    names = ("strength", "range", "sigma", "inv_alpha", "delta")
    rows = {m: fit(pattern, sc.covariates, ModelSpec.dispersal(), m).estimates for m in ("three-step", "two-step")}
    print(f"{'':>10s} {'truth':>10s} {'three-step':>12s} {'two-step':>12s}")
    for k in names:
        print(f"{k:>10s} {sc.truth[k]:10.4g} {rows['three-step'][k]:12.4g} {rows['two-step'][k]:12.4g}")


if __name__ == "__main__":
    main()
