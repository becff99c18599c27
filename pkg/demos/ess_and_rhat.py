"""What the diagnostics report for well-mixed, sticky and drifting traces.

    python3 demos/ess_and_rhat.py
"""

import numpy as np

from mile import chainwise_split_rhat, ess_per_dimension

rng = np.random.default_rng(1)
n = 20_000


def ar1(phi):
    x = np.empty(n)
    x[0] = rng.normal() / np.sqrt(1 - phi**2)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + rng.normal()
    return x


traces = {
    "iid": rng.normal(size=n),
    "AR(1) 0.9": ar1(0.9),
    "AR(1) 0.99": ar1(0.99),
    "drift": rng.normal(size=n) + np.linspace(0, 3, n),
}
print(f"{'trace':<12}{'ESS/S':>10}{'theory':>10}{'split R-hat':>14}")
for name, x in traces.items():
    phi = float(name.split()[-1]) if name.startswith("AR") else None
    theory = "" if phi is None else f"{(1 - phi) / (1 + phi):.4f}"
    if name == "iid":
        theory = "1.0000"
    ess = ess_per_dimension(x)[0] / n
    print(f"{name:<12}{ess:>10.4f}{theory:>10}{chainwise_split_rhat(x)[0]:>14.4f}")
