"""Posterior bands for a dose-response curve from two separate datasets.

The ablation model hides a five-dimensional mediator ``X`` between a
treatment ``Z`` and an outcome ``Y``. One table records ``(X, Z)``, another
``(Y, X)``; nothing links a ``Z`` to a ``Y`` directly. We fit the two-stage
model, pick the integrating measure by bootstrap calibration, and compare the
posterior band with the true curve.

Run with ``python3 demos/01_effect_posterior.py``. Takes about a minute.
"""

import numpy as np

from impspec.calibration import CalibrationGrid, frozen_builder, optimize_spectral_measure
from impspec.gp import fit_model
from impspec.kernels import SpectralMeasure
from impspec.posterior import credible_interval, posterior_batch
from impspec.simulators import DgpSpec, oracle_effect, simulate

zg = np.linspace(0, 1, 100)
truth = oracle_effect(DgpSpec("ablation"), values=zg, n_mc=None)

data = simulate(DgpSpec("ablation", n=100, seed=4)).to_arrays()
model = fit_model(data, iters=500)
print("fitted noise variances: stage one %.3f, stage two %.3f" % (model.params.sigma2, model.params.eta2))

# The base measure matches the empirical spread of X; calibration rescales it.
base = SpectralMeasure.from_data(np.vstack([data.v1, data.v2]))
measure, errors = optimize_spectral_measure(
    frozen_builder(model.params), data, CalibrationGrid(z=zg), n_boot=20, seed=0, base=base, return_errors=True
)
for omega, err in errors.items():
    print(f"  scale {omega:7.4f}  bootstrap calibration error {err:.3f}")
print("chosen scale:", measure.scale)

pm = posterior_batch(model, measure, None, zg)
lo, hi = credible_interval(pm, 0.95)
inside = np.mean((truth >= lo) & (truth <= hi))
print(f"RMSE of the posterior mean: {np.sqrt(np.mean((pm.mean - truth) ** 2)):.3f}")
print(f"share of the true curve inside the 95% band: {inside:.2f}")

# Where does the uncertainty come from? s1 is embedding uncertainty carried
# through the regression, s2 the regression uncertainty, s3 their interaction.
for name in ("s1", "s2", "s3"):
    print(f"  mean {name}: {np.mean(getattr(pm, name)):.4f}")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.fill_between(zg, lo, hi, alpha=0.3, label="95% band")
    ax.plot(zg, pm.mean, label="posterior mean")
    ax.plot(zg, truth, "k--", label="truth")
    ax.set_xlabel("z")
    ax.set_ylabel("E[Y | do(z)]")
    ax.legend()
    fig.tight_layout()
    fig.savefig("effect_posterior.svg")
    print("wrote effect_posterior.svg")
except ImportError:
    pass
