"""What happens to uncertainty far from the data.

In the confounded nine-variable benchmark we estimate
``E[Y | do(D = d), B = 0]`` by back-door adjustment. Training values of ``D``
sit roughly in ``[-3, 3]``. A nuclear-dominant finite-basis posterior
(the usual alternative) shrinks its variance to nothing once ``d`` leaves that
range: its basis functions all live on the training points. The closed-form
posterior here keeps a prior-like term there instead.

Run with ``python3 demos/02_out_of_distribution.py``. Takes under a minute.
"""

import numpy as np

from impspec.baselines import BayesImpModel
from impspec.gp import fit_model
from impspec.kernels import SpectralMeasure
from impspec.posterior import posterior_batch
from impspec.simulators import DgpSpec, oracle_effect, simulate

spec = DgpSpec("synthetic", n=100, seed=2, estimand="CATE_backdoor")
data = simulate(spec).to_arrays()
print("training range of d: [%.2f, %.2f]" % (data.w1[:, 0].min(), data.w1[:, 0].max()))

model = fit_model(data, iters=500)
measure = SpectralMeasure.from_data(data.v1)
bimp = BayesImpModel(data, model.params, measure, SpectralMeasure.from_data(data.w1))

d = np.array([0.0, 2.0, 4.0, 6.0, 10.0, 20.0])
W = np.column_stack([d, np.zeros_like(d)])
Z = np.zeros((d.size, 1))
truth = oracle_effect(DgpSpec("synthetic"), values=d, n_mc=100_000, seed=0)

ours = posterior_batch(model, measure, W, Z)
theirs = bimp.moments(W, Z)

print(f"{'d':>6} {'truth':>8} | {'mean':>8} {'sd':>8} | {'finite-basis mean':>18} {'sd':>10}")
for i in range(d.size):
    print(
        f"{d[i]:6.1f} {truth[i]:8.3f} | {ours.mean[i]:8.3f} {np.sqrt(ours.variance[i]):8.3f} |"
        f" {theirs.mean[i]:18.3f} {np.sqrt(theirs.variance[i]):10.2e}"
    )

# Far away both means revert to zero, but only one of them admits it does not know.
print("variance at d=20 relative to d=0: %.2g here, %.2g for the finite basis"
      % (ours.variance[-1] / ours.variance[0], theirs.variance[-1] / theirs.variance[0]))
