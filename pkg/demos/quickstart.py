"""Small end-to-end tour: synthesize decays, fit them classically, train a
compact network on log-binned histograms and compare float and fixed point.

    python3 demos/quickstart.py            # about a minute on a laptop
"""
import numpy as np

from flimflan.baselines import cmm_estimate, nlsf_fit, phasor_lifetime, phasor_transform
from flimflan.binning import LogBinSpec, compress_counts
from flimflan.decay import DatasetSpec, DecayParams, InstrumentConfig, gen_dataset, stack, synthesize_decay
from flimflan.network import build_flan, forward_batch, forward_fixed_batch
from flimflan.quantize import quantize_model
from flimflan.training import TrainConfig, train

cfg = InstrumentConfig()

# one bi-exponential pixel and three classical estimates
params = DecayParams.bi(0.5, 0.3, 2.5, peak_count=2000)
h = synthesize_decay(params, cfg, seed=0)
print("truth tau_a=1.400 tau_i=2.264")
print(f"CMM     {cmm_estimate(h, cfg):.3f}")
print(f"phasor  {phasor_lifetime(phasor_transform(h, cfg, calibrate_irf=True), cfg):.3f}")
fit = nlsf_fit(h, cfg, 2)
print(f"NLSF    tau_a={fit.lifetimes.tau_a:.3f} tau_i={fit.lifetimes.tau_i:.3f}")

# compact network on 80 log-spaced bins
edges = LogBinSpec(256, 80).edges
tr = stack(gen_dataset(DatasetSpec(2000, seed=1)))
va = stack(gen_dataset(DatasetSpec(500, seed=2)))
te = stack(gen_dataset(DatasetSpec(500, seed=3, peak_counts=(1000, 5000))))
small = lambda data: (compress_counts(data[0], edges), data[1])
model, report = train(build_flan("flan-ls", seed=0), small(tr), small(va), TrainConfig(max_epochs=40))
print(report.as_table())

x, y = small(te)
pf = forward_batch(model, x)
pq = forward_fixed_batch(quantize_model(model), x)
print("float RMSE", np.sqrt(((pf - y) ** 2).mean(axis=0)).round(3))
print("fixed RMSE", np.sqrt(((pq - y) ** 2).mean(axis=0)).round(3))
print(f"max |fixed - float| = {np.abs(pq - pf).max():.4f} ns")
