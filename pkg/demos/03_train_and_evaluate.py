"""Train a plain and a Gauss-penalised U-Net on a small dipole dataset.

A scaled-down version of the comparison in the acceptance suite: 16^3 grids,
a narrow network and a few dozen steps, so it finishes in about a minute.
"""
import numpy as np

from emfieldnet.metrics import build_report, residual_stats
from emfieldnet.oracle import DatasetSpec, make_samples
from emfieldnet.training import LossSpec, OptimSpec, PreparedSample, predict, train
from emfieldnet.unet import ArchSpec

spec = DatasetSpec(sample_count=8, n=(16, 16, 16), coil_count=4, seed=3)
recs = make_samples(spec)
n_train, _ = spec.split_sizes()
train_set = [PreparedSample.from_record(r) for r in recs[:n_train]]
test_set = recs[n_train:]
arch = ArchSpec(in_channels=recs[0].input_stack().shape[0], depth=2, base_width=4)
print(f"{n_train} train / {len(test_set)} test samples, inputs {recs[0].input_stack().shape}")

preds = {}
for name, lam in (("plain", 0.0), ("physics", 1.0)):
    st = train(train_set, LossSpec(lambda_gauss=lam), OptimSpec(lr=2e-3, max_steps=60), arch)
    h = st.history
    print(f"{name:8s} loss {h[0]['total']:10.4g} -> {h[-1]['total']:10.4g}")
    preds[name] = [predict(st.params, r) for r in test_set]
    print(f"{'':8s} test Gauss residual MSE {residual_stats(preds[name], test_set)['gauss_B_mse']:.4g}")

print()
print(build_report(preds, test_set).to_table())
