"""Abundance estimation from features of a dominant-material classifier.

Trains each criterion on synthetic linear-mixing spectra labelled only by
their dominant material, then fits a linear head on the frozen features to
predict the full abundance vector.  Prints the transfer MSE and the raw MSE
of the softmax outputs as abundance estimates.

Run: python demos/unmixing_transfer.py
"""
from coarse2fine import experiment as ex

base = ex.apply_overrides(ex.RunConfig(), {
    "dataset.mode": "unmixing",
    "dataset.n_train": "2000",
    "dataset.n_test": "2000",
    "train.epochs": "60",
    "train.eval_interval": "60",
})

print(f"{'criterion':<18} {'accuracy':>8} {'transfer':>9} {'raw':>7} {'ECE':>7}")
for name in ("cross_entropy", "label_smoothing", "confidence_penalty", "fierce"):
    last = ex.run_train(ex.apply_overrides(base, {"criterion.name": name}), write=False).rows[-1]
    print(f"{name:<18} {last['accuracy']:8.3f} {last['transfer_mse']:9.4f} {last['raw_mse']:7.4f} {last['ece']:7.4f}")
