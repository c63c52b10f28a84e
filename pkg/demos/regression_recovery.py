"""Fine-label recovery from a coarse classifier on the synthetic regression task.

Trains cross-entropy and the entropy-regularized criterion on the same
binarized regression data and prints the OT recovery MSE of the scalar
feature as training proceeds.  A shortened schedule keeps this under a
minute; the acceptance suite uses the full one.

Run: python demos/regression_recovery.py
"""
from coarse2fine import experiment as ex

base = ex.apply_overrides(ex.RunConfig(), {
    "train.epochs": "300",
    "train.eval_interval": "50",
})

curves = {}
for name in ("cross_entropy", "fierce"):
    cfg = ex.apply_overrides(base, {"criterion.name": name, "criterion.lambda": "1"})
    rows = ex.run_train(cfg, write=False).rows
    curves[name] = [(r["epoch"], r["recovery_mse"], r["accuracy"]) for r in rows]

print(f"{'epoch':>5}  {'CE mse':>8}  {'CE acc':>6}  {'FIERCE mse':>10}  {'FIERCE acc':>10}")
for (ep, m1, a1), (_, m2, a2) in zip(curves["cross_entropy"], curves["fierce"]):
    print(f"{ep:>5}  {m1:8.2f}  {a1:6.3f}  {m2:10.2f}  {a2:10.3f}")
