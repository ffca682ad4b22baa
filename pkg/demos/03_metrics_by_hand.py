"""Micro and macro averages on a small confusion matrix, checked by hand."""
# %% setup
import numpy as np

from mamapp.evaluation import ConfusionMatrix, confusion, metrics

# %% a two-class example
cm = confusion([0, 0, 1, 1], [0, 1, 1, 1], 2, classes=["healthy", "scab"])
print(cm.counts)
rep = metrics(cm)
print("accuracy", rep.accuracy, "micro", rep.micro)
print("macro", {k: round(v, 4) for k, v in rep.macro.items()})

# per class: healthy P=1/1 R=1/2, scab P=2/3 R=2/2
print("macro precision by hand", (1 + 2 / 3) / 2, "macro recall by hand", (0.5 + 1.0) / 2)

# %% the pooled ratio over TP+FP+FN is a different quantity
print("pooled TP/(TP+FP+FN):", rep.table_accuracy)

# %% a class that is never predicted
rep = metrics(ConfusionMatrix([[5, 0, 1], [2, 0, 0], [0, 0, 4]], classes=["a", "b", "c"]))
for s in rep.per_class:
    print(s.name, round(s.precision, 3), "undefined" if s.precision_undefined else "")

# %% micro precision always equals accuracy for single-label predictions
rng = np.random.default_rng(1)
for _ in range(3):
    t, p = rng.integers(0, 5, 100), rng.integers(0, 5, 100)
    r = metrics(confusion(t, p, 5))
    print(r.micro["p"], r.micro["r"], r.micro["f1"], r.accuracy)
