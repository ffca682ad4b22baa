"""Train, evaluate and inspect features on a small synthetic leaf dataset.

The procedural images stand in for a real class-per-directory dataset; point
``--data`` at real images to run the same pipeline on them.
"""
# %% setup
import argparse
import tempfile
from pathlib import Path

import numpy as np

from mamapp import data as D
from mamapp.evaluation import confusion, export_features, metrics, pca
from mamapp.model import MamAppConfig
from mamapp.synthetic import write_dataset
from mamapp.training import smoothing_floor, train

parser = argparse.ArgumentParser()
parser.add_argument("--data", help="class-per-directory image root (default: synthetic)")
parser.add_argument("--epochs", type=int, default=60)
parser.add_argument("--size", type=int, default=32)
args = parser.parse_args()

work = Path(tempfile.mkdtemp(prefix="mamapp-demo-"))
root = Path(args.data) if args.data else write_dataset(work / "leaves", per_class=[30, 20, 40, 25], size=64)

# %% index and split
index = D.stratified_split(D.index_dataset(root), seed=0)
for row in index.split_table():
    print("{:12s} train {:4d}  val {:4d}  test {:4d}  total {:4d}".format(*row))

# %% train a reduced configuration
cfg = MamAppConfig(num_classes=len(index.classes), input_size=(args.size, args.size, 3), num_blocks=2,
                   batch_size=16, epochs=args.epochs)
result = train(cfg, index, out_dir=work / "run",
               progress=lambda r: print(f"epoch {r.epoch:3d}  train {r.train_loss:.4f}  "
                                        f"val {r.val_loss:.4f}  acc {r.val_acc:.3f}"))
print(f"best epoch {result.best_epoch}; smoothing floor {smoothing_floor(cfg.num_classes, 0.1):.4f}")

# %% test-set metrics
batches = lambda: D.make_batches(index, "test", 16, image_size=args.size)
feats, paths, names = export_features(result.model, batches(), work / "features.csv", index.classes)
logits = feats @ result.model.head.weight.data.T + result.model.head.bias.data
y = np.array([index.classes.index(n) for n in names])
report = metrics(confusion(y, logits.argmax(axis=1), cfg.num_classes, index.classes))
print(report.confusion.counts)
print(f"accuracy {report.accuracy:.3f}  macro F1 {report.macro['f1']:.3f}")

# %% PCA of the pooled features
proj = pca(feats, 2)
print("explained variance:", np.round(proj.explained_variance_ratio, 3))
for name in index.classes:
    pts = proj.coords[np.array(names) == name]
    print(f"{name:12s} centroid {np.round(pts.mean(axis=0), 3)}")
print("artifacts in", work)
