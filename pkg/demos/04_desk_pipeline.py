"""
Source-only, self-training and mixing at a small scale
======================================================

The full benchmark pipeline on a reduced budget: pretrain on source,
pseudo-label the target, then self-train with and without mixing. Expect a
few minutes on one CPU core. The acceptance tests run the same steps at the
full desk scale over three seeds.
"""

# %%
import numpy as np

from cmomlab import experiment, trainer
from cmomlab.experiment import DataConfig

exp = experiment.desk_config(seed=0)
exp = exp.with_train(max_iter=600)
exp = experiment.ExperimentConfig(world=exp.world, data=DataConfig(80, 80, 20), train=exp.train,
                                  pretrain_iterations=400)
prep = experiment.prepare(exp)

# %%
p0 = experiment.pretrain(exp, prep.data)
labels, thresholds, kept = experiment.pseudolabel(exp, prep.data, p0)
prep.data.pseudo = labels
valid = labels != 255
print(f"pseudo-labels keep {kept:.3f} of pixels, {np.mean(labels[valid] == prep.target_truth[valid]):.3f} correct")

# %%
results = {"source only": experiment.score(p0, prep.eval_set, 8)}
for name, flags in (("self-training", dict(enable_cmom=False, enable_fatc=False)),
                    ("+ mixing", dict(enable_cmom=True, enable_fatc=False)),
                    ("+ mixing + alignment", dict(enable_cmom=True, enable_fatc=True))):
    params, reports, _ = trainer.run_self_training(exp.with_train(**flags).train, prep.data, p0)
    results[name] = experiment.score(params, prep.eval_set, 8)

for name, (iou, miou) in results.items():
    print(f"{name:22s} mIoU {miou:.4f}  thin post {iou[5]:.3f}")
