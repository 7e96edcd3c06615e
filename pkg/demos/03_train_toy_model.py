# coding: utf-8

# # Training a toy model on synthetic imbalanced rain
#
# Generates a small dataset with the Korea class balance, trains the toy
# Swin-Unet with channel attention and both heads, then evaluates the best
# checkpoint. Takes about a minute on one CPU core.

# In[1]:

import tempfile
from pathlib import Path

from postrain import dataio, trainer
from postrain.config import toy
from postrain.verification import format_report

work = Path(tempfile.mkdtemp())


# Twenty-four 32x32 samples with 8 variables each.

# In[2]:

spec = dataio.SyntheticSpec(grid_shape=(1, 8, 32, 32), n_samples={"train": 16, "val": 4, "test": 4}, seed=0)
summary = dataio.generate_synthetic(spec, work / "data")
print([round(100 * p, 2) for p in summary["proportions"]])


# The toy configuration: batch 2, lr 1e-3, class weights (1, 5, 30) and
# alpha 100 on a log1p rain-rate target.

# In[3]:

cfg = toy(str(work / "data"), epochs=15)
print(cfg.to_json())


# In[4]:

record, = trainer.train(cfg, work / "runs")
print("best epoch", record.best_epoch)
print(format_report(record.test, "test"))


# The run directory holds the config, step losses, per-epoch validation
# metrics, the best checkpoint and the test metrics.

# In[5]:

print(sorted(p.name for p in record.run_dir.iterdir()))
print(trainer.evaluate_checkpoint(record.checkpoint).to_json() == record.test.to_json())
