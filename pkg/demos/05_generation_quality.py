# Samples decoded from the learned prior sit closer to the data than samples
# decoded from plain Gaussian noise, as measured by the Frechet feature distance.
import dataclasses

from fineosr import evaluation, experiment, synthdata, trainer
from fineosr.numkit import Rng

data = synthdata.make_openset_data(synthdata.DataConfig(seed=1))
cfg = dataclasses.replace(trainer.TrainConfig(seed=1), T=30, T_gen=10, T_uvos=10, restart_epochs=[15, 25])
model = experiment.run(cfg, data).checkpoint.model

rng = Rng(1)
for mode in ("random", "prior"):
    x = evaluation.generate(model, mode, 1000, rng.child(mode), sgld=cfg.sgld_config())
    print(f"FFD({mode:<6}, real) = {evaluation.frechet_feature_distance(data.train.x, x):.3f}")
x = evaluation.generate(model, "posterior", len(data.train.x), rng.child("post"), x_opt=data.train.x)
print(f"FFD(posterior, real) = {evaluation.frechet_feature_distance(data.train.x, x):.3f}")
