# Train the full model on the default synthetic set and score the unknown splits.
# The default schedule takes well under a minute on a laptop CPU.
from fineosr import evaluation, experiment, synthdata, trainer

data = synthdata.make_openset_data(synthdata.DataConfig(seed=0))
cfg = trainer.TrainConfig(seed=0)

res = experiment.run(cfg, data)
print(evaluation.metrics_text(res.metrics))

recon = res.log.column("recon")
print(f"recon first generative epoch {recon[cfg.T_gen]:.3f}, last {recon[-1]:.3f}")

with open("hist_max_joint_energy.svg", "w") as fh:
    fh.write(evaluation.score_histogram_svg(res.report))
