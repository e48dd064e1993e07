# Synthetic fine-grained open-set data: classes are attribute vectors pushed
# through a fixed linear embedding plus noise.  Unknown classes are ranked by
# how many attributes they share with the known ones.
import numpy as np

from fineosr import synthdata

cfg = synthdata.DataConfig(seed=0)
data = synthdata.make_openset_data(cfg)

print("train", data.train.x.shape, "known test", data.known_test.x.shape)
for split in ("easy", "medium", "hard"):
    print(f"{split:<7}", data.unknown[split].x.shape)

# nearest-known attribute similarity per unknown split: harder means closer
for split in ("easy", "medium", "hard"):
    cls = getattr(data.split, split)
    sims = [data.split.similarity[c] for c in cls]
    print(f"{split:<7} classes {cls}  mean max-cosine to known {np.mean(sims):.3f}")

print("attribute matrix of the known classes:")
print(data.bank.attrs[data.split.known])
