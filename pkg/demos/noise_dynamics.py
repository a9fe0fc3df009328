"""How the normalized loss features separate clean from mislabeled samples.

Records per-sample features during meta-training and prints the mean class
normalized loss (CNL) and prediction entropy for clean and flipped samples at
a few epochs.

    python demos/noise_dynamics.py
"""

from collections import defaultdict

import numpy as np

from tmlc import MetaConfig
from tmlc.datagen import NoiseSpec, gen_blobs, inject_noise, split_support_query
from tmlc.metaloop import meta_train
from tmlc.training import TrainConfig


def main():
    ds = inject_noise(gen_blobs(3, 500, 2, 0.5, seed=1), NoiseSpec("symmetric", 0.4, seed=2))
    cfg = TrainConfig(hidden=(32,), epochs=30, batch_size=64, seed=1, shuffle_seed=1)
    meta = MetaConfig(mode="agnostic", meta_supervision="clean_meta", outer_lr=5e-3, seed=1)
    result = meta_train(ds, split_support_query(ds, 0.1, 1), cfg, meta, record_dynamics=True)

    by_epoch = defaultdict(lambda: defaultdict(list))
    for rec in result.dynamics:
        group = "clean" if rec["noisy_label"] == rec["true_label"] else "flipped"
        by_epoch[rec["epoch"]][group].append((rec["cnl"], rec["pe"]))
    print("epoch  CNL clean  CNL flipped  PE clean  PE flipped")
    for t in (1, 5, 10, 20, 30):
        clean, flipped = (np.mean(by_epoch[t][g], axis=0) for g in ("clean", "flipped"))
        print(f"{t:5d}  {clean[0]:9.3f}  {flipped[0]:11.3f}  {clean[1]:8.3f}  {flipped[1]:10.3f}")


if __name__ == "__main__":
    main()
