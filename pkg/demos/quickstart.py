"""Meta-train a corrector on noisy blobs, then reuse it on a new task.

    python demos/quickstart.py
"""

import numpy as np

from tmlc import MetaConfig, run_ce
from tmlc.basemodel import predict
from tmlc.datagen import NoiseSpec, gen_blobs, inject_noise, split_support_query
from tmlc.metaloop import meta_test, meta_train
from tmlc.training import TrainConfig


def test_accuracy(model, test):
    return float(np.mean(predict(model, test.features) == test.true_labels))


def main(seed: int = 0):
    source = inject_noise(gen_blobs(3, 1000, 2, 0.5, seed=seed), NoiseSpec("symmetric", 0.4, seed=100 + seed))
    test = gen_blobs(3, 1000, 2, 0.5, seed=1000 + seed)
    cfg = TrainConfig(hidden=(32,), epochs=60, batch_size=64, seed=seed, shuffle_seed=seed)
    meta = MetaConfig(mode="agnostic", meta_supervision="clean_meta", outer_lr=5e-3, seed=seed)

    result = meta_train(source, split_support_query(source, 0.1, seed), cfg, meta, test_set=test)
    print(f"source noisy-label accuracy   {source.noisy_accuracy():.4f}")
    print(f"corrected-label accuracy      {result.log.last('corrected_label_acc'):.4f}")
    print(f"TMLC test accuracy            {test_accuracy(result.model, test):.4f}")
    print(f"CE test accuracy              {test_accuracy(run_ce(source, cfg).model, test):.4f}")

    # frozen snapshots on a fresh task with a different noise rate
    target = inject_noise(gen_blobs(3, 1000, 2, 0.5, seed=500 + seed), NoiseSpec("symmetric", 0.2, seed=600 + seed))
    transferred = meta_test(target, cfg, result.snapshots, test_set=test)
    print(f"snapshots used at epochs      {sorted(set(transferred.snapshot_schedule))}")
    print(f"transfer test accuracy        {test_accuracy(transferred.model, test):.4f}")
    print(f"CE on target test accuracy    {test_accuracy(run_ce(target, cfg).model, test):.4f}")


if __name__ == "__main__":
    main()
