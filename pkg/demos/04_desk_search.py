"""Search, stack and train end to end on synthetic stripe textures.

Horizontal stripes are benign, vertical ones malignant. Rotation would swap the
two classes, so augmentation stays off here. Takes well under a minute.

Run: python3 demos/04_desk_search.py
"""

import logging

import torch

from enas_us import build_network, make_stack_plan
from enas_us.datapipe import stratified_folds, synthetic_stripes
from enas_us.trainer import (
    SearchConfig, TrainConfig, evaluate, fold_split, search, search_split, to_tensors, train_from_scratch,
)

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.set_num_threads(1)

images = synthetic_stripes(200, 16, seed=0)
folds = stratified_folds(images, k=5, seed=0)

scfg = SearchConfig(controller_epochs=5, candidates_per_epoch=2, B=3, base_channels=8)
train, val = search_split(images, folds, 0, scfg, augment=False)
result, _ = search(to_tensors(train), to_tensors(val), scfg)
print("best candidate", result.best.to_dict(), "val acc", result.best_accuracy)

tcfg = TrainConfig(epochs=10, base_channels=8, augment=False)
train, test = fold_split(images, folds, 0, augment=False)
trained = train_from_scratch(build_network(result.best, make_stack_plan("ENAS7", 8)), to_tensors(train), tcfg)
print("held-out fold 0:", evaluate(trained.model, test))
