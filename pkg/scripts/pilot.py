"""Desk-scale pilot: pretrain, frozen ICL training, holdout evaluation.

Calibrates the default learning rate and sanity-checks the acceptance
corpus before the full acceptance suite is pinned.
"""

import sys
import time

import torch

from contextshot.datasets import split_classes
from contextshot.encoders import EncoderConfig, build_encoder
from contextshot.evaluation import IclPredictor, evaluate, precompute_embeddings
from contextshot.icl import IclModel, IclModelConfig
from contextshot.pretraining import PretrainConfig, pretrain_encoder
from contextshot.shapes import ShapesSpec, generate_shapes
from contextshot.training import RegimeConfig, ScheduleParams, TrainConfig, train_icl

torch.set_num_threads(2)

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 20
LR_MAX = float(sys.argv[2]) if len(sys.argv) > 2 else 3e-4
PRETRAIN_EPOCHS = int(sys.argv[3]) if len(sys.argv) > 3 else 30

t0 = time.time()
corpus = generate_shapes(ShapesSpec(n_classes=30, per_class=200, image_size=(64, 64)), seed=7001)
print(f"[{time.time()-t0:7.1f}s] corpus: {corpus.n_items} images")

train_set, holdout = split_classes(corpus, holdout_classes=10, seed=7001)
print(f"[{time.time()-t0:7.1f}s] split: {train_set.n_classes} train / {holdout.n_classes} holdout classes")

encoder = build_encoder(EncoderConfig(kind="residual_cnn", input_size=(64, 64), embed_dim=64), init_seed=7001)
cfg = PretrainConfig(epochs=PRETRAIN_EPOCHS, classes_per_batch=8, samples_per_class=4,
                     learning_rate=1e-3, augment=None, seed=7001)
encoder, hist = pretrain_encoder(train_set, encoder, cfg)
print(f"[{time.time()-t0:7.1f}s] pretrain: val_top1 by epoch: "
      + " ".join(f"{h['val_top1']:.3f}" for h in hist[::max(1, len(hist)//10)]))
print(f"          final val_top1 = {hist[-1]['val_top1']:.4f}")

model = IclModel(IclModelConfig(n_max=10, embed_dim=64, heads=8, layers=4, feedforward_dim=256,
                                dropout=0.1), init_seed=7001)
schedule = ScheduleParams(lr_max=LR_MAX, lr_min=1e-5, warmup_epochs=5, plateau_epochs=1,
                          decay_epochs=max(1, EPOCHS - 6))
config = TrainConfig(epochs=EPOCHS, samples_per_epoch=1000, batch_size=8, n=5, k=5, n_max=10,
                     schedule=schedule, regime=RegimeConfig(encoder_mode="frozen"),
                     seed=7001, val_every=2, val_episodes=100)
_, history = train_icl(model, encoder, train_set, config, val_set=holdout)
for h in history:
    if h["val_acc"] is not None:
        print(f"          epoch {h['epoch']:3d} loss {h['train_loss']:.4f} val {h['val_acc']:.3f}")
print(f"[{time.time()-t0:7.1f}s] ICL training done")

table = precompute_embeddings(encoder, holdout)
report = evaluate(IclPredictor(model, encoder, embedding_table=table), holdout,
                  n=5, k=5, tasks=1000, n_max=10, seed=99)
print(f"[{time.time()-t0:7.1f}s] holdout 5-way 5-shot over {report.tasks} tasks: {report.formatted()}")
