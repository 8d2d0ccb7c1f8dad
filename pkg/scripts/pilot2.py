"""Second pilot: random-init joint arms, regime trend arms, context sweep."""

import copy
import sys
import time

import torch

from contextshot.datasets import split_classes
from contextshot.encoders import EncoderConfig, build_encoder
from contextshot.evaluation import IclPredictor, KnnPredictor, evaluate, precompute_embeddings
from contextshot.icl import IclModel, IclModelConfig
from contextshot.pretraining import PretrainConfig, pretrain_encoder
from contextshot.shapes import ShapesSpec, generate_shapes
from contextshot.training import RegimeConfig, ScheduleParams, TrainConfig, train_icl

torch.set_num_threads(2)

t0 = time.time()


def log(msg):
    print(f"[{time.time()-t0:7.1f}s] {msg}", flush=True)


corpus = generate_shapes(ShapesSpec(n_classes=30, per_class=200, image_size=(64, 64)), seed=7001)
train_set, holdout = split_classes(corpus, holdout_classes=10, seed=7001)
log("corpus ready")

ICL_CFG = IclModelConfig(n_max=10, embed_dim=64, heads=8, layers=4, feedforward_dim=256, dropout=0.1)
ENC_CFG = EncoderConfig(kind="residual_cnn", input_size=(64, 64), embed_dim=64)


def schedule(epochs, lr_max=3e-4, warmup=5, plateau=1):
    return ScheduleParams(lr_max=lr_max, lr_min=1e-5, warmup_epochs=warmup, plateau_epochs=plateau,
                          decay_epochs=max(1, epochs - warmup - plateau))


def run(tag, encoder, regime, epochs, samples, seed=7001, warmup=5):
    model = IclModel(ICL_CFG, init_seed=seed)
    config = TrainConfig(epochs=epochs, samples_per_epoch=samples, batch_size=8, n=5, k=5, n_max=10,
                         schedule=schedule(epochs, warmup=warmup), regime=regime, seed=seed,
                         val_every=5, val_episodes=100)
    _, hist = train_icl(model, encoder, train_set, config, val_set=holdout)
    vals = [f"{h['epoch']}:{h['val_acc']:.2f}" for h in hist if h["val_acc"] is not None]
    table = precompute_embeddings(encoder, holdout)
    rep = evaluate(IclPredictor(model, encoder, embedding_table=table), holdout,
                   n=5, k=5, tasks=1000, n_max=10, seed=42)
    log(f"{tag}: holdout {rep.formatted()}  val trace: {' '.join(vals)}")
    return model, encoder, rep


mode = sys.argv[1] if len(sys.argv) > 1 else "all"

if mode in ("all", "joint"):
    # A: random init, joint, constant LRs at the floor
    enc = build_encoder(ENC_CFG, init_seed=7002)
    regime = RegimeConfig(encoder_pretrained=False, encoder_mode="joint",
                          encoder_lr_mode="constant", body_lr_mode="constant", encoder_constant_lr=1e-5)
    run("rand-joint [c,c,0] 15ep", enc, regime, epochs=15, samples=1000)

    # B: random init, joint, full schedule on both groups
    enc = build_encoder(ENC_CFG, init_seed=7002)
    regime = RegimeConfig(encoder_pretrained=False, encoder_mode="joint", encoder_lr_mode="scheduled")
    run("rand-joint [s,s,0] 15ep", enc, regime, epochs=15, samples=1000)

if mode in ("all", "trend"):
    pre = build_encoder(ENC_CFG, init_seed=7001)
    pre, _ = pretrain_encoder(train_set, pre, PretrainConfig(epochs=30, seed=7001, augment=None))
    log("pretrained encoder ready")

    for name, regime in [
        ("frozen", RegimeConfig(encoder_pretrained=True, encoder_mode="frozen")),
        ("delayed", RegimeConfig(encoder_pretrained=True, encoder_mode="delayed",
                                 unfreeze_epoch=4, encoder_lr_mode="scheduled")),
        ("joint", RegimeConfig(encoder_pretrained=True, encoder_mode="joint", encoder_lr_mode="scheduled")),
    ]:
        enc = copy.deepcopy(pre)
        run(f"trend-{name} 16ep", enc, regime, epochs=16, samples=400, seed=7003, warmup=2)

    # context sweep proxy on a quick frozen model
    enc = copy.deepcopy(pre)
    model, enc, _ = run("sweep-frozen 12ep", enc,
                        RegimeConfig(encoder_pretrained=True, encoder_mode="frozen"),
                        epochs=12, samples=1000)
    table = precompute_embeddings(enc, holdout)
    for k in (1, 5, 10):
        rep = evaluate(IclPredictor(model, enc, embedding_table=table), holdout,
                       n=5, k=k, tasks=500, n_max=10, seed=55 + k)
        log(f"  k={k}: {rep.formatted()}")
    knn = evaluate(KnnPredictor(enc, 5, embedding_table=table), holdout,
                   n=5, k=5, tasks=500, n_max=10, seed=77)
    log(f"  knn k=5 baseline: {knn.formatted()}")
