"""Few-shot image classification by in-context learning.

Labeled support images and a query are encoded into a token sequence and
processed by an asymmetrically masked transformer that predicts the query's
label slot without any gradient-based adaptation at inference. The package
covers encoder pretraining (with an optional triplet objective), episodic
training under frozen / delayed / joint encoder regimes, and an n-way
k-shot evaluation harness with a KNN baseline.
"""

from .datasets import AugmentParams, LabeledImageSet, load_image_folder, preprocess, split_classes
from .encoders import EncoderConfig, ResidualSpec, VitSpec, build_encoder, encode
from .episodes import Episode, EpisodeBatch, batch_episodes, one_hot, sample_episode
from .evaluation import AccuracyReport, SweepTable, context_sweep, evaluate, knn_predict, mean_and_se
from .icl import IclModel, IclModelConfig, attention_mask, icl_forward, predict
from .pretraining import (
    PretrainConfig,
    TripletParams,
    combined_loss,
    cross_entropy_smoothed,
    mine_triplets,
    pretrain_encoder,
    triplet_loss,
)
from .shapes import ShapesSpec, generate_shapes
from .training import (
    RegimeConfig,
    ScheduleParams,
    TrainConfig,
    format_regime,
    regime_lrs,
    scheduled_lr,
    train_icl,
)

__version__ = "0.1.0"
