"""Temporal order verification: self-supervised pretext training on video
frame tuples, with motion-biased sampling and transfer evaluation, runnable
at desk scale on a built-in synthetic corpus."""

from .corpus import (
    Frame,
    KeypointSet,
    SynthConfig,
    VideoClip,
    frame_ssd,
    gen_clip,
    gen_corpus,
    load_clip,
    load_manifest,
)
from .model import Backbone, BackboneConfig, ContrastiveConfig, LinearHead, drlim_loss, tempcoh_loss
from .motion import FlowField, MotionConfig, MotionProfile, estimate_flow, frame_motion_weight, motion_profile
from .pipeline import (
    BatchSpec,
    MetricsLog,
    ModelBundle,
    TrainConfig,
    TuplePool,
    eval_classify,
    eval_tuple_accuracy,
    fill_blank,
    finetune,
    nn_retrieve,
    pck,
    pck_curve,
    pretrain,
    receptive_field,
    top_activations,
)
from .sampler import (
    FiveFrameDraw,
    SamplerConfig,
    TupleSample,
    assemble_tuples,
    build_shards,
    draw_five,
    read_shard,
    write_shard,
)
from .tensor import OptimState, Tensor, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
