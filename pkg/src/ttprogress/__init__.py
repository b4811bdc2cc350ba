"""Test-time-adaptive task progress estimation.

A progress-estimation network whose adaptation sub-module is updated
online by a learned self-supervised reconstruction loss, meta-trained by
differentiating through the adaptation steps, and evaluated by rank
correlation against chronological frame order.
"""

from .adaptation import AdaptConfig, AdaptState, inner_update, run_ttt
from .autodiff import Tensor, finite_diff_grad, gelu, grad, no_grad, tensor
from .data import (BadMagicError, DataFormatError, DimensionError, SynthSpec,
                   TrajectoryRecord, TruncationError, load_container,
                   read_manifest, save_container, synth_generate,
                   write_manifest)
from .evaluation import (ClipFtModel, EvalReport, clip_similarity, evaluate,
                         render_report, spearman_voc, train_clipft,
                         vlmrm_projection)
from .estimators import (ClipFtEstimator, ClipSimilarityEstimator,
                         TTTProgressEstimator, VlmRmEstimator)
from .model import (AdaptParams, HeadParams, MetaParams, ProjectionSet,
                    f_adapt, fuse, init_meta_params, load_checkpoint,
                    pred_loss, predict, save_checkpoint, self_loss)
from .training import (NumericalError, TrainConfig, Window, adamw_step,
                       candidate_windows, cosine_lr, select_diverse, train,
                       window_loss)

__version__ = "0.1.0"
