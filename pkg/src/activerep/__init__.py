"""Active multi-task representation learning for bilinear models."""

import os as _os

# ACTIVEREP_THREADS caps BLAS threads; it must be read before numpy loads.
if _os.environ.get("ACTIVEREP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["ACTIVEREP_THREADS"])

from .model import (
    Dimensions,
    GroundTruthModel,
    TargetSpec,
    TaskSample,
    TaskSpace,
    load_ground_truth,
    make_ground_truth,
    sample_task,
    save_ground_truth,
)
from .oracles import ModelEstimate, TrainConfig, alt_min_representation, joint_erm
from .learner import (
    LearnerConfig,
    StageBudgets,
    run_passive,
    run_target_agnostic,
    run_target_aware,
)

__version__ = "0.1.0"
