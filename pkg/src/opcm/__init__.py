"""Training-free continual model merging by orthogonal projection and adaptive scaling."""

from .baselines import TiesConfig, ties_combine, ties_select
from .estimators import (
    OPCMerger,
    SWAMerger,
    TaskArithmeticMerger,
    TiesMerger,
    make_merger,
)
from .eval import AccuracyMatrix, avg_accuracy, backward_transfer, cosine_similarity_matrix
from .linalg import ProjectionSpec, full_svd, project_alpha, rank_alpha
from .merge import MergeConfig, ScalingMode, closed_form_merge, init_state, merge_step
from .tensorstore import (
    Checkpoint,
    ParamKind,
    TaskVector,
    classify_params,
    global_norm,
    load_checkpoint,
    save_checkpoint,
    task_vector,
)

__version__ = "0.1.0"
