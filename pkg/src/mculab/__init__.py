"""mculab: a desk-scale laboratory for mode connectivity in unlearning."""

__version__ = "0.1.0"

from .curves import CurveSpec, curve_point, init_midpoint, sample_curve, train_midpoint  # noqa: E402
from .data import SplitDataset, corrupt_labels, load_idx, make_blobs, make_moons, split_forget_retain  # noqa: E402
from .mcu_eval import (  # noqa: E402
    BarrierReport,
    MetricRecord,
    barrier_profile,
    evaluate_point,
    forget_quality,
    ks_two_sample,
    mc_barrier_standard,
    zrf_score,
)
from .nn import Arch, MlpModel, ParamVector  # noqa: E402
from .unlearn import METHODS, UnlearnConfig, UnlearnResult, retrain_oracle, unlearn  # noqa: E402
