"""Differentiable 2D alignment toolkit.

A numpy library implementing parameterized image warps (similarity,
affine, projective) with exact analytic gradients, bilinear sampling
with its backward pass, small localization/recognition networks, and an
end-to-end training loop that learns alignment from identity labels
alone. Includes a synthetic glyph dataset generator, a verification
evaluation harness, landmark relocation, and finite-difference checking
of every gradient path.
"""

__version__ = "0.1.0"

from .exceptions import (
    DegenerateTransformError,
    NonFiniteError,
    ShapeError,
    TrainingDiverged,
)
from .tensor import (
    LayerSpec,
    LossBundle,
    center_loss,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    prelu_backward,
    prelu_forward,
    softmax_xent,
)
from .transforms import (
    AffineParams,
    IdentityParams,
    ParamGrad,
    ProjectiveParams,
    SamplingGrid,
    SimilarityParams,
    apply_point,
    generate_grid,
    identity_params,
    invert,
    param_jacobian,
    parse_record,
    promote,
    to_record,
)
from .sampler import bilinear_backward, bilinear_sample, kernel_subgradient
from .networks import (
    LocNetSpec,
    PipelineSpec,
    RecNetSpec,
    build_locnet,
    build_pipeline,
    backward_pipeline,
    center_resample,
    extract_embedding,
    forward_pipeline,
)
from .synthdata import (
    DatasetSplit,
    Observation,
    PerturbationRanges,
    augment_flip,
    generate_dataset,
    standard_split,
)
from .training import (
    TrainConfig,
    TrainRun,
    VerificationReport,
    compare_transform_kinds,
    evaluate_verification,
    locnet_regression_sweep,
    lr_schedule,
    train,
)
from .landmarks import CedCurve, LandmarkSet, ced_curve, relocate
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
