"""crgx: Shapley attribution, CAM-family heatmaps, and faithfulness metrics
for small models, built on an in-package reverse-mode autodiff engine."""

from .cam import (
    CAM_METHODS,
    CamMethod,
    Heatmap,
    classify_crg,
    explain,
    rest_decomposition,
    shapley_weights,
    theorem3_ensemble,
)
from .game import (
    CooperativeGame,
    ShapleyVector,
    axiom_suite,
    make_spatial_game,
    shapley_exact,
    shapley_first_order,
    shapley_mc,
    shapley_second_order,
)
from .imgio import Image, read_image, write_image
from .metrics import (
    MetricRecord,
    adcc,
    average_drop,
    average_drop_deletion,
    coherency,
    complexity,
    evaluate_batch,
    increase_confidence,
)
from .postprocess import (
    OverlayStyle,
    apply_colormap,
    normalize_minmax,
    overlay,
    upsample_bilinear,
)
from .suites import hvp_suite, shapley_suite, theorem_suite
from .utility import UTILITY_KINDS, UtilitySpec, compute_utility
from .zoo import ARCHS, ToyModel, WeightManifest, build_model

__version__ = "0.1.0"

__all__ = [
    "ARCHS",
    "CAM_METHODS",
    "CamMethod",
    "CooperativeGame",
    "Heatmap",
    "Image",
    "MetricRecord",
    "OverlayStyle",
    "ShapleyVector",
    "ToyModel",
    "UTILITY_KINDS",
    "UtilitySpec",
    "WeightManifest",
    "adcc",
    "apply_colormap",
    "average_drop",
    "average_drop_deletion",
    "axiom_suite",
    "build_model",
    "classify_crg",
    "coherency",
    "complexity",
    "compute_utility",
    "evaluate_batch",
    "explain",
    "hvp_suite",
    "increase_confidence",
    "make_spatial_game",
    "normalize_minmax",
    "overlay",
    "read_image",
    "rest_decomposition",
    "shapley_exact",
    "shapley_first_order",
    "shapley_mc",
    "shapley_second_order",
    "shapley_suite",
    "shapley_weights",
    "theorem3_ensemble",
    "theorem_suite",
    "upsample_bilinear",
    "write_image",
]
