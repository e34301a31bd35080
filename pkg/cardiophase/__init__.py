"""cardiophase: self-supervised detection of five cardiac key frames in 4D cine sequences.

The pipeline registers every pair of consecutive frames, reduces the displacement fields to a
per-frame descriptor (radial direction ``alpha_t`` and magnitude ``|v|_t`` about a focus point)
and derives end-diastole (ED), mid-systole (MS), end-systole (ES), peak flow (PF) and
mid-diastole (MD) from it with a fixed set of cyclic rules.
"""

__version__ = "0.1.0"

from .descriptor import (
    FocusPoint,
    MotionDescriptor,
    angle_field,
    compute_descriptor,
    magnitude_mask,
    reduce_descriptor,
    select_focus,
    smooth_normalize,
)
from .errors import (
    CardiophaseError,
    ConfigError,
    DegenerateInputError,
    PhaseRuleError,
    RegistrationError,
    VolumeFormatError,
)
from .evalqc import PhaseEval, QcVerdict, detect_cutoff, evaluate_phases, pfd, summarize_cohort
from .imgvol import PreprocessReport, Volume4D, load_volume4d, preprocess, save_volume4d
from .phantom import PhantomConfig, PhantomTruth, generate_phantom
from .phases import PhaseSet, extract_phases, zero_crossings
from .register import RegistrationConfig, VectorField3D, register_pair, register_sequence, warp

__all__ = [
    "__version__",
    "CardiophaseError",
    "ConfigError",
    "DegenerateInputError",
    "FocusPoint",
    "MotionDescriptor",
    "PhantomConfig",
    "PhantomTruth",
    "PhaseEval",
    "PhaseRuleError",
    "PhaseSet",
    "PreprocessReport",
    "QcVerdict",
    "RegistrationConfig",
    "RegistrationError",
    "VectorField3D",
    "Volume4D",
    "VolumeFormatError",
    "angle_field",
    "compute_descriptor",
    "detect_cutoff",
    "evaluate_phases",
    "extract_phases",
    "generate_phantom",
    "load_volume4d",
    "magnitude_mask",
    "pfd",
    "preprocess",
    "reduce_descriptor",
    "register_pair",
    "register_sequence",
    "save_volume4d",
    "select_focus",
    "smooth_normalize",
    "summarize_cohort",
    "warp",
    "zero_crossings",
]
