"""Desk-scale simulator and calibration harness for flux-tunable-coupler
transmon devices with planar and vertical couplers."""

__version__ = "0.1.0"

from .device import (
    CouplingSpec,
    DeviceSpec,
    FluxBias,
    ModeSpec,
    Placement,
    bias_for_frequencies,
    coupler_frequency,
    flux_for_frequency,
    load_device,
    mode_frequency,
    save_device,
)
from .errors import (
    CalibrationError,
    ConfigError,
    ConvergenceError,
    CouplerLabError,
    LabelingAmbiguityError,
    NoSignChangeError,
    PhysicsDiagnostic,
    UnreachableTargetError,
)
from .hilbert import (
    LabeledSpectrum,
    ModeSubset,
    build_hamiltonian,
    eigensystem,
    labeled_spectrum,
    subset_for,
)
from .presets import stack8
from .statics import (
    SpectrumCurve,
    ZZZeroResult,
    coupler_spectrum_scan,
    effective_coupling,
    find_zz_zero,
    flux_for_effective_coupling,
    zz_shift,
)
