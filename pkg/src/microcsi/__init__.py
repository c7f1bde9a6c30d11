"""Micro-CSI radiometric fingerprinting: simulation, extraction, KNN authentication and evaluation."""

__version__ = "0.1.0"

from .channel import (
    ChannelRealization,
    CsiMeasurement,
    DeviceProfile,
    NoiseModel,
    draw_channel,
    make_device_profile,
    simulate_session,
    synthesize_measurement,
)
from .errors import ConfigError, ExtractionError, FormatError, MicroCsiError, UnknownIdentityError
from .evaluation import OperatingPoint, ScoreSet, SimulationSettings, adr_at_far, roc_curve, run_rotation, stability_report
from .extraction import AveragedCsi, Fingerprint, average_measurements, estimate_channel, extract_fingerprint
from .matcher import AuthDecision, FingerprintLibrary, MatcherParams, authenticate, enroll, knn_distance
from .signal import PartialDft, SignalConfig, build_config, partial_dft, project_onto_taps

__all__ = [
    "AuthDecision",
    "AveragedCsi",
    "ChannelRealization",
    "ConfigError",
    "CsiMeasurement",
    "DeviceProfile",
    "ExtractionError",
    "Fingerprint",
    "FingerprintLibrary",
    "FormatError",
    "MatcherParams",
    "MicroCsiError",
    "NoiseModel",
    "OperatingPoint",
    "PartialDft",
    "ScoreSet",
    "SignalConfig",
    "SimulationSettings",
    "UnknownIdentityError",
    "adr_at_far",
    "authenticate",
    "average_measurements",
    "build_config",
    "draw_channel",
    "enroll",
    "estimate_channel",
    "extract_fingerprint",
    "knn_distance",
    "make_device_profile",
    "partial_dft",
    "project_onto_taps",
    "roc_curve",
    "run_rotation",
    "simulate_session",
    "stability_report",
    "synthesize_measurement",
]
