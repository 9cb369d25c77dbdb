"""Spatially selective active-noise-control design and simulation toolkit.

Designs multichannel FIR control filters that cancel noise from unwanted
directions while preserving a desired source, simulates the resulting
system on synthetic or measured impulse responses, and sweeps the
target-signal delay to map the noise-reduction / distortion / effort
trade-off.
"""

from ssanc.convmat import (
    ConvMatrix,
    StackedVector,
    block_diag_secondary,
    build_conv_matrix,
    build_q,
    unit_pulse,
)
from ssanc.scene import MicSignals, Scene, load_scene_wav, render_mics, synth_scene
from ssanc.reir import ReIRSet, design_min_phase_highpass, estimate_reirs
from ssanc.solver import (
    Constraint,
    ControlFilter,
    DesignParams,
    DesignResult,
    build_constraint,
    design_control_filter,
    estimate_autocorrelation,
    kkt_oracle,
    largest_eigenvalue,
)
from ssanc.simulate import RunResult, apply_control, closed_loop_sim, realize_target
from ssanc.metrics import (
    MetricBundle,
    control_effort,
    evaluate_run,
    noise_reduction,
    quality_proxy,
    speech_distortion_index,
)
from ssanc.sweep import SweepConfig, SweepRow, cli_main, run_sweep

__version__ = "0.1.0"

__all__ = [
    "ConvMatrix",
    "StackedVector",
    "build_conv_matrix",
    "block_diag_secondary",
    "unit_pulse",
    "build_q",
    "Scene",
    "MicSignals",
    "synth_scene",
    "load_scene_wav",
    "render_mics",
    "ReIRSet",
    "estimate_reirs",
    "design_min_phase_highpass",
    "Constraint",
    "ControlFilter",
    "DesignParams",
    "DesignResult",
    "estimate_autocorrelation",
    "build_constraint",
    "largest_eigenvalue",
    "design_control_filter",
    "kkt_oracle",
    "RunResult",
    "apply_control",
    "closed_loop_sim",
    "realize_target",
    "MetricBundle",
    "noise_reduction",
    "speech_distortion_index",
    "control_effort",
    "quality_proxy",
    "evaluate_run",
    "SweepConfig",
    "SweepRow",
    "run_sweep",
    "cli_main",
]
