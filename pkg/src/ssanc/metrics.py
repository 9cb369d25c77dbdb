"""Evaluation metrics: noise reduction, speech distortion, control effort, quality proxy.

The quality proxy is a frame-wise log-spectral distance, standing in
for standardized perceptual scores (which need the ITU reference
implementation and are out of scope here).  Its values are NOT
comparable to MOS scales; lower is better, 0 dB means identical
spectra.
"""

from dataclasses import dataclass, field

import numpy as np

from ssanc.scene import MicSignals
from ssanc.simulate import RunResult

SDI_FLOOR_DB = -120.0


@dataclass(frozen=True)
class MetricBundle:
    """One configuration's metrics; ``flags`` records any clamped/degenerate values."""

    nr_db: float
    sdi_db: float
    effort: float
    quality_db: float
    snr_in_db: float
    snr_out_db: float
    flags: tuple[str, ...] = field(default_factory=tuple)


def noise_reduction(p_v, e_v) -> float:
    """Energy ratio of the noise component before/after control, in dB."""
    p_v = np.asarray(p_v, dtype=float)
    e_v = np.asarray(e_v, dtype=float)
    if p_v.shape != e_v.shape:
        raise ValueError("p_v and e_v must have equal length")
    num = float(np.sum(p_v**2))
    den = float(np.sum(e_v**2))
    if den <= 0.0:
        return float("inf")
    return 10.0 * np.log10(num / den)


def speech_distortion_index(t, e_s) -> float:
    """Residual energy of (target - achieved speech) relative to the target, in dB.

    Clamped at -120 dB so an exact match stays numeric.
    """
    t = np.asarray(t, dtype=float)
    e_s = np.asarray(e_s, dtype=float)
    if t.shape != e_s.shape:
        raise ValueError("t and e_s must have equal length")
    denom = float(np.sum(t**2))
    if denom <= 0.0:
        raise ValueError("target signal has zero energy")
    num = float(np.sum((t - e_s) ** 2))
    if num <= 0.0:
        return SDI_FLOOR_DB
    return max(10.0 * np.log10(num / denom), SDI_FLOOR_DB)


def control_effort(y) -> float:
    """Total energy of the loudspeaker drive signal."""
    y = np.asarray(y, dtype=float)
    return float(np.sum(y**2))


def quality_proxy(t, u, frame: int = 512, hop: int = 256) -> float:
    """Mean log-spectral distance between reference t and signal u, in dB.

    Frames of t whose energy is within 40 dB of the loudest frame count
    as voiced; per voiced frame the RMS difference of the log-magnitude
    spectra is taken and the frame values are averaged.  Bins are
    floored relative to the frame's spectral peak so near-zero bins do
    not dominate.
    """
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    if t.shape != u.shape:
        raise ValueError("t and u must have equal length")
    if frame < 8 or hop < 1:
        raise ValueError("need frame >= 8 and hop >= 1")
    if t.shape[0] < frame:
        raise ValueError(f"signal length {t.shape[0]} shorter than one frame ({frame})")

    window = np.hanning(frame)
    starts = range(0, t.shape[0] - frame + 1, hop)
    energies = np.array([float(np.sum(t[s : s + frame] ** 2)) for s in starts])
    peak = float(np.max(energies))
    if peak <= 0.0:
        raise ValueError("all-silent reference signal")
    voiced = energies >= peak * 1e-4  # 40 dB below the loudest frame

    dists = []
    for s, keep in zip(starts, voiced):
        if not keep:
            continue
        T = np.abs(np.fft.rfft(window * t[s : s + frame]))
        U = np.abs(np.fft.rfft(window * u[s : s + frame]))
        floor = max(float(np.max(T)), 1e-300) * 1e-7
        d = 20.0 * np.log10(np.maximum(U, floor) / np.maximum(T, floor))
        dists.append(float(np.sqrt(np.mean(d**2))))
    return float(np.mean(dists))


def evaluate_run(result: RunResult, mics: MicSignals, frame: int = 512, hop: int = 256) -> MetricBundle:
    """Full metric bundle for one simulation run against its input signals."""
    if result.t is None:
        raise ValueError("run result carries no target signal; simulate with a target configuration")
    flags = []

    nr = noise_reduction(mics.p_v, result.e_v)
    if not np.isfinite(nr):
        flags.append("nr_infinite")
    sdi = speech_distortion_index(result.t, result.e_s)
    if sdi <= SDI_FLOOR_DB:
        flags.append("sdi_clamped")
    quality = quality_proxy(result.t, result.e, frame=frame, hop=hop)

    def ratio_db(num, den):
        n = float(np.sum(np.asarray(num) ** 2))
        d = float(np.sum(np.asarray(den) ** 2))
        if d <= 0.0 or n <= 0.0:
            return float("inf") if d <= 0.0 else float("-inf")
        return 10.0 * np.log10(n / d)

    snr_in = ratio_db(mics.p_s, mics.p_v)
    snr_out = ratio_db(result.e_s, result.e_v)
    if not (np.isfinite(snr_in) and np.isfinite(snr_out)):
        flags.append("snr_infinite")

    return MetricBundle(
        nr_db=nr,
        sdi_db=sdi,
        effort=control_effort(result.y),
        quality_db=quality,
        snr_in_db=snr_in,
        snr_out_db=snr_out,
        flags=tuple(flags),
    )
