"""Apply a designed control filter to microphone signals.

The default mode assumes the primary-signal estimate is perfect (the
acoustic feedback of the loudspeaker into the estimate is exactly
removed), which makes the whole pipeline a feed-forward chain of
convolutions.  ``closed_loop_sim`` additionally models an imperfect
secondary-path estimate, which closes a feedback loop; it is a
diagnostic, not part of the evaluation pipeline.
"""

from dataclasses import dataclass

import numpy as np
import scipy.signal

from ssanc.scene import MicSignals
from ssanc.solver import ControlFilter


@dataclass(frozen=True, eq=False)
class RunResult:
    """Signals produced by one simulation run.

    e_s / e_v are the speech and noise components of the error signal,
    obtained by running the identical linear pipeline on the speech-only
    and noise-only inputs; e is their sum by construction.  t is the
    realized target signal when a target configuration was given.
    """

    y: np.ndarray
    e: np.ndarray
    e_s: np.ndarray
    e_v: np.ndarray
    p_hat: np.ndarray
    t: np.ndarray | None = None


def _delay(x: np.ndarray, d: int) -> np.ndarray:
    if d == 0:
        return x.copy()
    out = np.zeros_like(x)
    out[d:] = x[:-d]
    return out


def realize_target(mics: MicSignals, target_kind: str, delta: int, spatial_ref: int) -> np.ndarray:
    """The target signal for a given configuration: a delayed desired component.

    Spectral weighting applies to the design constraint only; the
    target used for distortion scoring is the plain delayed component.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if target_kind == "error_mic":
        return _delay(mics.p_s, delta)
    if target_kind == "reference_mic":
        if not 0 <= spatial_ref < mics.K:
            raise ValueError(f"spatial_ref {spatial_ref} outside [0, {mics.K})")
        return _delay(mics.x_s[spatial_ref], delta)
    raise ValueError(f"unknown target_kind {target_kind!r}")


def _drive(w: np.ndarray, refs: np.ndarray, primary: np.ndarray, N: int) -> np.ndarray:
    y = np.zeros(N)
    for k in range(refs.shape[0]):
        y += np.convolve(w[k], refs[k])[:N]
    y += np.convolve(w[-1], primary)[:N]
    return y


def apply_control(
    w: ControlFilter,
    mics: MicSignals,
    g,
    target_kind: str | None = None,
    delta: int = 0,
    spatial_ref: int = 0,
) -> RunResult:
    """Feed-forward simulation with a perfect primary-signal estimate.

    y is the loudspeaker drive (control filter applied to the reference
    signals and the primary signal), e = p + g*y the resulting error
    signal.  Passing a target configuration fills in the realized
    target t.
    """
    g = np.asarray(g, dtype=float).ravel()
    if w.K != mics.K:
        raise ValueError(f"filter has {w.K} reference channels, signals have {mics.K}")
    N = mics.N

    y_s = _drive(w.w, mics.x_s, mics.p_s, N)
    y_v = _drive(w.w, mics.x_v, mics.p_v, N)
    e_s = mics.p_s + np.convolve(g, y_s)[:N]
    e_v = mics.p_v + np.convolve(g, y_v)[:N]

    t = None
    if target_kind is not None:
        t = realize_target(mics, target_kind, delta, spatial_ref)
    return RunResult(y=y_s + y_v, e=e_s + e_v, e_s=e_s, e_v=e_v, p_hat=mics.p.copy(), t=t)


def _closed_loop_component(w, refs, primary, g, g_hat, N):
    # y = c + (w_last * (g - g_hat)) * y  with zero instantaneous term,
    # i.e. a pure IIR driven by the feed-forward part c
    c = _drive(w, refs, primary, N)
    d = np.zeros(max(g.shape[0], g_hat.shape[0]))
    d[: g.shape[0]] += g
    d[: g_hat.shape[0]] -= g_hat
    a_full = np.convolve(w[-1], d)
    den = np.concatenate([[1.0], -a_full[1:]])
    y = scipy.signal.lfilter([1.0], den, c)
    e = primary + np.convolve(g, y)[:N]
    p_hat = e - np.convolve(g_hat, y)[:N]
    return y, e, p_hat


def closed_loop_sim(w: ControlFilter, mics: MicSignals, g, g_hat) -> RunResult:
    """Sample-recursive simulation with an estimated secondary path.

    The primary-signal estimate is reconstructed from the error signal
    and g_hat, so an estimation mismatch feeds back into the filter
    input.  Both paths must have one sample of latency (first tap 0),
    otherwise the loop would be delay-free and uncomputable.  With
    g_hat = g this reduces exactly to ``apply_control``.
    """
    g = np.asarray(g, dtype=float).ravel()
    g_hat = np.asarray(g_hat, dtype=float).ravel()
    if g.shape[0] and g[0] != 0.0:
        raise ValueError("secondary path must have >= 1 sample latency (g[0] = 0)")
    if g_hat.shape[0] and g_hat[0] != 0.0:
        raise ValueError("secondary-path estimate must have >= 1 sample latency (g_hat[0] = 0)")
    if w.K != mics.K:
        raise ValueError(f"filter has {w.K} reference channels, signals have {mics.K}")
    N = mics.N

    y_s, e_s, ph_s = _closed_loop_component(w.w, mics.x_s, mics.p_s, g, g_hat, N)
    y_v, e_v, ph_v = _closed_loop_component(w.w, mics.x_v, mics.p_v, g, g_hat, N)
    return RunResult(y=y_s + y_v, e=e_s + e_v, e_s=e_s, e_v=e_v, p_hat=ph_s + ph_v)


def export_run_wavs(result: RunResult, directory, fs: int) -> None:
    """Write y, e, e_s, e_v (and t if present) as float64 WAVs for inspection."""
    from pathlib import Path

    from ssanc import wavio

    directory = Path(directory)
    for name in ("y", "e", "e_s", "e_v"):
        wavio.write_wav(directory / f"{name}.wav", fs, getattr(result, name))
    if result.t is not None:
        wavio.write_wav(directory / "t.wav", fs, result.t)
