"""Seeded synthetic test signals.

Ships a speech-shaped noise generator so the simulation and test suites
need no external speech corpora.  All generators are deterministic for
a given seed.
"""

import numpy as np


def white_noise(n: int, seed: int) -> np.ndarray:
    """Unit-variance Gaussian white noise."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return np.random.default_rng(seed).standard_normal(n)


def speech_shaped_noise(n: int, fs: float, seed: int) -> np.ndarray:
    """Noise with a speech-like long-term spectrum and syllabic amplitude modulation.

    Gaussian noise is shaped in the frequency domain (rising below 500 Hz,
    falling ~6 dB/octave above, rolled off under 90 Hz), then multiplied by
    a slow (~4 Hz) envelope so frame energies fluctuate like running speech.
    Output is normalized to unit RMS.
    """
    if n < 16:
        raise ValueError(f"n must be >= 16, got {n}")
    if fs <= 0:
        raise ValueError(f"fs must be positive, got {fs}")
    rng = np.random.default_rng(seed)

    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    shape = (f / 90.0) ** 2 / (1.0 + (f / 90.0) ** 2)  # high-pass knee ~90 Hz
    shape /= np.sqrt(1.0 + (f / 500.0) ** 2)           # -6 dB/oct above 500 Hz
    x = np.fft.irfft(spec * shape, n)

    # syllabic envelope: rectified slow noise with ~4 control points per second
    m = max(8, int(round(4.0 * n / fs)) + 2)
    slow = np.interp(np.arange(n), np.linspace(0, n - 1, m), rng.standard_normal(m))
    env = 0.35 + 0.65 * np.abs(slow) / max(np.max(np.abs(slow)), 1e-12)
    x = x * env

    rms = np.sqrt(np.mean(x**2))
    return x / max(rms, 1e-12)
