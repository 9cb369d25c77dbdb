"""Acoustic scenes: impulse responses, secondary path, microphone rendering.

A scene holds one impulse response per (source, microphone) pair for a
speech and a noise source, plus the secondary path from the loudspeaker
to the error microphone.  Channel layout is fixed throughout the
package: indices 0..K-1 are the reference microphones, index K is the
error microphone.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ssanc import wavio


class SceneLoadError(ValueError):
    """A WAV manifest could not be resolved into a consistent scene."""


class ScalingError(ValueError):
    """Component energies do not admit the requested SNR scaling."""


@dataclass(frozen=True, eq=False)
class Scene:
    """Impulse-response description of one acoustic setup.

    ir_speech / ir_noise hold K+1 responses each (error microphone
    last); g is the secondary path from the loudspeaker to the error
    microphone; spatial_ref is the 0-based reference-microphone index
    used as the anchor for relative impulse responses.
    """

    K: int
    ir_speech: tuple[np.ndarray, ...]
    ir_noise: tuple[np.ndarray, ...]
    g: np.ndarray
    fs: int
    spatial_ref: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if len(self.ir_speech) != self.K + 1 or len(self.ir_noise) != self.K + 1:
            raise ValueError("need K+1 impulse responses per source (error mic last)")
        for ir in (*self.ir_speech, *self.ir_noise, self.g):
            if not np.all(np.isfinite(ir)):
                raise ValueError("impulse responses must be finite-valued")
        if len(self.g) < 1:
            raise ValueError("secondary path must have at least one tap")
        if not 0 <= self.spatial_ref < self.K:
            raise ValueError(
                f"spatial_ref {self.spatial_ref} outside reference range [0, {self.K})"
            )

    @property
    def err_index(self) -> int:
        return self.K


@dataclass(frozen=True, eq=False)
class MicSignals:
    """Per-channel microphone signals split into speech and noise components.

    x_s / x_v are (K, N) reference-channel components; p_s / p_v are the
    error-microphone components.  The observable signals are the sums.
    """

    x_s: np.ndarray
    x_v: np.ndarray
    p_s: np.ndarray
    p_v: np.ndarray

    @property
    def K(self) -> int:
        return self.x_s.shape[0]

    @property
    def N(self) -> int:
        return self.p_s.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.x_s + self.x_v

    @property
    def p(self) -> np.ndarray:
        return self.p_s + self.p_v


def _pulse_ir(gain: float, delay: int, length: int, tail_amp: float, tail_decay: float, rng) -> np.ndarray:
    ir = np.zeros(length)
    ir[delay] = gain
    if tail_amp > 0.0 and delay + 1 < length:
        t = np.arange(length - delay - 1)
        ir[delay + 1 :] = (
            tail_amp * gain * rng.standard_normal(length - delay - 1) * np.exp(-t / tail_decay)
        )
    return ir


def synth_scene(
    K: int,
    speech_delays,
    noise_delays,
    gains,
    sec_delay: int,
    sec_ir_len: int,
    fs: int,
    seed: int,
    *,
    spatial_ref: int | None = None,
    ir_len: int | None = None,
    tail_amp: float = 0.0,
    tail_decay: float = 6.0,
    sec_gain: float = 1.0,
    sec_onset: float = 0.0,
) -> Scene:
    """Build a sparse synthetic scene from per-microphone delays and gains.

    speech_delays / noise_delays give the sample delay of each source's
    arrival at microphones 0..K (error microphone last); gains is a
    sequence of (speech_gain, noise_gain) pairs per microphone.  Each
    impulse response is a scaled unit pulse plus, when tail_amp > 0, a
    small seeded decaying random tail starting one sample after the
    pulse (tail_decay sets its exponential time constant in samples).
    The secondary path must have at least one sample of latency
    (sec_delay >= 1) so closed-loop simulation stays well-posed.
    sec_onset > 0 gives it a soft leading edge: a geometric ramp
    sec_onset**(sec_delay - j) at lags 1 <= j < sec_delay, mimicking the
    weak early response of a measured transducer path.

    spatial_ref defaults to the reference microphone with the smallest
    speech delay, i.e. the one closest to the desired source.
    """
    speech_delays = [int(d) for d in speech_delays]
    noise_delays = [int(d) for d in noise_delays]
    gains = [(float(gs), float(gv)) for gs, gv in gains]
    if len(speech_delays) != K + 1 or len(noise_delays) != K + 1 or len(gains) != K + 1:
        raise ValueError("need K+1 delays per source and K+1 gain pairs")
    if min(speech_delays) < 0 or min(noise_delays) < 0:
        raise ValueError("delays must be >= 0")
    if sec_delay < 1:
        raise ValueError("sec_delay must be >= 1 (causal, delay-free-loop-safe secondary path)")
    if sec_ir_len <= sec_delay:
        raise ValueError(f"sec_ir_len {sec_ir_len} must exceed sec_delay {sec_delay}")

    if ir_len is None:
        ir_len = max(*speech_delays, *noise_delays) + 1 + (
            int(round(4 * tail_decay)) if tail_amp > 0.0 else 0
        )
    if max(*speech_delays, *noise_delays) >= ir_len:
        raise ValueError(f"ir_len {ir_len} must exceed every source delay")

    if spatial_ref is None:
        spatial_ref = int(np.argmin(speech_delays[:K]))

    rng = np.random.default_rng(seed)
    ir_speech = tuple(
        _pulse_ir(gains[k][0], speech_delays[k], ir_len, tail_amp, tail_decay, rng)
        for k in range(K + 1)
    )
    ir_noise = tuple(
        _pulse_ir(gains[k][1], noise_delays[k], ir_len, tail_amp, tail_decay, rng)
        for k in range(K + 1)
    )
    g = _pulse_ir(sec_gain, sec_delay, sec_ir_len, tail_amp, tail_decay, rng)
    if sec_onset > 0.0:
        for j in range(1, sec_delay):
            g[j] = sec_gain * sec_onset ** (sec_delay - j)
    return Scene(
        K=K, ir_speech=ir_speech, ir_noise=ir_noise, g=g, fs=int(fs), spatial_ref=spatial_ref
    )


def load_scene_wav(directory, manifest) -> Scene:
    """Load a scene from mono WAV files named by a JSON manifest.

    ``manifest`` is a dict or a path to a JSON file with keys: fs, mics
    (= K+1), speech_irs, noise_irs (lists of K+1 filenames, error mic
    last), secondary, spatial_ref (0-based reference index).  Filenames
    resolve relative to ``directory``.
    """
    directory = Path(directory)
    if not isinstance(manifest, dict):
        manifest_path = Path(manifest)
        if not manifest_path.is_absolute():
            manifest_path = directory / manifest_path
        try:
            manifest = json.loads(manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SceneLoadError(f"cannot read manifest {manifest_path}: {exc}") from exc

    try:
        fs = int(manifest["fs"])
        mics = int(manifest["mics"])
        speech_names = list(manifest["speech_irs"])
        noise_names = list(manifest["noise_irs"])
        secondary_name = manifest["secondary"]
        spatial_ref = int(manifest.get("spatial_ref", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneLoadError(f"manifest missing or malformed field: {exc}") from exc

    if mics < 2:
        raise SceneLoadError(f"need at least 2 microphones (1 reference + error), got {mics}")
    if len(speech_names) != mics or len(noise_names) != mics:
        raise SceneLoadError(
            f"manifest lists {len(speech_names)} speech and {len(noise_names)} noise IRs, "
            f"expected {mics} each"
        )

    def load_ir(name):
        path = directory / name
        if not path.exists():
            raise SceneLoadError(f"missing impulse-response file {path}")
        try:
            wav_fs, data = wavio.read_wav_mono(path)
        except ValueError as exc:
            raise SceneLoadError(f"{path}: {exc}") from exc
        if wav_fs != fs:
            raise SceneLoadError(f"{path}: sample rate {wav_fs} != manifest fs {fs}")
        return data

    ir_speech = tuple(load_ir(n) for n in speech_names)
    ir_noise = tuple(load_ir(n) for n in noise_names)
    g = load_ir(secondary_name)
    return Scene(
        K=mics - 1, ir_speech=ir_speech, ir_noise=ir_noise, g=g, fs=fs, spatial_ref=spatial_ref
    )


def render_mics(scene: Scene, speech, noise=None, snr_db: float | None = None) -> MicSignals:
    """Convolve source signals through the scene and scale noise to a target SNR.

    Components are truncated to the source length N (same-length
    convention) so speech and noise parts stay aligned.  When snr_db is
    given, the noise components are scaled so the speech-to-noise energy
    ratio at the error microphone is exactly snr_db.  ``noise=None``
    renders a desired-source-only scene with zero noise components.
    """
    speech = np.asarray(speech, dtype=float).ravel()
    N = speech.shape[0]
    max_ir = max(len(ir) for ir in (*scene.ir_speech, *scene.ir_noise))
    if N <= max_ir:
        raise ValueError(f"signal length {N} must exceed the longest IR ({max_ir} taps)")

    x_s = np.stack([np.convolve(scene.ir_speech[k], speech)[:N] for k in range(scene.K)])
    p_s = np.convolve(scene.ir_speech[scene.err_index], speech)[:N]

    if noise is None:
        return MicSignals(x_s=x_s, x_v=np.zeros_like(x_s), p_s=p_s, p_v=np.zeros(N))

    noise = np.asarray(noise, dtype=float).ravel()
    if noise.shape[0] != N:
        raise ValueError(f"speech and noise lengths differ: {N} vs {noise.shape[0]}")
    x_v = np.stack([np.convolve(scene.ir_noise[k], noise)[:N] for k in range(scene.K)])
    p_v = np.convolve(scene.ir_noise[scene.err_index], noise)[:N]

    if snr_db is not None:
        es = float(np.sum(p_s**2))
        ev = float(np.sum(p_v**2))
        if ev <= 0.0:
            raise ScalingError("noise component at the error microphone is silent; cannot set SNR")
        if es <= 0.0:
            raise ScalingError("speech component at the error microphone is silent; cannot set SNR")
        alpha = np.sqrt(es / (ev * 10.0 ** (snr_db / 10.0)))
        x_v = alpha * x_v
        p_v = alpha * p_v

    return MicSignals(x_s=x_s, x_v=x_v, p_s=p_s, p_v=p_v)
