"""Frequency-domain CSI simulator.

Devices carry a per-tone multiplicative distortion ``f`` (the micro-CSI),
channels are a single dominant path smeared over a few taps by the pulse
shape, and each packet yields ``csi = h * (1 + f) + z`` on the occupied tones.
Every random draw is derived from an explicit seed so streams replay exactly.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .signal import estimate_csi


# ---------------------------------------------------------------------------
# seeding helpers


def id_key(text):
    """Stable 64-bit integer key for a string (device ids, tags)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def as_seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_seed(seed, *keys):
    """Deterministic child of ``seed`` addressed by ``keys`` (no spawn-counter state)."""
    ss = as_seed_sequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in keys))


def rng_for(seed, *keys):
    return np.random.default_rng(child_seed(seed, *keys))


# ---------------------------------------------------------------------------
# device profiles


@dataclass(frozen=True, eq=False)
class DeviceProfile:
    device_id: str
    distortion: np.ndarray
    magnitude_db: float

    @property
    def rms(self):
        return float(np.sqrt(np.mean(np.abs(self.distortion) ** 2)))


def _unit_rms(x):
    r = np.sqrt(np.mean(np.abs(x) ** 2))
    return x / r if r > 0 else x


def _complex_normal(rng, shape):
    z = rng.standard_normal(tuple(np.atleast_1d(shape)) + (2,))
    return (z[..., 0] + 1j * z[..., 1]) * math.sqrt(0.5)


def distortion_shape(rng, n_tones, smoothness, corr_tones=2.0):
    """Unit-RMS random tone profile mixing a smooth and a per-tone component.

    The smooth part is complex white noise convolved with a Gaussian kernel
    of ``corr_tones`` standard deviation (reflect-padded at the band edges).
    """
    if not 0.0 <= smoothness <= 1.0:
        raise ConfigError("smoothness must lie in [0, 1]")
    rough = _unit_rms(_complex_normal(rng, (n_tones,)))
    half = int(math.ceil(4 * corr_tones))
    white = _complex_normal(rng, (n_tones + 2 * half,))
    t = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (t / corr_tones) ** 2)
    smooth = _unit_rms(np.convolve(white, kernel, mode="valid"))
    return _unit_rms(math.sqrt(smoothness) * smooth + math.sqrt(1.0 - smoothness) * rough)


def make_device_profile(config, device_id, seed, magnitude_db=-25.0, smoothness=0.5, correlation=0.0):
    """Deterministic micro-distortion for ``device_id``.

    ``correlation`` mixes in a component shared by every device generated
    with the same ``seed`` so that any two such profiles have (expected)
    correlation coefficient ``correlation``; this mimics same-model hardware.
    ``magnitude_db=-inf`` gives a distortion-free device.
    """
    n = config.n_tones
    if magnitude_db == -math.inf:
        return DeviceProfile(device_id, np.zeros(n, dtype=np.complex128), magnitude_db)
    if not 0.0 <= correlation <= 1.0:
        raise ConfigError("correlation must lie in [0, 1]")
    own = distortion_shape(rng_for(seed, id_key(device_id)), n, smoothness)
    if correlation > 0:
        common = distortion_shape(rng_for(seed, id_key("\x00shared-model")), n, smoothness)
        own = math.sqrt(correlation) * common + math.sqrt(1.0 - correlation) * own
    f = _unit_rms(own) * 10.0 ** (magnitude_db / 20.0)
    f.setflags(write=False)
    return DeviceProfile(device_id, f, float(magnitude_db))


def make_device_profiles(config, device_ids, seed, magnitude_db=-25.0, smoothness=0.5, correlation=0.0):
    return [make_device_profile(config, d, seed, magnitude_db, smoothness, correlation) for d in device_ids]


# ---------------------------------------------------------------------------
# channels

_RC_RE = re.compile(r"^raised-cosine(?:\((?P<beta>[0-9.eE+-]+)\))?$")


def _sinc(t):
    # np.sinc leaves ~1e-17 residue at nonzero integers; those taps must be exactly zero
    t = np.asarray(t, dtype=float)
    return np.where((t != 0) & (t == np.round(t)), 0.0, np.sinc(t))


def pulse_function(pulse):
    """Return ``g(t)`` for a named shaping pulse (``t`` in sampling intervals)."""
    if pulse == "sinc":
        return _sinc
    m = _RC_RE.match(pulse)
    if m is None:
        raise ConfigError(f"unknown pulse {pulse!r}; use 'sinc' or 'raised-cosine(beta)'")
    beta = float(m.group("beta") or 0.25)
    if not 0.0 <= beta <= 1.0:
        raise ConfigError("raised-cosine roll-off must lie in [0, 1]")

    def rc(t):
        t = np.asarray(t, dtype=float)
        if beta == 0:
            return _sinc(t)
        denom = 1.0 - (2.0 * beta * t) ** 2
        singular = np.isclose(denom, 0.0, atol=1e-12)
        safe = np.where(singular, 1.0, denom)
        out = _sinc(t) * np.cos(np.pi * beta * t) / safe
        return np.where(singular, np.pi / 4 * _sinc(1.0 / (2.0 * beta)), out)

    return rc


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """Discrete-time channel after synchronisation to the strongest tap.

    ``freq_response`` is the *non-normalised* DFT of ``taps`` on the occupied
    tones, ``H[k] = sum_n taps[n] exp(-2j pi k n / N)``, i.e. ``sqrt(N)`` times
    the unitary transform, so a unit tap at index 0 gives an all-ones response.
    """

    taps: np.ndarray
    freq_response: np.ndarray
    path_delay_frac: float
    path_gain: complex
    pulse: str = "sinc"
    truncated: bool = True


def draw_channel(config, rng=None, delay_frac=None, gain=None, pulse="sinc", truncate=True):
    """Single dominant path with pulse-shaping leakage.

    Missing ``delay_frac`` is drawn uniformly from [0, 1) and missing ``gain``
    is a unit-magnitude complex number of uniform phase; ``rng`` supplies both.
    With ``truncate`` the pulse is cut to the ``2*Np + 1`` taps around the
    strongest one; otherwise one full period of taps is populated.
    """
    g = pulse_function(pulse)
    if delay_frac is None or gain is None:
        if rng is None:
            raise ConfigError("rng is required when delay_frac or gain is not given")
        if delay_frac is None:
            delay_frac = float(rng.uniform(0.0, 1.0))
        if gain is None:
            gain = complex(np.exp(2j * np.pi * rng.uniform(0.0, 1.0)))
    if not 0.0 <= delay_frac < 1.0:
        raise ConfigError("delay_frac must lie in [0, 1)")
    if gain == 0:
        raise ConfigError("path gain must be non-zero")
    n = config.dft_len
    # re-reference to the strongest tap: offset in [-0.5, 0.5]
    offset = delay_frac if delay_frac <= 0.5 else delay_frac - 1.0
    if truncate:
        m = np.arange(-config.leak_halfwidth, config.leak_halfwidth + 1)
    else:
        m = np.arange(-(n // 2), n - n // 2)
    taps = np.zeros(n, dtype=np.complex128)
    taps[m % n] = gain * g(m - offset)
    h = np.fft.fft(taps)[config.subcarriers]
    taps.setflags(write=False)
    h.setflags(write=False)
    return ChannelRealization(taps, h, float(delay_frac), complex(gain), pulse, truncate)


def draw_session_channels(config, seed, n_rx_chains, pulse="sinc", truncate=True, shared_delay=False):
    """One channel per receive chain; ``shared_delay`` correlates chains via a common path delay."""
    rng = rng_for(seed, 0)
    delays = rng.uniform(0.0, 1.0, size=n_rx_chains)
    phases = rng.uniform(0.0, 1.0, size=n_rx_chains)
    if shared_delay:
        delays[:] = delays[0]
    return [
        draw_channel(config, None, float(d), complex(np.exp(2j * np.pi * p)), pulse, truncate)
        for d, p in zip(delays, phases)
    ]


# ---------------------------------------------------------------------------
# measurements


@dataclass(frozen=True)
class NoiseModel:
    """Circularly-symmetric complex Gaussian noise, ``E|z|^2 = sigma**2`` per tone."""

    sigma: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError("noise sigma must be finite and non-negative")

    def draw(self, rng, shape):
        if self.sigma == 0:
            return np.zeros(shape, dtype=np.complex128)
        return _complex_normal(rng, shape) * self.sigma


@dataclass(frozen=True, eq=False)
class CsiMeasurement:
    device_id: str
    rx_chain: int
    seq_no: int
    timestamp_us: int
    csi: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, CsiMeasurement):
            return NotImplemented
        return (
            self.device_id == other.device_id
            and self.rx_chain == other.rx_chain
            and self.seq_no == other.seq_no
            and self.timestamp_us == other.timestamp_us
            and self.csi.shape == other.csi.shape
            and self.csi.tobytes() == other.csi.tobytes()
        )

    __hash__ = None


def _noisy_csi(config, distortion, channel, noise_draw):
    received = channel.freq_response * config.lts * (1.0 + distortion) + noise_draw
    return estimate_csi(config, received)


def synthesize_measurement(config, profile, channel, noise, meta, rng=None):
    """One CSI vector: LS estimate of the LTS received through ``channel``.

    ``meta`` is a mapping with ``rx_chain``, ``seq_no`` and ``timestamp_us``
    (missing keys default to 0).  ``rng`` is only needed when ``noise.sigma > 0``.
    """
    if noise.sigma > 0 and rng is None:
        raise ConfigError("rng is required for noisy measurements")
    z = noise.draw(rng, (config.n_tones,))
    csi = _noisy_csi(config, profile.distortion, channel, z)
    csi.setflags(write=False)
    return CsiMeasurement(
        device_id=profile.device_id,
        rx_chain=int(meta.get("rx_chain", 0)),
        seq_no=int(meta.get("seq_no", 0)),
        timestamp_us=int(meta.get("timestamp_us", 0)),
        csi=csi,
    )


def chain_distortion(profile, seed, chain, perturbation_rms):
    if perturbation_rms == 0:
        return profile.distortion
    rng = rng_for(seed, chain, 1)
    return profile.distortion + perturbation_rms * _complex_normal(rng, profile.distortion.shape)


def session_chunks(config, profile, channels, noise, n_packets, seed, chain_perturbation_rms=0.0, chunk=4096):
    """Yield ``(chain, first_seq, csi_block)`` with blocks of at most ``chunk`` packets.

    Noise for chain ``c`` comes from its own generator, consumed in packet
    order, so the concatenated blocks do not depend on ``chunk``.
    """
    if n_packets < 1 or not channels:
        raise ConfigError("need at least one packet and one receive chain")
    for c, ch in enumerate(channels):
        f = chain_distortion(profile, seed, c, chain_perturbation_rms)
        rng = rng_for(seed, c, 0)
        for start in range(0, n_packets, chunk):
            m = min(chunk, n_packets - start)
            z = noise.draw(rng, (m, config.n_tones))
            yield c, start, _noisy_csi(config, f, ch, z)


def session_array(config, profile, channels, noise, n_packets, seed, chain_perturbation_rms=0.0):
    """Whole session as an array of shape ``(n_chains, n_packets, n_tones)``."""
    out = np.empty((len(channels), n_packets, config.n_tones), dtype=np.complex128)
    for c, start, block in session_chunks(
        config, profile, channels, noise, n_packets, seed, chain_perturbation_rms, chunk=n_packets
    ):
        out[c, start : start + block.shape[0]] = block
    return out


def simulate_session(
    config,
    profile,
    channels,
    noise,
    n_packets,
    seed,
    packet_interval_us=50,
    chain_perturbation_rms=0.0,
    start_us=0,
):
    """Stream of :class:`CsiMeasurement`, one per packet per receive chain.

    Records come out grouped by chain and in ``seq_no`` order within a
    chain (the trace-file ordering).  All chains share the profile; each has
    its own channel from ``channels``.
    """
    for c, start, block in session_chunks(
        config, profile, channels, noise, n_packets, seed, chain_perturbation_rms
    ):
        block.setflags(write=False)
        for i in range(block.shape[0]):
            seq = start + i
            yield CsiMeasurement(
                profile.device_id, c, seq, start_us + seq * packet_interval_us, block[i]
            )
