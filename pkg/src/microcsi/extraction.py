"""Channel-independent fingerprint extraction from batches of CSI.

A batch is averaged to suppress noise, the channel is fitted by least
squares on the few taps around the synchronised path, and the averaged CSI
is divided by that fit.  What survives the division is ``1 + f`` up to the
part of the distortion that the tap fit absorbs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ExtractionError
from .signal import project_onto_taps

DIV_FLOOR = 1e-6
SANITY_BAND = (0.5, 2.0)
COMBINING_MODES = ("per-chain", "pooled")


@dataclass(frozen=True, eq=False)
class AveragedCsi:
    mean_csi: np.ndarray
    n_used: int
    source_chains: frozenset = frozenset()
    device_id: str | None = None
    last_timestamp_us: int = 0


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Extracted ``1 + f`` estimate with its provenance.

    ``n_csi`` counts consecutive packets per receive chain and ``n_chains``
    how many chains were combined.  ``extracted_at`` is the timestamp (us) of
    the newest measurement used, which keeps extraction reproducible.
    """

    values: np.ndarray
    n_csi: int = 1
    n_chains: int = 1
    device_claim: str | None = None
    extracted_at: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.complex128)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ConfigError("fingerprint values must be a finite 1-D vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def average_measurements(batch, allow_mixed_chains=False):
    """Element-wise mean of a batch of :class:`~microcsi.channel.CsiMeasurement`.

    Mixing receive chains is refused unless ``allow_mixed_chains`` because
    chains see different channels; pooling them is only meaningful when the
    caller knows the channels coincide (or accepts the raw-pooled mode).
    """
    batch = list(batch)
    if not batch:
        raise ExtractionError("cannot average an empty batch")
    devices = {m.device_id for m in batch}
    if len(devices) > 1:
        raise ExtractionError(f"batch mixes devices: {sorted(devices)}")
    lengths = {m.csi.shape for m in batch}
    if len(lengths) > 1:
        raise ExtractionError(f"batch mixes vector shapes: {sorted(lengths)}")
    chains = frozenset(m.rx_chain for m in batch)
    if len(chains) > 1 and not allow_mixed_chains:
        raise ExtractionError(f"batch mixes receive chains {sorted(chains)}; extract per chain instead")
    mean = np.mean(np.stack([m.csi for m in batch]), axis=0)
    return AveragedCsi(
        mean_csi=mean,
        n_used=len(batch),
        source_chains=chains,
        device_id=batch[0].device_id,
        last_timestamp_us=max(m.timestamp_us for m in batch),
    )


def estimate_channel(config, avg):
    """LS channel estimate restricted to the leakage taps (projection of the mean CSI)."""
    mean = avg.mean_csi if isinstance(avg, AveragedCsi) else avg
    return project_onto_taps(config, mean)


def _check_floor(config, h_hat, div_floor):
    mag = np.abs(h_hat)
    floor = div_floor * mag.max(axis=-1, keepdims=True)
    bad = mag < floor
    if np.any(bad) or not np.all(np.isfinite(h_hat)):
        idx = np.unique(np.nonzero(bad | ~np.isfinite(h_hat))[-1])
        tones = config.signed_subcarriers[idx]
        raise ExtractionError(
            f"channel estimate fades below the division floor on tones {tones.tolist()}", tones=tones
        )


def _check_band(values):
    level = np.mean(np.abs(values), axis=-1)
    lo, hi = SANITY_BAND
    out = np.atleast_1d((level < lo) | (level > hi))
    if np.any(out):
        raise ExtractionError(
            f"fingerprint magnitude {np.atleast_1d(level)[out][0]:.3g} outside sanity band {SANITY_BAND}"
        )


def extract_fingerprint(config, avg, div_floor=DIV_FLOOR, device_claim=None):
    """Divide the averaged CSI by its tap-subspace channel estimate."""
    h_hat = estimate_channel(config, avg)
    _check_floor(config, h_hat, div_floor)
    values = avg.mean_csi / h_hat
    _check_band(values)
    return Fingerprint(
        values=values,
        n_csi=avg.n_used,
        n_chains=max(1, len(avg.source_chains)),
        device_claim=device_claim if device_claim is not None else avg.device_id,
        extracted_at=avg.last_timestamp_us,
    )


def extract_from_measurements(config, batch, mode="per-chain", div_floor=DIV_FLOOR):
    """Fingerprint from a (possibly multi-chain) batch of measurements.

    ``per-chain`` extracts each chain separately and averages the resulting
    fingerprints; ``pooled`` averages raw CSI across chains first.
    """
    batch = list(batch)
    if mode == "pooled":
        avg = average_measurements(batch, allow_mixed_chains=True)
        fp = extract_fingerprint(config, avg, div_floor)
        n_chains = len(avg.source_chains)
        return Fingerprint(fp.values, avg.n_used // n_chains, n_chains, fp.device_claim, fp.extracted_at)
    if mode != "per-chain":
        raise ConfigError(f"unknown combining mode {mode!r}; choose from {COMBINING_MODES}")
    by_chain = {}
    for m in batch:
        by_chain.setdefault(m.rx_chain, []).append(m)
    if not by_chain:
        raise ExtractionError("cannot extract from an empty batch")
    fps = [extract_fingerprint(config, average_measurements(by_chain[c]), div_floor) for c in sorted(by_chain)]
    values = np.mean(np.stack([f.values for f in fps]), axis=0)
    return Fingerprint(
        values=values,
        n_csi=min(f.n_csi for f in fps),
        n_chains=len(fps),
        device_claim=fps[0].device_claim,
        extracted_at=max(f.extracted_at for f in fps),
    )


def extract_fingerprints(config, csi, n_csi, mode="per-chain", div_floor=DIV_FLOOR):
    """Vectorised extraction over a whole session.

    ``csi`` has shape ``(n_chains, n_packets, n_tones)``.  Consecutive groups
    of ``n_csi`` packets form one fingerprint each; a trailing partial group
    is dropped.  Returns an array of shape ``(n_packets // n_csi, n_tones)``.
    """
    csi = np.asarray(csi, dtype=np.complex128)
    if csi.ndim == 2:
        csi = csi[None]
    if n_csi < 1:
        raise ConfigError("n_csi must be a positive integer")
    n_chains, n_packets, n_tones = csi.shape
    groups = n_packets // n_csi
    if groups == 0:
        raise ExtractionError(f"{n_packets} packets is fewer than n_csi={n_csi}")
    blocks = csi[:, : groups * n_csi].reshape(n_chains, groups, n_csi, n_tones)
    if mode == "per-chain":
        means = blocks.mean(axis=2)
        h_hat = project_onto_taps(config, means)
        _check_floor(config, h_hat, div_floor)
        values = (means / h_hat).mean(axis=0)
    elif mode == "pooled":
        means = blocks.transpose(1, 0, 2, 3).reshape(groups, n_chains * n_csi, n_tones).mean(axis=1)
        h_hat = project_onto_taps(config, means)
        _check_floor(config, h_hat, div_floor)
        values = means / h_hat
    else:
        raise ConfigError(f"unknown combining mode {mode!r}; choose from {COMBINING_MODES}")
    _check_band(values)
    return values
