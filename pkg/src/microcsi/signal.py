"""OFDM signal-space primitives: subcarrier maps, partial DFTs and tap projections.

Conventions
-----------
* The DFT is unitary: ``F[k, n] = exp(-2j*pi*k*n/N) / sqrt(N)``.
* Subcarrier indices are stored modulo ``N`` (tone -1 is index ``N - 1``),
  ordered from the most negative tone to the most positive one.
* The tap set is ``{-Np, ..., Np} mod N`` ordered the same way, so the
  strongest (synchronised) tap sits at position ``Np`` of the list.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError

# 802.11a L-LTF, tones -26..-1 and 1..26.
_LTF_LEFT = (1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1)
_LTF_RIGHT = (1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1)


def _ht20():
    tones = list(range(-28, 0)) + list(range(1, 29))
    lts = (1, 1) + _LTF_LEFT + _LTF_RIGHT + (-1, -1)
    return tones, lts


def _legacy20():
    tones = list(range(-26, 0)) + list(range(1, 27))
    return tones, _LTF_LEFT + _LTF_RIGHT


# name -> (supported dft length, builder returning (signed tones, lts))
SUBCARRIER_MAPS = {
    "ht20": (64, _ht20),
    "legacy20": (64, _legacy20),
}


@dataclass(frozen=True, eq=False)
class SignalConfig:
    """Immutable description of the OFDM grid used for CSI estimation."""

    dft_len: int
    subcarriers: np.ndarray
    lts: np.ndarray
    leak_halfwidth: int
    tap_set: np.ndarray
    map_name: str = "custom"

    def __post_init__(self):
        n = self.dft_len
        sc = np.asarray(self.subcarriers, dtype=np.int64)
        taps = np.asarray(self.tap_set, dtype=np.int64)
        lts = np.asarray(self.lts, dtype=np.complex128)
        if n <= 0:
            raise ConfigError(f"dft_len must be positive, got {n}")
        if sc.ndim != 1 or sc.size == 0 or sc.size > n:
            raise ConfigError("subcarrier set must be a non-empty vector of at most dft_len entries")
        if np.any(sc < 0) or np.any(sc >= n) or np.unique(sc).size != sc.size:
            raise ConfigError("subcarrier indices must be distinct and lie in [0, dft_len)")
        if lts.shape != sc.shape:
            raise ConfigError("lts length must equal the number of subcarriers")
        if not np.allclose(np.abs(lts), 1.0, rtol=0, atol=1e-12):
            raise ConfigError("lts symbols must have unit magnitude")
        np_ = self.leak_halfwidth
        if np_ < 0:
            raise ConfigError("leak_halfwidth must be non-negative")
        expected = np.arange(-np_, np_ + 1) % n
        if taps.shape != expected.shape or np.any(taps != expected):
            raise ConfigError("tap_set must equal {-Np..Np} mod N")
        if 2 * np_ + 1 >= n:
            raise ConfigError("leak window wraps the whole DFT")
        if taps.size >= sc.size:
            raise ConfigError(
                f"leak window of {taps.size} taps is not smaller than {sc.size} tones; "
                "the tap-domain least-squares system would be underdetermined"
            )
        for name, arr in (("subcarriers", sc), ("lts", lts), ("tap_set", taps)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_tones(self):
        return int(self.subcarriers.size)

    @property
    def n_taps(self):
        return int(self.tap_set.size)

    @property
    def signed_subcarriers(self):
        """Tone indices mapped back to the DC-centred range ``[-N/2, N/2)``."""
        sc = self.subcarriers
        return np.where(sc >= self.dft_len // 2, sc - self.dft_len, sc)

    def to_dict(self):
        return {
            "dft_len": int(self.dft_len),
            "subcarrier_map": self.map_name,
            "subcarriers": [int(k) for k in self.subcarriers],
            "lts": [[float(z.real), float(z.imag)] for z in self.lts],
            "leak_halfwidth": int(self.leak_halfwidth),
        }

    @cached_property
    def digest(self):
        """Hex SHA-256 over the canonical JSON form of the configuration."""
        d = self.to_dict()
        d.pop("subcarrier_map")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @cached_property
    def pdft(self):
        return partial_dft(self)

    def __eq__(self, other):
        if not isinstance(other, SignalConfig):
            return NotImplemented
        return self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)


def build_config(dft_len=64, subcarrier_map="ht20", leak_halfwidth=8, lts=None):
    """Build a :class:`SignalConfig` from a named subcarrier map.

    ``lts`` overrides the map's standard +/-1 training symbols.
    """
    if dft_len <= 0 or dft_len & (dft_len - 1):
        raise ConfigError(f"dft_len must be a power of two, got {dft_len}")
    try:
        map_len, builder = SUBCARRIER_MAPS[subcarrier_map]
    except KeyError:
        raise ConfigError(
            f"unknown subcarrier map {subcarrier_map!r}; known: {sorted(SUBCARRIER_MAPS)}"
        ) from None
    if map_len != dft_len:
        raise ConfigError(f"map {subcarrier_map!r} is defined for N={map_len}, not N={dft_len}")
    tones, default_lts = builder()
    if 2 * leak_halfwidth + 1 >= len(tones):
        raise ConfigError(
            f"leak_halfwidth={leak_halfwidth} gives {2 * leak_halfwidth + 1} taps for "
            f"{len(tones)} tones: underdetermined"
        )
    return SignalConfig(
        dft_len=dft_len,
        subcarriers=np.asarray(tones, dtype=np.int64) % dft_len,
        lts=np.asarray(default_lts if lts is None else lts, dtype=np.complex128),
        leak_halfwidth=leak_halfwidth,
        tap_set=np.arange(-leak_halfwidth, leak_halfwidth + 1) % dft_len,
        map_name=subcarrier_map,
    )


def config_from_dict(d):
    """Inverse of :meth:`SignalConfig.to_dict` (also accepts the short form)."""
    name = d.get("subcarrier_map", "ht20")
    n = int(d.get("dft_len", 64))
    np_ = int(d.get("leak_halfwidth", 8))
    lts = d.get("lts")
    if lts is not None:
        lts = np.array([complex(re, im) for re, im in lts])
    if "subcarriers" in d and name not in SUBCARRIER_MAPS:
        return SignalConfig(
            dft_len=n,
            subcarriers=np.asarray(d["subcarriers"], dtype=np.int64),
            lts=lts,
            leak_halfwidth=np_,
            tap_set=np.arange(-np_, np_ + 1) % n,
            map_name=name,
        )
    cfg = build_config(n, name, np_, lts=lts)
    if "subcarriers" in d and list(d["subcarriers"]) != [int(k) for k in cfg.subcarriers]:
        raise ConfigError("subcarrier list does not match the named map")
    return cfg


@dataclass(frozen=True, eq=False)
class PartialDft:
    """Rows ``K`` / columns ``L`` of the unitary DFT, with cached normal-equation inverse."""

    matrix: np.ndarray
    gram_inverse: np.ndarray
    projector: np.ndarray


def unitary_dft_entries(dft_len, rows, cols):
    rows = np.asarray(rows)[:, None]
    cols = np.asarray(cols)[None, :]
    return np.exp(-2j * np.pi * ((rows * cols) % dft_len) / dft_len) / np.sqrt(dft_len)


def partial_dft(config):
    """Return ``F[K, L]``, ``(F^H F)^-1`` and the orthogonal projector onto span(F[K, L])."""
    f = unitary_dft_entries(config.dft_len, config.subcarriers, config.tap_set)
    gram = f.conj().T @ f
    if np.linalg.cond(gram) > 1e10:
        raise ConfigError("Gram matrix of the partial DFT is numerically singular")
    gram_inv = np.linalg.inv(gram)
    proj = f @ gram_inv @ f.conj().T
    # Hermitian by construction; symmetrise away rounding so <Pu, v> == <u, Pv> tightly.
    proj = 0.5 * (proj + proj.conj().T)
    for arr in (f, gram_inv, proj):
        arr.setflags(write=False)
    return PartialDft(matrix=f, gram_inverse=gram_inv, projector=proj)


def project_onto_taps(config, v):
    """Orthogonal projection of tone-domain vector(s) onto the tap subspace.

    ``v`` may be a single length-``|K|`` vector or a stack with tones on the
    last axis.  This is the least-squares channel fit restricted to taps ``L``.
    """
    v = np.asarray(v, dtype=np.complex128)
    if v.shape[-1] != config.n_tones:
        raise ConfigError(f"expected {config.n_tones} tones, got {v.shape[-1]}")
    p = config.pdft.projector
    if v.ndim == 1:
        return p @ v
    return v @ p.T


def tap_coefficients(config, v):
    """Least-squares tap values on ``L`` for tone vector ``v``."""
    pd = config.pdft
    return pd.gram_inverse @ (pd.matrix.conj().T @ np.asarray(v, dtype=np.complex128))


def estimate_csi(config, received):
    """Per-tone LS estimate from the received LTS: ``received * conj(lts)``."""
    received = np.asarray(received, dtype=np.complex128)
    return received * config.lts.conj()
