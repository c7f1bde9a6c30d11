"""Fingerprint library and KNN anomaly-detection authentication."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UnknownIdentityError
from .extraction import Fingerprint

FEATURE_VIEWS = ("complex", "amplitude", "phase")
K_RULES = ("sqrt_s", "explicit")


@dataclass(frozen=True)
class MatcherParams:
    """KNN settings.

    ``threshold`` may be left ``None`` when thresholds are calibrated per
    identity and stored on the library instead.
    """

    k_rule: str = "sqrt_s"
    k_neighbors: int | None = None
    threshold: float | None = None
    feature: str = "complex"

    def __post_init__(self):
        if self.k_rule not in K_RULES:
            raise ConfigError(f"unknown k_rule {self.k_rule!r}")
        if self.k_rule == "explicit" and (self.k_neighbors is None or self.k_neighbors < 1):
            raise ConfigError("explicit k_rule needs k_neighbors >= 1")
        if self.threshold is not None and not self.threshold > 0:
            raise ConfigError("threshold must be positive")
        if self.feature not in FEATURE_VIEWS:
            raise ConfigError(f"unknown feature view {self.feature!r}")

    def k_for(self, s):
        """Neighbour count for an identity with ``s`` enrolled fingerprints."""
        if self.k_rule == "sqrt_s":
            k = math.isqrt(s)
        else:
            if self.k_neighbors > s:
                raise ConfigError(f"k_neighbors={self.k_neighbors} exceeds S={s}")
            k = self.k_neighbors
        return min(max(k, 1), s)

    def to_dict(self):
        return {
            "k_rule": self.k_rule,
            "k_neighbors": self.k_neighbors,
            "threshold": self.threshold,
            "feature": self.feature,
        }


def features(values, view="complex"):
    """Real feature matrix for complex fingerprint values (last axis = tones)."""
    v = np.asarray(values)
    if view == "complex":
        return np.concatenate([v.real, v.imag], axis=-1)
    if view == "amplitude":
        return np.abs(v)
    if view == "phase":
        return np.angle(v)
    raise ConfigError(f"unknown feature view {view!r}")


@dataclass(frozen=True)
class AuthDecision:
    claimed_id: str
    distance: float
    threshold: float
    accepted: bool
    neighbor_distances: tuple = ()


@dataclass(frozen=True, eq=False)
class FingerprintLibrary:
    """Enrolled fingerprints per identity.

    Libraries are snapshots: :func:`enroll` returns a new library and leaves
    the old one untouched, so readers never see a half-applied enrolment.
    """

    config_digest: str | None = None
    entries: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", {k: tuple(v) for k, v in self.entries.items()})
        object.__setattr__(self, "_matrices", {})

    @property
    def identities(self):
        return list(self.entries)

    def size(self, identity):
        return len(self._get(identity))

    def _get(self, identity):
        try:
            return self.entries[identity]
        except KeyError:
            raise UnknownIdentityError(f"identity {identity!r} is not enrolled") from None

    def matrix(self, identity):
        """Complex ``(S, n_tones)`` array of the identity's fingerprints (cached)."""
        m = self._matrices.get(identity)
        if m is None:
            m = np.stack([fp.values for fp in self._get(identity)])
            m.setflags(write=False)
            self._matrices[identity] = m
        return m

    def threshold_for(self, identity, params):
        t = self.thresholds.get(identity, params.threshold)
        if t is None:
            raise ConfigError(f"no decision threshold for {identity!r}")
        return t

    def with_thresholds(self, thresholds):
        return FingerprintLibrary(self.config_digest, dict(self.entries), {**self.thresholds, **thresholds})


def enroll(library, identity, fingerprints, config_digest=None, dedup=True):
    """Return a new library with ``fingerprints`` appended under ``identity``.

    With ``dedup`` a fingerprint already enrolled under the identity (same
    values bit for bit) is skipped, making repeated enrolment idempotent.
    """
    fingerprints = [fp if isinstance(fp, Fingerprint) else Fingerprint(fp) for fp in fingerprints]
    if not fingerprints:
        raise ConfigError("nothing to enroll")
    digest = library.config_digest
    if config_digest is not None:
        if digest is not None and digest != config_digest:
            raise ConfigError("configuration digest does not match the library")
        digest = config_digest
    lengths = {fp.values.shape for fp in fingerprints}
    for existing in library.entries.values():
        lengths.add(existing[0].values.shape)
    if len(lengths) > 1:
        raise ConfigError(f"fingerprint lengths disagree: {sorted(lengths)}")
    current = list(library.entries.get(identity, ()))
    if dedup:
        seen = {fp.values.tobytes() for fp in current}
        for fp in fingerprints:
            key = fp.values.tobytes()
            if key not in seen:
                seen.add(key)
                current.append(fp)
    else:
        current.extend(fingerprints)
    entries = dict(library.entries)
    entries[identity] = tuple(current)
    return FingerprintLibrary(digest, entries, dict(library.thresholds))


def _probe_values(probe):
    return probe.values if isinstance(probe, Fingerprint) else np.asarray(probe, dtype=np.complex128)


def neighbor_distances(library, params, claimed_id, probe):
    """Sorted distances from ``probe`` to its K nearest enrolled fingerprints."""
    x = features(library.matrix(claimed_id), params.feature)
    q = features(_probe_values(probe), params.feature)
    if q.shape[-1] != x.shape[-1]:
        raise ConfigError("probe length does not match the library")
    diff = x - q
    d = np.sqrt(np.sum(diff * diff, axis=1))
    k = params.k_for(d.size)
    return np.sort(np.partition(d, k - 1)[:k])


def knn_distance(library, params, claimed_id, probe):
    """Mean Euclidean distance from ``probe`` to its K nearest fingerprints of ``claimed_id``."""
    return float(np.mean(neighbor_distances(library, params, claimed_id, probe)))


def authenticate(library, params, claimed_id, probe):
    """Accept when the KNN distance does not exceed the threshold (ties accept)."""
    nd = neighbor_distances(library, params, claimed_id, probe)
    distance = float(np.mean(nd))
    threshold = library.threshold_for(claimed_id, params)
    return AuthDecision(claimed_id, distance, float(threshold), distance <= threshold, tuple(float(x) for x in nd))


def _knn_rows(x, q, k, chunk_elems, exclude_self=False):
    # Squared distances via the Gram expansion on library-centred features.
    mu = x.mean(axis=0)
    xc = x - mu
    qc = q - mu
    xn = np.einsum("ij,ij->i", xc, xc)
    qn = np.einsum("ij,ij->i", qc, qc)
    out = np.empty(q.shape[0])
    step = max(1, chunk_elems // max(1, x.shape[0]))
    for a in range(0, q.shape[0], step):
        b = min(a + step, q.shape[0])
        d2 = qn[a:b, None] + xn[None, :] - 2.0 * (qc[a:b] @ xc.T)
        np.maximum(d2, 0.0, out=d2)
        if exclude_self:
            d2[np.arange(b - a), np.arange(a, b)] = np.inf
        part = np.partition(d2, k - 1, axis=1)[:, :k]
        out[a:b] = np.sqrt(part).mean(axis=1)
    return out


def knn_distances(library, params, claimed_id, probes, chunk_elems=4_000_000):
    """KNN distances for many probes at once (``probes``: complex ``(M, n_tones)``).

    Uses the ``|q|^2 + |x|^2 - 2 q.x`` expansion with BLAS, so results agree
    with :func:`knn_distance` to rounding (about 1e-12 relative), not bitwise.
    """
    x = features(library.matrix(claimed_id), params.feature)
    q = features(np.atleast_2d(np.asarray(probes)), params.feature)
    if q.shape[-1] != x.shape[-1]:
        raise ConfigError("probe length does not match the library")
    return _knn_rows(x, q, params.k_for(x.shape[0]), chunk_elems)


def leave_one_out_distances(library, params, identity, chunk_elems=4_000_000):
    """KNN distance of each enrolled fingerprint against the rest of its identity.

    A fingerprint is never scored against a library that contains it; K
    follows the rule for ``S - 1`` fingerprints.
    """
    x = features(library.matrix(identity), params.feature)
    s = x.shape[0]
    if s < 2:
        raise ConfigError("leave-one-out needs at least two fingerprints")
    return _knn_rows(x, x, params.k_for(s - 1), chunk_elems, exclude_self=True)


def threshold_for_far(legit_scores, far_cap):
    """Smallest threshold whose false-alarm rate on ``legit_scores`` is at most ``far_cap``.

    With the ties-accept rule, FAR only drops at legitimate score values, so
    the answer is the legitimate score with ``floor(far_cap * n)`` scores
    strictly above it (or ``-inf`` when every probe may be rejected).
    """
    if not 0.0 <= far_cap <= 1.0:
        raise ConfigError("far_cap must lie in [0, 1]")
    s = np.sort(np.asarray(legit_scores, dtype=float))
    n = s.size
    if n == 0:
        raise ConfigError("no legitimate scores")
    allowed = math.floor(far_cap * n + 1e-9)
    if allowed >= n:
        return -math.inf
    return float(s[n - 1 - allowed])


def calibrate_thresholds(library, params, far_cap=0.0):
    """Per-identity thresholds from leave-one-out scores on the library itself."""
    return library.with_thresholds(
        {ident: threshold_for_far(leave_one_out_distances(library, params, ident), far_cap) for ident in library.identities}
    )

