"""Device-rotation evaluation: ADR/FAR operating points, ROC data and stability tables.

Every legitimate device is attacked in turn by every other device.  Library
fingerprints come from one simulated session ("room A") and probes from an
independent one ("room B"), so channels and noise differ between enrolment
and test.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import (
    NoiseModel,
    child_seed,
    draw_session_channels,
    id_key,
    make_device_profiles,
    rng_for,
    session_array,
    simulate_session,
)
from .errors import ConfigError
from .extraction import extract_fingerprints
from .matcher import (
    FingerprintLibrary,
    MatcherParams,
    enroll,
    knn_distances,
    leave_one_out_distances,
    threshold_for_far,
)

DEFAULT_N_CSI = (10, 20, 50, 100, 200)
DEFAULT_FAR_CAPS = (0.0, 0.03)
ROOMS = ("room_a", "room_b")

# sigma for the default scenario: chosen so that ADR at FAR=0 climbs from a
# few percent at n_csi=10 to ~100% at n_csi=200 with -25 dB distortions.
DEFAULT_SIGMA = 0.45


@dataclass(frozen=True)
class SimulationSettings:
    n_devices: int = 11
    n_packets: int = 60000
    n_chains: int = 2
    magnitude_db: float = -25.0
    smoothness: float = 0.5
    correlation: float = 0.0
    sigma: float = DEFAULT_SIGMA
    pulse: str = "sinc"
    truncate: bool = True
    shared_delay: bool = False
    chain_perturbation_rms: float = 0.0
    packet_interval_us: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_devices < 1 or self.n_packets < 1 or self.n_chains < 1:
            raise ConfigError("device, packet and chain counts must be positive")

    @property
    def device_ids(self):
        return [f"dev{i + 1}" for i in range(self.n_devices)]

    def to_dict(self):
        return asdict(self)


def _room_index(room):
    if room in (0, 1):
        return room
    try:
        return ROOMS.index(room)
    except ValueError:
        raise ConfigError(f"unknown room {room!r}; use one of {ROOMS}") from None


def _device_session(config, settings, profile, room):
    r = _room_index(room)
    key = id_key(profile.device_id)
    channels = draw_session_channels(
        config,
        child_seed(settings.seed, 1, r, key),
        settings.n_chains,
        settings.pulse,
        settings.truncate,
        settings.shared_delay,
    )
    return channels, child_seed(settings.seed, 2, r, key)


def device_profiles(config, settings):
    return make_device_profiles(
        config, settings.device_ids, settings.seed, settings.magnitude_db, settings.smoothness, settings.correlation
    )


def simulate_device_array(config, settings, profile, room):
    """Raw CSI of one device in one room, shape ``(n_chains, n_packets, n_tones)``."""
    channels, noise_seed = _device_session(config, settings, profile, room)
    return session_array(
        config, profile, channels, NoiseModel(settings.sigma), settings.n_packets, noise_seed,
        settings.chain_perturbation_rms,
    )


def simulate_room_records(config, settings, room, profiles=None):
    """Measurement stream for a whole room, ordered by (device, chain, seq_no)."""
    profiles = profiles or device_profiles(config, settings)
    start = _room_index(room) * 10**10
    for p in profiles:
        channels, noise_seed = _device_session(config, settings, p, room)
        yield from simulate_session(
            config, p, channels, NoiseModel(settings.sigma), settings.n_packets, noise_seed,
            settings.packet_interval_us, settings.chain_perturbation_rms, start_us=start,
        )


def records_to_arrays(records, with_timestamps=False):
    """Group a (device, chain, seq)-ordered stream into per-device CSI arrays.

    Yields ``(device_id, array)`` (plus the first chain's timestamps when
    ``with_timestamps``) as soon as a device's block ends, so memory holds
    one device at a time.
    """
    current = None
    chains, stamps = {}, {}

    def flush():
        counts = {len(v) for v in chains.values()}
        if len(counts) != 1:
            raise ConfigError(f"device {current!r} has unequal packet counts per chain")
        csi = np.stack([np.stack(chains[c]) for c in sorted(chains)])
        if with_timestamps:
            return current, csi, np.asarray(stamps[min(stamps)], dtype=np.int64)
        return current, csi

    for m in records:
        if m.device_id != current:
            if current is not None:
                yield flush()
            current, chains, stamps = m.device_id, {}, {}
        chains.setdefault(m.rx_chain, []).append(m.csi)
        stamps.setdefault(m.rx_chain, []).append(m.timestamp_us)
    if current is not None:
        yield flush()


def fingerprint_sets(config, arrays, n_csi_values, mode="per-chain"):
    """``{n_csi: {device: fingerprint array}}`` from ``(device, csi array)`` pairs."""
    out = {n: {} for n in n_csi_values}
    for dev, csi in arrays:
        for n in n_csi_values:
            out[n][dev] = extract_fingerprints(config, csi, n, mode)
    return out


def simulate_fingerprints(config, settings, n_csi_values=DEFAULT_N_CSI, mode="per-chain"):
    """Library and probe fingerprints for every device, keyed ``[room][n_csi][device]``."""
    profiles = device_profiles(config, settings)
    return {
        room: fingerprint_sets(
            config,
            ((p.device_id, simulate_device_array(config, settings, p, room)) for p in profiles),
            n_csi_values,
            mode,
        )
        for room in ROOMS
    }


# ---------------------------------------------------------------------------
# scores and operating points


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """KNN distances of legitimate and attacker probes against one identity."""

    legit: np.ndarray
    attack: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "legit", np.asarray(self.legit, dtype=float).ravel())
        object.__setattr__(self, "attack", np.asarray(self.attack, dtype=float).ravel())


@dataclass(frozen=True)
class OperatingPoint:
    far_cap: float
    threshold: float
    adr: float
    far: float
    n_legit: int = 0
    n_attack: int = 0
    rejected_legit: int = 0
    rejected_attack: int = 0


def _as_scores(scores):
    if isinstance(scores, ScoreSet):
        return scores
    legit, attack = scores
    return ScoreSet(legit, attack)


def operating_point(scores, threshold, far_cap=math.nan):
    """ADR/FAR of a fixed threshold (reject when distance > threshold)."""
    s = _as_scores(scores)
    rej_l = int(np.count_nonzero(s.legit > threshold))
    rej_a = int(np.count_nonzero(s.attack > threshold))
    return OperatingPoint(
        far_cap, float(threshold), rej_a / s.attack.size, rej_l / s.legit.size,
        s.legit.size, s.attack.size, rej_l, rej_a,
    )


def adr_at_far(scores, far_cap):
    """Best ADR subject to FAR <= ``far_cap``.

    The threshold is the smallest one meeting the cap; since ADR can only
    fall as the threshold grows this maximises ADR.  It is always a
    legitimate score value (ties accept), or ``-inf`` for ``far_cap = 1``.
    """
    s = _as_scores(scores)
    if s.legit.size == 0 or s.attack.size == 0:
        raise ConfigError("both legitimate and attacker scores are required")
    return operating_point(s, threshold_for_far(s.legit, far_cap), far_cap)


def candidate_thresholds(scores):
    """Midpoints between consecutive distinct scores, plus -inf and +inf."""
    s = _as_scores(scores)
    u = np.unique(np.concatenate([s.legit, s.attack]))
    return np.concatenate([[-np.inf], 0.5 * (u[:-1] + u[1:]), [np.inf]])


def roc_curve(scores, max_points=None):
    """Stepwise ROC as ``(far, adr)`` pairs sorted by increasing FAR.

    With ``max_points`` an evenly spaced subset of the candidate thresholds
    is swept (the two sentinels are always kept).
    """
    s = _as_scores(scores)
    if s.legit.size == 0 or s.attack.size == 0:
        raise ConfigError("both legitimate and attacker scores are required")
    t = candidate_thresholds(s)
    if max_points is not None and max_points < t.size:
        if max_points < 2:
            raise ConfigError("max_points must be at least 2")
        t = t[np.unique(np.round(np.linspace(0, t.size - 1, max_points)).astype(int))]
    legit = np.sort(s.legit)
    attack = np.sort(s.attack)
    far = (legit.size - np.searchsorted(legit, t, side="right")) / legit.size
    adr = (attack.size - np.searchsorted(attack, t, side="right")) / attack.size
    order = np.lexsort((adr, far))
    return [(float(far[i]), float(adr[i])) for i in order]


def roc_auc(curve):
    far = np.array([p[0] for p in curve])
    adr = np.array([p[1] for p in curve])
    return float(np.sum(np.diff(far) * 0.5 * (adr[1:] + adr[:-1])))


# ---------------------------------------------------------------------------
# rotation protocol


@dataclass
class RotationResult:
    """Scores for each legitimate role; ``attacks[legit][attacker]`` are distances."""

    legit: dict = field(default_factory=dict)
    attacks: dict = field(default_factory=dict)
    library_loo: dict = field(default_factory=dict)

    @property
    def devices(self):
        return list(self.legit)

    def scores(self, device):
        return ScoreSet(self.legit[device], np.concatenate(list(self.attacks[device].values())))

    def n_cells(self):
        return sum(len(v) for v in self.attacks.values())


def build_library(library_fps, config_digest=None):
    lib = FingerprintLibrary(config_digest=config_digest)
    for dev, fps in library_fps.items():
        lib = enroll(lib, dev, list(fps), dedup=False)
    return lib


def balanced_probes(probes, n, seed, legit_id, attacker_id):
    """Down-sample an attacker's probes to ``n`` rows with a per-cell seed."""
    if probes.shape[0] <= n:
        return probes
    idx = np.sort(rng_for(seed, 3, id_key(legit_id), id_key(attacker_id)).choice(probes.shape[0], n, replace=False))
    return probes[idx]


def run_rotation(library, probe_fps, params=None, seed=0, loo=True, workers=1):
    """Score every (legitimate, attacker) cell.

    ``library`` is a :class:`FingerprintLibrary` or ``{device: fingerprint array}``;
    ``probe_fps`` maps device to its probe fingerprint array.  Attacker probe
    counts are balanced to the legitimate probe count.  Cells use derived
    seeds, so ``workers > 1`` gives bit-identical results.
    """
    params = params or MatcherParams()
    if not isinstance(library, FingerprintLibrary):
        library = build_library(library)
    devices = library.identities
    missing = [d for d in devices if d not in probe_fps] + [d for d in probe_fps if d not in library.entries]
    if missing:
        raise ConfigError(f"devices lack library or probe data: {sorted(set(missing))}")

    def one(dev):
        legit = knn_distances(library, params, dev, probe_fps[dev])
        n = probe_fps[dev].shape[0]
        attacks = {
            other: knn_distances(library, params, dev, balanced_probes(probe_fps[other], n, seed, dev, other))
            for other in devices
            if other != dev
        }
        lo = leave_one_out_distances(library, params, dev) if loo and library.size(dev) > 1 else None
        return dev, legit, attacks, lo

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(one, devices))
    else:
        parts = [one(d) for d in devices]
    result = RotationResult()
    for dev, legit, attacks, lo in parts:
        result.legit[dev] = legit
        result.attacks[dev] = attacks
        if lo is not None:
            result.library_loo[dev] = lo
    return result


@dataclass(frozen=True)
class GridCell:
    """Mean operating point over legitimate roles for one (n_csi, far_cap)."""

    n_csi: int
    far_cap: float
    adr: float
    far: float
    adr_calibrated: float
    far_calibrated: float
    per_device: tuple = ()


def summarize(rotation, n_csi, far_cap):
    """Oracle-style (threshold on test scores) and deployment-style (threshold from library) ADR/FAR."""
    oracle, calibrated = [], []
    for dev in rotation.devices:
        s = rotation.scores(dev)
        oracle.append(adr_at_far(s, far_cap))
        if dev in rotation.library_loo:
            calibrated.append(operating_point(s, threshold_for_far(rotation.library_loo[dev], far_cap), far_cap))
    mean = lambda pts, attr: float(np.mean([getattr(p, attr) for p in pts])) if pts else math.nan  # noqa: E731
    return GridCell(
        n_csi,
        far_cap,
        mean(oracle, "adr"),
        mean(oracle, "far"),
        mean(calibrated, "adr"),
        mean(calibrated, "far"),
        tuple(zip(rotation.devices, oracle)),
    )


def evaluate_grid(fingerprints, n_csi_values=DEFAULT_N_CSI, far_caps=DEFAULT_FAR_CAPS, params=None, seed=0, workers=1):
    """ADR grid over n_csi and FAR caps from ``fingerprints[room][n_csi][device]``."""
    cells = []
    rotations = {}
    for n in n_csi_values:
        rot = run_rotation(fingerprints["room_a"][n], fingerprints["room_b"][n], params, seed, workers=workers)
        rotations[n] = rot
        cells.extend(summarize(rot, n, cap) for cap in far_caps)
    return cells, rotations


def run_simulated_evaluation(config, settings=None, n_csi_values=DEFAULT_N_CSI, far_caps=DEFAULT_FAR_CAPS,
                             params=None, mode="per-chain", workers=1):
    settings = settings or SimulationSettings()
    fps = simulate_fingerprints(config, settings, n_csi_values, mode)
    return evaluate_grid(fps, n_csi_values, far_caps, params, settings.seed, workers)


def same_model_comparison(config, settings, n_csi, seeds, correlation=0.9, params=None):
    """Mean ADR at FAR=0 for independent vs correlated profiles, per seed.

    Both arms share every seed and setting except the profile correlation.
    Returns a list of ``(seed, adr_independent, adr_correlated)``.
    """
    out = []
    for sd in seeds:
        arms = []
        for rho in (0.0, correlation):
            s = SimulationSettings(**{**settings.to_dict(), "seed": sd, "correlation": rho})
            cells, _ = run_simulated_evaluation(config, s, (n_csi,), (0.0,), params)
            arms.append(cells[0].adr)
        out.append((sd, arms[0], arms[1]))
    return out


# ---------------------------------------------------------------------------
# stability


@dataclass(frozen=True, eq=False)
class StabilityReport:
    """Per-device, per-tone sample variances of extracted fingerprints."""

    tones: np.ndarray
    complex_var: dict
    amplitude_var: dict
    phase_var: dict

    def rows(self):
        for dev in self.complex_var:
            for i, tone in enumerate(self.tones):
                yield (dev, int(tone), float(self.complex_var[dev][i]), float(self.amplitude_var[dev][i]),
                       float(self.phase_var[dev][i]))

    def top_tones(self, device, n=3, kind="complex"):
        table = {"complex": self.complex_var, "amplitude": self.amplitude_var, "phase": self.phase_var}[kind]
        return [int(self.tones[i]) for i in np.argsort(table[device])[::-1][:n]]


def stability_report(fingerprints_by_device, tones=None):
    """Variance of each tone across a device's fingerprints.

    Complex variance is ``E|f - mean f|^2``; phase variance is taken about
    the circular mean so it is insensitive to the +/-pi wrap.
    """
    cv, av, pv = {}, {}, {}
    width = None
    for dev, fps in fingerprints_by_device.items():
        x = np.stack([getattr(f, "values", f) for f in fps]) if not isinstance(fps, np.ndarray) else fps
        if x.shape[0] < 2:
            raise ConfigError(f"device {dev!r} needs at least two fingerprints")
        width = x.shape[1]
        # shifting by the first sample keeps identical inputs exactly at zero
        y = x - x[0]
        cv[dev] = np.sum(np.abs(y - y.mean(axis=0)) ** 2, axis=0) / (x.shape[0] - 1)
        av[dev] = np.var(np.abs(x) - np.abs(x[0]), axis=0, ddof=1)
        # phases relative to the first sample, then re-centred on their circular mean
        d = np.angle(x * x[0].conj())
        c = np.angle(np.mean(np.exp(1j * d), axis=0))
        pv[dev] = np.var(np.angle(np.exp(1j * (d - c))), axis=0, ddof=1)
    if width is None:
        raise ConfigError("no fingerprints supplied")
    tones = np.arange(width) if tones is None else np.asarray(tones)
    return StabilityReport(tones, cv, av, pv)
