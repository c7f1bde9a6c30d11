"""Command-line pipeline: simulate -> extract -> enroll -> auth, plus evaluate / roc / stability.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import MicroCsiError
from .evaluation import (
    ROOMS,
    DEFAULT_FAR_CAPS,
    DEFAULT_N_CSI,
    DEFAULT_SIGMA,
    SimulationSettings,
    device_profiles,
    evaluate_grid,
    fingerprint_sets,
    records_to_arrays,
    roc_auc,
    roc_curve,
    run_rotation,
    simulate_room_records,
    stability_report,
    ScoreSet,
)
from .extraction import COMBINING_MODES, Fingerprint, extract_fingerprints
from .formats import (
    TraceReader,
    read_fingerprints,
    read_library,
    write_fingerprints,
    write_library,
    write_trace,
)
from .matcher import (
    FEATURE_VIEWS,
    FingerprintLibrary,
    MatcherParams,
    authenticate,
    calibrate_thresholds,
    enroll,
)
from .signal import build_config, config_from_dict

log = logging.getLogger("microcsi")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _db(text):
    return -math.inf if text.strip().lower() in ("-inf", "none") else float(text)


def _global_options(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="master random seed (default 0)")
    p.add_argument("--config", default=d(None), help="JSON signal configuration (dft_len, subcarrier_map, leak_halfwidth)")
    p.add_argument("--format", choices=("table", "csv"), default=d("table"), help="report format")
    p.add_argument("-v", "--verbose", action="count", default=d(0))


def _matcher_options(p):
    p.add_argument("--k", type=_positive_int, default=None, help="explicit K (default floor(sqrt(S)))")
    p.add_argument("--feature", choices=FEATURE_VIEWS, default="complex", help="distance feature view")


def _trace_options(p):
    p.add_argument("--data-dir", default=".", help="directory holding room_a.mcsi / room_b.mcsi")
    p.add_argument("--library-trace", default=None, help="enrolment trace (default DATA_DIR/room_a.mcsi)")
    p.add_argument("--probe-trace", default=None, help="probe trace (default DATA_DIR/room_b.mcsi)")
    p.add_argument("--mode", choices=COMBINING_MODES, default="per-chain", help="receive-chain combining")


def build_parser():
    common = _Parser(add_help=False)
    _global_options(common, suppress=True)
    parser = _Parser(prog="microcsi", description="Micro-CSI fingerprinting toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="simulate CSI traces for two rooms")
    p.add_argument("--devices", type=_positive_int, default=11)
    p.add_argument("--packets", type=_positive_int, default=60000)
    p.add_argument("--chains", type=_positive_int, default=2)
    p.add_argument("--magnitude-db", type=_db, default=-25.0, help="distortion RMS in dB ('-inf' for none)")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="per-tone noise standard deviation")
    p.add_argument("--smoothness", type=_unit_float, default=0.5)
    p.add_argument("--correlation", type=_unit_float, default=0.0, help="pairwise profile correlation")
    p.add_argument("--pulse", default="sinc", help="'sinc' or 'raised-cosine(beta)'")
    p.add_argument("--untruncated", action="store_true", help="do not cut the pulse at the leak window")
    p.add_argument("--chain-perturbation", type=float, default=0.0, help="RMS of per-chain fingerprint offsets")
    p.add_argument("--rooms", nargs="+", choices=ROOMS, default=list(ROOMS))
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("extract", parents=[common], help="extract fingerprints from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--n-csi", type=_positive_int, required=True, help="packets per fingerprint")
    p.add_argument("--mode", choices=COMBINING_MODES, default="per-chain")
    p.add_argument("--out", required=True, help="fingerprint file to write")

    p = sub.add_parser("enroll", parents=[common], help="build a library from fingerprint files")
    p.add_argument("--fingerprints", nargs="+", required=True)
    p.add_argument("--out", required=True, help="library file to write")
    p.add_argument("--identity", nargs="+", default=None, help="only enroll these identities")
    p.add_argument("--library", default=None, help="existing library to extend")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float, default=None, help="fixed decision threshold")
    g.add_argument("--far-cap", type=_unit_float, default=0.0, help="calibrate thresholds by leave-one-out")
    _matcher_options(p)

    p = sub.add_parser("auth", parents=[common], help="authenticate probes against a claimed identity")
    p.add_argument("--library", required=True)
    p.add_argument("--probes", required=True, help="fingerprint file with probe fingerprints")
    p.add_argument("--claim", required=True)
    p.add_argument("--probe-id", default=None, help="identity inside the probe file (default: the claim)")
    p.add_argument("--index", type=int, default=None, help="authenticate a single probe by position")
    p.add_argument("--threshold", type=float, default=None, help="override the library threshold")

    p = sub.add_parser("evaluate", parents=[common], help="device-rotation ADR/FAR grid")
    _trace_options(p)
    p.add_argument("--n-csi", type=_positive_int, nargs="+", default=list(DEFAULT_N_CSI))
    p.add_argument("--far-cap", type=_unit_float, nargs="+", default=list(DEFAULT_FAR_CAPS))
    p.add_argument("--report", default=None, help="write a JSON report here")
    _matcher_options(p)

    p = sub.add_parser("roc", parents=[common], help="ROC plot data (two columns: FAR ADR)")
    _trace_options(p)
    p.add_argument("--n-csi", type=_positive_int, default=200)
    p.add_argument("--device", default=None, help="legitimate role (default: all roles pooled)")
    p.add_argument("--max-points", type=_positive_int, default=None)
    p.add_argument("--out", default=None)
    _matcher_options(p)

    p = sub.add_parser("stability", parents=[common], help="per-subcarrier fingerprint variance")
    p.add_argument("--fingerprints", required=True)
    p.add_argument("--out", default=None, help="table output (default stdout)")
    p.add_argument("--plot-dir", default=None, help="write DEVICE_stability.dat two-column files here")
    return parser


# ---------------------------------------------------------------------------


def _load_config(args):
    if not args.config:
        return build_config()
    with open(args.config, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def _params(args, threshold=None):
    if args.k is not None:
        return MatcherParams("explicit", args.k, threshold, args.feature)
    return MatcherParams("sqrt_s", None, threshold, args.feature)


def _emit(text, path=None):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _table(rows, header, fmt):
    if fmt == "csv":
        return "\n".join(",".join(str(c) for c in r) for r in [header] + rows) + "\n"
    cells = [[str(c) for c in r] for r in [header] + rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"


def cmd_simulate(args):
    config = _load_config(args)
    settings = SimulationSettings(
        n_devices=args.devices,
        n_packets=args.packets,
        n_chains=args.chains,
        magnitude_db=args.magnitude_db,
        smoothness=args.smoothness,
        correlation=args.correlation,
        sigma=args.sigma,
        pulse=args.pulse,
        truncate=not args.untruncated,
        chain_perturbation_rms=args.chain_perturbation,
        seed=args.seed,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    profiles = device_profiles(config, settings)
    for room in args.rooms:
        path = os.path.join(args.out_dir, f"{room}.mcsi")
        n = write_trace(path, simulate_room_records(config, settings, room, profiles), config, settings.device_ids)
        log.info("wrote %d records to %s", n, path)
    with open(os.path.join(args.out_dir, "simulation.json"), "w", encoding="utf-8") as fh:
        json.dump({"settings": settings.to_dict(), "config": config.to_dict()}, fh, indent=2)
    return EXIT_OK


def _trace_fingerprints(path, n_csi_values, mode, expected_digest=None):
    with TraceReader(path, expected_digest) as r:
        return r.config, fingerprint_sets(r.config, records_to_arrays(r), n_csi_values, mode)


def cmd_extract(args):
    out = {}
    with TraceReader(args.trace) as r:
        config = r.config
        for dev, csi, ts in records_to_arrays(r, with_timestamps=True):
            vals = extract_fingerprints(config, csi, args.n_csi, args.mode)
            out[dev] = [
                Fingerprint(v, args.n_csi, csi.shape[0], dev, int(ts[(i + 1) * args.n_csi - 1]))
                for i, v in enumerate(vals)
            ]
    write_fingerprints(args.out, out, config)
    log.info("wrote %d fingerprints to %s", sum(len(v) for v in out.values()), args.out)
    return EXIT_OK


def cmd_enroll(args):
    params = _params(args, args.threshold)
    config = None
    if args.library:
        lib, _, config = read_library(args.library)
    else:
        lib = None
    for path in args.fingerprints:
        _, fps, cfg = read_fingerprints(path, config.digest if config else None)
        config = config or cfg
        lib = lib or FingerprintLibrary(config.digest)
        for ident, items in fps.items():
            if args.identity and ident not in args.identity:
                continue
            lib = enroll(lib, ident, items, config.digest)
    if lib is None or not lib.entries:
        raise MicroCsiError("no fingerprints enrolled")
    if args.threshold is None:
        lib = calibrate_thresholds(lib, params, args.far_cap)
    write_library(args.out, lib, config, params)
    rows = [[i, lib.size(i), params.k_for(lib.size(i)), _fmt_float(lib.thresholds.get(i, params.threshold))]
            for i in lib.identities]
    _emit(_table(rows, ["identity", "S", "K", "threshold"], args.format))
    return EXIT_OK


def _fmt_float(x):
    return "nan" if x is None else repr(float(x))


def cmd_auth(args):
    lib, params, config = read_library(args.library)
    params = params or MatcherParams()
    if args.threshold is not None:
        params = MatcherParams(params.k_rule, params.k_neighbors, args.threshold, params.feature)
        lib = FingerprintLibrary(lib.config_digest, dict(lib.entries), {})
    _, probes, _ = read_fingerprints(args.probes, config.digest)
    pid = args.probe_id
    if pid is None:
        pid = args.claim if args.claim in probes else (next(iter(probes)) if len(probes) == 1 else None)
    if pid not in probes:
        raise MicroCsiError(f"probe file has no fingerprints for {pid!r}; use --probe-id")
    items = probes[pid]
    if args.index is not None:
        if not 0 <= args.index < len(items):
            raise MicroCsiError(f"probe index {args.index} out of range (0..{len(items) - 1})")
        items = [items[args.index]]
    rows = []
    for i, fp in enumerate(items):
        d = authenticate(lib, params, args.claim, fp)
        rows.append([i if args.index is None else args.index, args.claim, repr(d.distance), repr(d.threshold),
                     "accepted" if d.accepted else "rejected"])
    _emit(_table(rows, ["probe", "claim", "distance", "threshold", "decision"], args.format))
    return EXIT_OK


def _eval_inputs(args, n_csi_values):
    lib_path = args.library_trace or os.path.join(args.data_dir, "room_a.mcsi")
    probe_path = args.probe_trace or os.path.join(args.data_dir, "room_b.mcsi")
    config, lib = _trace_fingerprints(lib_path, n_csi_values, args.mode)
    _, probes = _trace_fingerprints(probe_path, n_csi_values, args.mode, config.digest)
    return config, {"room_a": lib, "room_b": probes}


def grid_report(cells, config, seed):
    return {
        "config_digest": config.digest,
        "seed": seed,
        "grid": [
            {
                "n_csi": c.n_csi,
                "far_cap": c.far_cap,
                "adr": c.adr,
                "far": c.far,
                "adr_calibrated": c.adr_calibrated,
                "far_calibrated": c.far_calibrated,
                "per_device": {dev: {"threshold": p.threshold, "adr": p.adr, "far": p.far} for dev, p in c.per_device},
            }
            for c in cells
        ],
    }


def _pct(x):
    return "nan" if x != x else f"{100 * x:.2f}%"


def cmd_evaluate(args):
    n_values = list(dict.fromkeys(args.n_csi))
    config, fps = _eval_inputs(args, n_values)
    cells, _ = evaluate_grid(fps, n_values, args.far_cap, _params(args), args.seed)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(grid_report(cells, config, args.seed), fh, indent=2)
    if args.format == "csv":
        rows = [[c.far_cap, c.n_csi, repr(c.adr), repr(c.far), repr(c.adr_calibrated), repr(c.far_calibrated)]
                for c in cells]
        _emit(_table(rows, ["far_cap", "n_csi", "adr", "far", "adr_calibrated", "far_calibrated"], "csv"))
        return EXIT_OK
    by = {(c.far_cap, c.n_csi): c for c in cells}
    rows = []
    for cap in args.far_cap:
        label = "FAR=0%" if cap == 0 else f"FAR<={100 * cap:g}%"
        rows.append([f"ADR {label}"] + [_pct(by[cap, n].adr) for n in n_values])
        rows.append([f"ADR {label} (calibrated)"] + [_pct(by[cap, n].adr_calibrated) for n in n_values])
        rows.append([f"FAR {label} (calibrated)"] + [_pct(by[cap, n].far_calibrated) for n in n_values])
    _emit(_table(rows, ["n_csi"] + [str(n) for n in n_values], "table"))
    return EXIT_OK


def cmd_roc(args):
    _, fps = _eval_inputs(args, [args.n_csi])
    rot = run_rotation(fps["room_a"][args.n_csi], fps["room_b"][args.n_csi], _params(args), args.seed, loo=False)
    if args.device is not None:
        if args.device not in rot.legit:
            raise MicroCsiError(f"unknown device {args.device!r}")
        scores = rot.scores(args.device)
    else:
        parts = [rot.scores(d) for d in rot.devices]
        scores = ScoreSet(np.concatenate([p.legit for p in parts]), np.concatenate([p.attack for p in parts]))
    curve = roc_curve(scores, args.max_points)
    text = f"# far adr  (auc={roc_auc(curve):.6f})\n" + "".join(f"{f!r} {a!r}\n" for f, a in curve)
    _emit(text, args.out)
    return EXIT_OK


def cmd_stability(args):
    _, fps, config = read_fingerprints(args.fingerprints)
    rep = stability_report(fps, config.signed_subcarriers)
    rows = [[d, t, repr(c), repr(a), repr(p)] for d, t, c, a, p in rep.rows()]
    _emit(_table(rows, ["device", "tone", "complex_var", "amplitude_var", "phase_var"], args.format), args.out)
    if args.plot_dir:
        os.makedirs(args.plot_dir, exist_ok=True)
        for dev in rep.complex_var:
            with open(os.path.join(args.plot_dir, f"{dev}_stability.dat"), "w", encoding="utf-8") as fh:
                for t, v in zip(rep.tones, rep.complex_var[dev]):
                    fh.write(f"{int(t)} {float(v)!r}\n")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "enroll": cmd_enroll,
    "auth": cmd_auth,
    "evaluate": cmd_evaluate,
    "roc": cmd_roc,
    "stability": cmd_stability,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (MicroCsiError, OSError, ValueError, KeyError) as e:
        print(f"microcsi {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
