"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 sampling failure, 4 I/O
error, 5 mask/scene cardinality mismatch, 6 infeasible design constraint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .directivity import preset
from .errors import (
    CardinalityError,
    DesignError,
    FormatError,
    InfeasibleRoomError,
    NdfError,
    PlanningError,
    SamplingError,
)
from .filters import beampattern, design_ls_beamformer
from .formats import validate_manifest, write_tensor
from .geometry import build_array
from .harness import (
    ExperimentConfig,
    evaluate_manifest,
    run_aperture_sweep,
    run_bandpass_probe,
    run_interferer_demo,
    run_stereo_demo,
)
from .scenes import DEFAULT_CONFIG, build_dataset, resolve_config

log = logging.getLogger("ndfkit")

EXIT_CONFIG, EXIT_SAMPLING, EXIT_IO, EXIT_CARDINALITY, EXIT_INFEASIBLE = 2, 3, 4, 5, 6


class ConfigError(NdfError):
    pass


def load_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def apply_overrides(cfg, overrides, template=None):
    """Apply ``dotted.key=value`` overrides; keys must already exist in ``template`` (or ``cfg``)."""
    template = template if template is not None else cfg
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node, tnode = cfg, template
        for p in parts[:-1]:
            if not isinstance(tnode, dict) or p not in tnode:
                raise ConfigError(f"override addresses unknown key {key!r}")
            tnode = tnode[p]
            node = node.setdefault(p, {})
        if not isinstance(tnode, dict) or parts[-1] not in tnode:
            raise ConfigError(f"override addresses unknown key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value
    return cfg


def _seed_from_env(cfg, key="seed"):
    env = os.environ.get("NDF_SEED")
    if env is not None:
        try:
            cfg[key] = int(env)
        except ValueError as exc:
            raise ConfigError(f"NDF_SEED must be an integer, got {env!r}") from exc
    return cfg


def _experiment(args):
    raw = load_config(args.config)
    base = ExperimentConfig().to_dict()
    merged = {**base, **raw}
    apply_overrides(merged, args.override, base)
    if args.output:
        merged["output_dir"] = args.output
    _seed_from_env(merged)
    try:
        return ExperimentConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_dataset(args):
    raw = load_config(args.config)
    apply_overrides(raw, args.override, DEFAULT_CONFIG)
    _seed_from_env(raw)
    try:
        resolve_config(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not Path(args.corpus).is_dir():
        raise FileNotFoundError(f"corpus directory not found: {args.corpus}")
    path = build_dataset(raw, args.corpus, args.output, workers=args.workers)
    print(path)
    return 0


def cmd_design(args):
    array = build_array(args.diameter)
    pattern = preset(args.pattern, args.steering)
    w = design_ls_beamformer(array, pattern, wng_min_db=args.wng_min)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "weights.ndfm", w.weights.astype(np.complex64), role="weights")
    with open(out / "wng.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["freq_hz", "wng_db", "residual"])
        for f, g, r in zip(w.freqs, w.wng_db, w.residual):
            wr.writerow([f"{f:g}", f"{g:.6f}", f"{r:.6g}"])
    resp = np.abs(beampattern(w, array))
    with open(out / "beampattern.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["theta_deg"] + [f"{f:g}" for f in w.freqs])
        for a in range(resp.shape[1]):
            wr.writerow([a] + [f"{20 * np.log10(max(v, 1e-12)):.4f}" for v in resp[:, a]])
    (out / "design.json").write_text(json.dumps({
        "diameter": args.diameter, "pattern": pattern.to_dict(), "wng_min_db": args.wng_min,
        "achieved_min_wng_db": float(np.min(w.wng_db))}, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def cmd_eval(args):
    rep = evaluate_manifest(args.manifest, args.filter, args.pattern, args.mask_dir,
                            None if args.steering is None else [args.steering], args.wng_min)
    rep.save(args.output)
    print(f"SDR {rep.sdr_db:.2f} dB over {len(rep.sdr_per_sample)} samples -> {args.output}")
    return 0


def cmd_probe(args):
    reports = run_bandpass_probe(_experiment(args))
    for k, r in reports.items():
        print(f"{k}: SDR {r.sdr_db:.2f} dB")
    return 0


def cmd_sweep(args):
    cfg = _experiment(args)
    reports = run_aperture_sweep(cfg)
    for (d, s), r in reports.items():
        print(f"diameter {d:g} m, SNR {s:g} dB: SDR {r.sdr_db:.2f} dB")
    return 0


def cmd_demo_interferer(args):
    summary = run_interferer_demo(_experiment(args))
    print(f"target VDM vs reference: {summary['target_vdm_minus_reference_db']:.2f} dB")
    return 0


def cmd_demo_stereo(args):
    run_stereo_demo(_experiment(args))
    return 0


def cmd_validate(args):
    report = validate_manifest(args.manifest, args.sample)
    for v in report.violations:
        print(v)
    print(f"{len(report.violations)} violation(s), {len(report.checked_scenes)} scene(s) checked")
    return 0 if report.ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="ndfkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--output", "-o", default="out")
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    sp = sub.add_parser("dataset", help="render scenes and write a manifest")
    common(sp)
    sp.add_argument("--corpus", required=True, help="directory of mono 16 kHz WAV clips")
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("design", help="design an LS beamformer and export WNG/beampattern data")
    common(sp, config=False)
    sp.add_argument("--diameter", type=float, default=0.03)
    sp.add_argument("--pattern", default="dma1")
    sp.add_argument("--steering", type=float, default=0.0)
    sp.add_argument("--wng-min", type=float, default=-15.0)
    sp.set_defaults(func=cmd_design)

    sp = sub.add_parser("eval", help="evaluate a filter over a manifest")
    common(sp, config=False)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--filter", choices=("oracle", "ls", "external"), default="oracle")
    sp.add_argument("--pattern", default=None, help="preset name; defaults to the manifest pattern")
    sp.add_argument("--mask-dir")
    sp.add_argument("--steering", type=float, default=None)
    sp.add_argument("--wng-min", type=float, default=-15.0)
    sp.set_defaults(func=cmd_eval)

    for name, func, text in (("probe", cmd_probe, "bandpass probe"), ("sweep", cmd_sweep, "aperture/SNR sweep"),
                             ("demo-interferer", cmd_demo_interferer, "moving interferer demo"),
                             ("demo-stereo", cmd_demo_stereo, "stereo steering demo")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("validate", help="check a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--sample", type=int, default=None, help="stem-check this many random scenes")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PlanningError) as exc:
        code, msg = EXIT_CONFIG, exc
    except SamplingError as exc:
        code, msg = EXIT_SAMPLING, exc
    except CardinalityError as exc:
        code, msg = EXIT_CARDINALITY, exc
    except (DesignError, InfeasibleRoomError) as exc:
        code, msg = EXIT_INFEASIBLE, exc
    except (OSError, FormatError) as exc:
        code, msg = EXIT_IO, exc
    except (NdfError, ValueError) as exc:
        code, msg = EXIT_CONFIG, exc
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
