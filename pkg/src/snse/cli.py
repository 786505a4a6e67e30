"""Command line entry point: ``snse <subcommand>``.

    snse make-field --N 16 --eps0 0.05 --out field.json
    snse decompose --in field.json --eps0 0.05 --out pieces/
    snse run --config run.toml --out records.jsonl
    snse verify --records records.jsonl --report report.json
    snse replay --record records.jsonl --path-id 3

The worker count for ``run`` comes from ``--workers`` or the SNSE_WORKERS
environment variable.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .cascade import decompose, dyadic_datum
from .io import load_field, save_field
from .spectral import SpectralField, lattice, sobolev_norm

MANIFEST_SCHEMA = "snse.decomposition/1"


def _make_field(args) -> int:
    rng = np.random.default_rng(args.seed)
    f = dyadic_datum(lattice(args.N), rng, args.eps0, args.ratio, args.slope)
    save_field(args.out, f, args.delta)
    print(f"wrote {args.out}: N={args.N}, |u0|_H1/2 = {sobolev_norm(f, 0.5):.6g}")
    return 0


def _decompose(args) -> int:
    field, stored_delta = load_field(args.input)
    delta = args.delta if args.delta is not None else (stored_delta or 0.25)
    dec = decompose(field, args.eps0, delta, args.k_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pieces = []
    for k in range(dec.k_max + 1):
        name = f"piece_{k}.json"
        save_field(out / name, SpectralField(field.lattice, dec.pieces.coeffs[k], True), delta)
        pieces.append(name)
    manifest = {"schema": MANIFEST_SCHEMA, "source": str(args.input), "pieces": pieces}
    manifest.update(dec.manifest())
    manifest["M_data"] = manifest.pop("data_bounds")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"{dec.k_max + 1} pieces, defect {dec.defect:.3g}, bounds hold: {dec.bounds_hold()}")
    return 0


def _load_config(args) -> harness.RunConfig:
    config = harness.RunConfig.load(args.config) if args.config else harness.RunConfig()
    overrides = {}
    for key in ("paths", "seed", "save_stride"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return config.replace(**overrides) if overrides else config


def _run(args) -> int:
    config = _load_config(args)
    records = harness.run_ensemble(config, workers=args.workers)
    n = harness.write_records(args.out, config, records)
    print(f"wrote {n} path records to {args.out} (config {config.config_hash})")
    return 0


def _verify(args) -> int:
    config, records = harness.read_records(args.records)
    if args.config:
        other = harness.RunConfig.load(args.config)
        if other.config_hash != config.config_hash:
            print(f"config {other.config_hash} does not match records ({config.config_hash})",
                  file=sys.stderr)
            return 2
    report = harness.analyze(config, records)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, allow_nan=False) + "\n")
    for name, check in report["checks"].items():
        print(f"{check['status']:8s} {name}")
    print(f"P(tau < T) = {report['p_stop']:.4f} over {report['paths']} paths")
    return 0 if report["passed"] else 1


def _replay(args) -> int:
    config, records = harness.read_records(args.record)
    if args.config:
        config = harness.RunConfig.load(args.config)
    chosen = [r for r in records if args.path_id is None or r.path_id == args.path_id]
    if not chosen:
        print(f"no record with path id {args.path_id}", file=sys.stderr)
        return 2
    bad = 0
    for rec in chosen:
        try:
            new = harness.replay(rec, config, args.save_stride)
        except harness.ReplayError as exc:
            print(f"refused: {exc}", file=sys.stderr)
            return 2
        if args.save_stride is not None:
            ok = harness.is_subsequence(rec, new) or harness.is_subsequence(new, rec)
            where = [] if ok else ["samples"]
        else:
            ok = new.to_json() == rec.to_json()
            where = [] if ok else harness.locate_mismatch(rec, new)
        if ok:
            print(f"path {rec.path_id}: identical")
        else:
            bad += 1
            print(f"path {rec.path_id}: MISMATCH at {', '.join(where[:5])}")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snse", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-field", help="write a random band-structured initial field")
    s.add_argument("--N", type=int, default=16)
    s.add_argument("--eps0", type=float, default=0.05)
    s.add_argument("--delta", type=float, default=0.25)
    s.add_argument("--ratio", type=float, default=0.2)
    s.add_argument("--slope", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_make_field)

    s = sub.add_parser("decompose", help="split a field into frequency pieces")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--eps0", type=float, required=True)
    s.add_argument("--delta", type=float, default=None)
    s.add_argument("--k-max", type=int, default=5)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_decompose)

    s = sub.add_parser("run", help="simulate an ensemble of cascade paths")
    s.add_argument("--config", help="TOML or JSON run configuration")
    s.add_argument("--out", required=True)
    s.add_argument("--paths", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--save-stride", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=_run)

    s = sub.add_parser("verify", help="check ensemble statistics; exit 1 on any FAIL")
    s.add_argument("--records", required=True)
    s.add_argument("--config")
    s.add_argument("--report")
    s.set_defaults(func=_verify)

    s = sub.add_parser("replay", help="regenerate records from their seeds and compare")
    s.add_argument("--record", required=True, help="records file")
    s.add_argument("--path-id", type=int)
    s.add_argument("--config")
    s.add_argument("--save-stride", type=int)
    s.set_defaults(func=_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"snse: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
