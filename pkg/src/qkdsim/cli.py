"""Command-line front end: scenario runs, key rates, sweeps, calibration.

Subcommands map one-to-one onto the library's orchestration operations:

  simulate    run a scenario file, write windows.csv and summary.json
  keyrate     evaluate finite-key length for tally blocks from a JSON file
  sweep-loss  evaluate the analytic key-rate model across fiber losses
  calibrate   fit hardware unknowns to measured targets, write a scenario
  optimize    grid-plus-simplex search of source parameters for a channel

Exit codes, uniform across subcommands:

  0  success
  1  usage or configuration error (bad flags, malformed JSON, invalid
     scenario or config fields)
  2  infeasible result (decoy bounds with no feasible single-photon
     count, calibration targets no channel can meet)
  3  I/O error (missing input file, unwritable output path)

QKDSIM_THREADS caps sweep concurrency; QKDSIM_PURE_NUMPY=1 selects the
pure-numpy dead-time kernel. Both are read by the library, not here.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from qkdsim.channel import ChannelError
from qkdsim.harness import (
    SWEEP_CSV_COLUMNS,
    CalibrationError,
    HarnessError,
    OutputError,
    Scenario,
    _atomic_write,
    _csv_text,
    calibrate,
    emit_outputs,
    loss_sweep,
    run_scenario,
)
from qkdsim.keyrate import (
    ChannelSummary,
    TallyBlock,
    optimize_parameters,
    secret_key_length,
)
from qkdsim.link import LinkError
from qkdsim.protocol import ConfigError, ProtocolConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_IO = 3

_USAGE_ERRORS = (ConfigError, ChannelError, LinkError,
                 HarnessError, ValueError, KeyError, TypeError)


class _CliUsageError(Exception):
    """Bad flags or malformed inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse's default parse failure exits with status 2, which this
    # interface reserves for infeasible results
    def error(self, message):
        raise _CliUsageError(message)


def _read_json(path: str) -> dict:
    try:
        with open(path) as handle:
            return json.load(handle)
    except OSError as exc:
        raise OutputError(f"failed reading {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise _CliUsageError(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path: str, payload: dict):
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_scenario(path: str) -> Scenario:
    return Scenario.from_dict(_read_json(path))


def _cmd_simulate(args) -> int:
    result = run_scenario(_load_scenario(args.scenario))
    paths = emit_outputs(result, args.out)
    print(json.dumps({"out": paths,
                      "total_skr_bps": result.total_skr_bps,
                      "scenario_digest": result.scenario.digest()},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _blocks_from_payload(payload: dict) -> list[TallyBlock]:
    if "config" not in payload or "blocks" not in payload:
        raise _CliUsageError("tallies file needs 'config' and 'blocks'")
    cfg = ProtocolConfig.from_dict(payload["config"])
    blocks = []
    for entry in payload["blocks"]:
        data = dict(entry)
        data.setdefault("mode", 0)
        blocks.append(TallyBlock(cfg=cfg, **data))
    if not blocks:
        raise _CliUsageError("tallies file contains no blocks")
    return blocks


def _cmd_keyrate(args) -> int:
    blocks = _blocks_from_payload(_read_json(args.tallies))
    donors = {b.mode: b for b in blocks if b.n_x > 0}
    results = {}
    infeasible = False
    for block in blocks:
        donor = None
        if block.n_x == 0:
            donor = next((d for m, d in sorted(donors.items())
                          if m != block.mode), None)
        res = secret_key_length(block, x_donor=donor)
        infeasible = infeasible or res.infeasible
        results[str(block.mode)] = res.to_dict()
    print(json.dumps({"results": results}, indent=2, sort_keys=True))
    return EXIT_INFEASIBLE if infeasible else EXIT_OK


def _parse_losses(text: str) -> list[float]:
    try:
        losses = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise _CliUsageError(f"bad --losses list {text!r}: {exc}") from exc
    if not losses:
        raise _CliUsageError("--losses needs at least one value")
    return losses


def _cmd_sweep_loss(args) -> int:
    scenario = _load_scenario(args.scenario)
    points = loss_sweep(scenario, _parse_losses(args.losses))
    path = f"{args.out}/sweep.csv"
    _atomic_write(path, _csv_text(SWEEP_CSV_COLUMNS,
                                  [p.csv_row() for p in points]))
    print(json.dumps({"out": {"sweep_csv": path},
                      "points": len(points)}, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    targets = _read_json(args.targets)
    template = _load_scenario(args.scenario)
    fitted, diagnostics = calibrate(targets, template)
    _write_json(args.out, fitted.to_dict())
    print(json.dumps({"out": args.out, "diagnostics": diagnostics},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_optimize(args) -> int:
    payload = _read_json(args.channel)
    base = None
    if "config" in payload:
        base = ProtocolConfig.from_dict(payload.pop("config"))
    summary = ChannelSummary.from_dict(payload)
    cfg, diagnostics = optimize_parameters(summary, base=base)
    _write_json(args.out, {"config": json.loads(cfg.to_json()),
                           "diagnostics": diagnostics})
    print(json.dumps({"out": args.out,
                      "objective_skr": diagnostics["objective_skr"]},
                     indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qkdsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario, write outputs")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("keyrate", help="finite-key evaluation of tallies")
    p.add_argument("--tallies", required=True,
                   help="JSON with 'config' and 'blocks'")
    p.set_defaults(func=_cmd_keyrate)

    p = sub.add_parser("sweep-loss", help="key rate across fiber losses")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--losses", required=True,
                   help="comma-separated losses in dB")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sweep_loss)

    p = sub.add_parser("calibrate", help="fit hardware unknowns to targets")
    p.add_argument("--targets", required=True, help="targets JSON file")
    p.add_argument("--scenario", required=True,
                   help="template scenario JSON file")
    p.add_argument("--out", required=True, help="fitted scenario JSON path")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("optimize", help="source parameter search")
    p.add_argument("--channel", required=True,
                   help="channel summary JSON file")
    p.add_argument("--out", required=True, help="result JSON path")
    p.set_defaults(func=_cmd_optimize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CalibrationError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OutputError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
