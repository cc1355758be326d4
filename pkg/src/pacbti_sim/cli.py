"""pacbti-sim command line."""

import argparse
import json
import os
import socket
import sys

from . import attestation as att
from .assembler import (
    AssemblySyntaxError, ImageOverflow, InstrumentConfig, UnresolvedLabel, assemble, instrument, parse,
)
from .device import Device
from .image import ProgramImage
from .machine import PacbtiControl
from .runpba import parse_its
from .harness import (
    ScenarioError, check_expectations, check_invariants, execute_scenario, load_scenario, suite,
)


def cmd_asm(args):
    with open(args.input) as f:
        text = f.read()
    try:
        program = parse(text)
        image = assemble(instrument(program, InstrumentConfig(args.pac, args.bti)))
    except (AssemblySyntaxError, UnresolvedLabel, ImageOverflow) as e:
        print(f"{args.input}: {e}", file=sys.stderr)
        return 1
    with open(args.output, "wb") as f:
        f.write(image.to_bytes())
    print(f"{args.output}: {len(program.functions)} functions, {image.code_units} code units, "
          f"entry {image.entry:#010x}")
    return 0


def _print_trace(device, out):
    for t in device.trace:
        op = t.op or "?"
        print(f"{t.step:8d} {t.world.name:10s} {t.pc:#010x} {op:8s} {'P' if t.privileged else 'U'}", file=out)
    for e in device.events:
        print(f"{e.step:8d} event {e.kind} {e.detail if e.detail is not None else ''}", file=out)


def cmd_run(args):
    script = load_scenario(args.scenario)
    try:
        run = execute_scenario(script, record_trace=args.trace or bool(args.save_device))
    except ScenarioError as e:
        problems = check_expectations(script, error=e)
        print(f"{script.name}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1 if problems else 0
    text = run.report.to_json()
    if args.trace:
        _print_trace(run.device, sys.stdout)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    if args.save_device:
        run.device.save_state(args.save_device)
    problems = check_expectations(script, run.report) + check_invariants(run)
    for p in problems:
        print(f"{script.name}: {p}", file=sys.stderr)
    return 1 if problems else 0


def cmd_suite(args):
    results = suite(args.directory)
    width = max((len(r.name) for r in results), default=4)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}")
        for p in r.failures:
            print(f"{'':<{width}}    {p}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} scenarios passed")
    return 1 if failed else 0


def cmd_faults(args):
    path = os.path.join(args.directory, "its.bin")
    try:
        with open(path, "rb") as f:
            records = parse_its(f.read())
    except (OSError, ValueError) as e:
        print(f"{path}: {e}", file=sys.stderr)
        return 1
    meta_path = os.path.join(args.directory, "device.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        print(f"lifecycle {meta['lifecycle']}  boot_epoch {meta['boot_epoch']}")
    print(f"{'seq':>5}  {'kind':<18} {'fault_pc':<10}  {'epoch':>5}")
    for r in records:
        print(f"{r.sequence:>5}  {r.kind.name:<18} {r.fault_pc:#010x}  {r.boot_epoch:>5}")
    return 0


def _load_device(target):
    if os.path.isdir(target):
        dev = Device.load_state(target)
    elif target.endswith(".toy"):
        return execute_scenario(load_scenario(target)).device
    else:
        with open(target, "rb") as f:
            dev = Device(ProgramImage.from_bytes(f.read()), features=PacbtiControl.all_on()).provision()
    if not dev.machine.halted:
        dev.step_once()     # secure boot programs PACBTI and hands over to the NSPE
    return dev


def cmd_attest(args):
    dev = _load_device(args.device)
    endpoint = att.AttestationEndpoint(dev)
    host, port = att.parse_addr(args.listen)
    with socket.create_server((host, port)) as srv:
        print(f"listening on {host}:{srv.getsockname()[1]}", flush=True)
        served = 0
        while args.count is None or served < args.count:
            conn, _ = srv.accept()
            with conn:
                try:
                    endpoint.serve_connection(att.SocketTransport(conn))
                except att.TransportClosed:
                    pass
            served += 1
    return 0


def _read_key(path):
    with open(path, "rb") as f:
        raw = f.read()
    try:
        return bytes.fromhex(raw.decode().strip())
    except (UnicodeDecodeError, ValueError):
        return raw


def cmd_verify(args):
    key = _read_key(args.key)
    nonce = bytes.fromhex(args.nonce) if args.nonce else None
    transport = att.SocketTransport.connect(args.connect)
    try:
        claims = att.challenge_response(transport, key, nonce)
    except att.AttestationError as e:
        print(f"verification failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        transport.close()
    out = {"verified": True, "nonce": claims.nonce.hex(), "instance_id": claims.instance_id.hex()}
    out.update(claims.as_dict())
    print(json.dumps(out, indent=2))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="pacbti-sim", description="PAC/BTI device simulator with runtime attestation")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("asm", help="assemble (and optionally instrument) a program")
    a.add_argument("input")
    a.add_argument("-o", "--output", required=True)
    a.add_argument("--pac", action="store_true")
    a.add_argument("--bti", action="store_true")
    a.set_defaults(func=cmd_asm)

    r = sub.add_parser("run", help="run one scenario and print its report")
    r.add_argument("scenario")
    r.add_argument("--report", help="write the report here instead of stdout")
    r.add_argument("--trace", action="store_true", help="print the instruction trace and events")
    r.add_argument("--save-device", metavar="DIR", help="save device state (ITS, lifecycle, key) to DIR")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run every scenario in a directory")
    s.add_argument("directory")
    s.set_defaults(func=cmd_suite)

    f = sub.add_parser("faults", help="list fault records in a saved device state")
    f.add_argument("directory")
    f.set_defaults(func=cmd_faults)

    t = sub.add_parser("attest", help="serve attestation challenges for a device")
    t.add_argument("device", help="device state dir, scenario (.toy) or program image")
    t.add_argument("--listen", required=True, metavar="HOST:PORT")
    t.add_argument("--count", type=int, help="exit after this many connections")
    t.set_defaults(func=cmd_attest)

    v = sub.add_parser("verify", help="challenge a device and verify its token")
    v.add_argument("--nonce-random", action="store_true", default=True,
                   help="use a fresh random nonce (the default)")
    v.add_argument("--nonce", help="fixed nonce as 64 hex digits (testing only)")
    v.add_argument("--connect", required=True, metavar="HOST:PORT")
    v.add_argument("--key", required=True, help="verifier key file (hex or raw)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ScenarioError) as e:
        print(f"pacbti-sim: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
