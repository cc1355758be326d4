"""Deterministic simulator of a TrustZone-style microcontroller with PAC/BTI
control-flow protection, a runtime fault-attestation partition (RunPBA) and
a scenario harness for the attacks it is meant to catch."""

from .assembler import InstrumentConfig, Program, assemble, instrument, parse
from .attestation import (
    SecurityLifecycleClaim, build_token, challenge_response, decode_lifecycle_claim,
    encode_lifecycle_claim, verify_token,
)
from .device import Device
from .harness import load_scenario, overhead_report, run_scenario, suite
from .image import ProgramImage
from .machine import MachineState, PacbtiControl, new_state, reset, step
from .runpba import FaultRecord, LifecycleState, RunPBA, classify_fault

__version__ = "0.1.0"

__all__ = [
    "Device", "FaultRecord", "InstrumentConfig", "LifecycleState", "MachineState", "PacbtiControl",
    "Program", "ProgramImage", "RunPBA", "SecurityLifecycleClaim", "assemble", "build_token",
    "challenge_response", "classify_fault", "decode_lifecycle_claim", "encode_lifecycle_claim",
    "instrument", "load_scenario", "new_state", "overhead_report", "parse", "reset", "run_scenario",
    "step", "suite", "verify_token",
]
