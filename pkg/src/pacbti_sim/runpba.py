"""The RunPBA application root of trust.

Classifies non-secure invalid-state faults, captures them in a first-level
handler, persists them to internal trusted storage from the second-level
handler, parks the non-secure world and drives the device lifecycle.
"""

import collections
import enum
import itertools
import os
import struct
from dataclasses import dataclass

from .image import World
from .isa import MASK32, Op
from .machine import FaultContext, MachineState, PacbtiControl
from .securezone import FRAME_PC_OFFSET, FRAME_XPSR_OFFSET, XPSR_B, innermost_nonsecure_frame

ITS_MAGIC = b"ITS1"
_HEADER = struct.Struct("<4sI")
_RECORD = struct.Struct("<IBIIIBI")
RECORD_SIZE = _RECORD.size


class RunPbaError(Exception):
    pass


class NotInvalidState(RunPbaError):
    """classify_fault was handed something other than a non-secure INVSTATE fault."""


class StorageFailure(RunPbaError):
    pass


class InvalidTransition(RunPbaError):
    pass


class BufferEmpty(RunPbaError):
    pass


class ViolationKind(enum.IntEnum):
    PacFault = 1
    BtiFault = 2
    OtherInvalidState = 3

    @property
    def is_pacbti(self):
        return self is not ViolationKind.OtherInvalidState


@dataclass(frozen=True)
class FaultRecord:
    sequence: int
    kind: ViolationKind
    fault_pc: int
    fault_sp: int
    fault_lr: int
    privileged: bool
    boot_epoch: int

    def to_bytes(self) -> bytes:
        return _RECORD.pack(self.sequence, int(self.kind), self.fault_pc, self.fault_sp,
                            self.fault_lr, int(self.privileged), self.boot_epoch)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FaultRecord":
        seq, kind, pc, sp, lr, priv, epoch = _RECORD.unpack(raw)
        return cls(seq, ViolationKind(kind), pc, sp, lr, bool(priv), epoch)


class LifecycleState(enum.IntEnum):
    ASSEMBLY_AND_TEST = 0x10
    PROVISIONING = 0x20
    SECURED = 0x30
    NSPE_COMPROMISED = 0x35
    RECOVERABLE_DEBUG = 0x50
    DECOMMISSIONED = 0x60


_L = LifecycleState
LEGAL_TRANSITIONS = frozenset({
    (_L.ASSEMBLY_AND_TEST, _L.PROVISIONING),
    (_L.PROVISIONING, _L.SECURED),
    (_L.SECURED, _L.NSPE_COMPROMISED),
    (_L.NSPE_COMPROMISED, _L.SECURED),
}) | frozenset((s, _L.DECOMMISSIONED) for s in _L if s is not _L.DECOMMISSIONED)


class Lifecycle:
    def __init__(self, state=LifecycleState.ASSEMBLY_AND_TEST):
        self.state = LifecycleState(state)
        self.history = [self.state]

    def can(self, new):
        return (self.state, LifecycleState(new)) in LEGAL_TRANSITIONS

    def transition(self, new):
        new = LifecycleState(new)
        if not self.can(new):
            raise InvalidTransition(f"{self.state.name} -> {new.name}")
        self.state = new
        self.history.append(new)
        return new

    def __repr__(self):
        return f"Lifecycle({self.state.name})"


class ItsStore:
    """Fault-record store with an optional file backing that survives resets.

    File layout: ``"ITS1" u32 count`` followed by ``count`` fixed-size records.
    Setting ``read_only`` makes writes fail; ``unavailable`` makes every access fail.
    """

    def __init__(self, path=None):
        self.path = path
        self.entries = collections.OrderedDict()
        self.read_only = False
        self.unavailable = False
        if path and os.path.exists(path):
            with open(path, "rb") as f:
                for rec in parse_its(f.read()):
                    self.entries[rec.sequence] = rec.to_bytes()

    def _check(self, write):
        if self.unavailable or (write and self.read_only):
            raise StorageFailure("internal trusted storage is not accessible")

    def put(self, uid, blob: bytes):
        self._check(write=True)
        if self.path:
            try:
                self._append_file(blob)
            except OSError as e:
                raise StorageFailure(str(e)) from e
        self.entries[uid] = bytes(blob)

    def _append_file(self, blob):
        mode = "r+b" if os.path.exists(self.path) else "w+b"
        with open(self.path, mode) as f:
            head = f.read(_HEADER.size)
            count = _HEADER.unpack(head)[1] if len(head) == _HEADER.size else 0
            f.seek(0)
            f.write(_HEADER.pack(ITS_MAGIC, count + 1))
            f.seek(_HEADER.size + count * RECORD_SIZE)
            f.write(blob)
            f.truncate()

    def get(self, uid) -> bytes:
        self._check(write=False)
        return self.entries[uid]

    def records(self):
        self._check(write=False)
        return [FaultRecord.from_bytes(b) for b in self.entries.values()]

    def window_bytes(self, limit) -> bytes:
        """Leading ``limit`` bytes of the serialized store (header plus records)."""
        fit = max(0, (limit - _HEADER.size) // RECORD_SIZE)
        head = _HEADER.pack(ITS_MAGIC, len(self.entries))
        return (head + b"".join(itertools.islice(self.entries.values(), fit)))[:limit]

    def to_bytes(self) -> bytes:
        return _HEADER.pack(ITS_MAGIC, len(self.entries)) + b"".join(self.entries.values())


def parse_its(raw: bytes):
    if len(raw) < _HEADER.size:
        raise ValueError("ITS file too short")
    magic, count = _HEADER.unpack_from(raw)
    if magic != ITS_MAGIC:
        raise ValueError("bad ITS magic")
    if len(raw) != _HEADER.size + count * RECORD_SIZE:
        raise ValueError("ITS record count does not match file size")
    return [FaultRecord.from_bytes(raw[_HEADER.size + i * RECORD_SIZE:][:RECORD_SIZE]) for i in range(count)]


def classify_fault(ctx: FaultContext, image) -> ViolationKind:
    if not ctx.cfsr_invalid_state or ctx.world is not World.NON_SECURE:
        raise NotInvalidState(f"fault at {ctx.stacked_pc:#010x} is not a non-secure INVSTATE fault")
    insn = image.instruction_at(ctx.stacked_pc)
    if insn is not None and insn.op is Op.AUT:
        return ViolationKind.PacFault
    if ctx.epsr_b:
        return ViolationKind.BtiFault
    return ViolationKind.OtherInvalidState


class Policy(enum.Enum):
    HOLD_IN_SPE = "HoldInSpe"
    RESET_AFTER_PERSIST = "ResetAfterPersist"


class Decision(enum.Enum):
    RECOVER = "Recover"
    DECOMMISSION = "Decommission"


@dataclass(frozen=True)
class RunPbaStatus:
    runtime_failure: bool
    malfunction: bool
    control: PacbtiControl


class RunPBA:
    """Partition state. The device owns one instance and calls into it from
    its secure handlers."""

    def __init__(self, its: ItsStore, lifecycle: Lifecycle = None, policy=Policy.HOLD_IN_SPE):
        self.its = its
        self.lifecycle = lifecycle or Lifecycle()
        self.policy = policy
        self.buffer = None
        self.malfunction = False
        self.locked = False
        self.decommission_hooks = []
        self.next_sequence = max(its.entries, default=0) + 1

    # FLIH: may only touch the partition buffer
    def flih_capture(self, ctx: FaultContext):
        if self.buffer is not None:
            self.malfunction = True
        self.buffer = ctx.to_bytes()

    def slih_persist(self, image, boot_epoch) -> FaultRecord:
        if self.buffer is None:
            raise BufferEmpty("no captured fault to persist")
        ctx = FaultContext.from_bytes(self.buffer)
        kind = classify_fault(ctx, image)
        rec = FaultRecord(self.next_sequence, kind, ctx.stacked_pc, ctx.stacked_sp, ctx.stacked_lr,
                          ctx.privileged, boot_epoch)
        self.next_sequence += 1
        try:
            self.its.put(rec.sequence, rec.to_bytes())
        except StorageFailure:
            self.malfunction = True
        self.buffer = None
        if kind.is_pacbti and self.lifecycle.state is LifecycleState.SECURED:
            self.lifecycle.transition(LifecycleState.NSPE_COMPROMISED)
        return rec

    def lockdown_nspe(self, state: MachineState, park_addr: int):
        """Point the stacked non-secure return address at the park loop and mask
        non-secure interrupts so nothing else in the NSPE gets scheduled."""
        frame = innermost_nonsecure_frame(state)
        if frame is not None:
            mem = state.memory
            mem.write_word(frame.frame_sp + FRAME_PC_OFFSET, park_addr & MASK32)
            xpsr = mem.read_word(frame.frame_sp + FRAME_XPSR_OFFSET)
            mem.write_word(frame.frame_sp + FRAME_XPSR_OFFSET, xpsr & ~XPSR_B)
        state.ns_irq_masked = True
        self.locked = True

    def query_status(self, state: MachineState) -> RunPbaStatus:
        malfunction = self.malfunction
        try:
            failure = any(r.kind.is_pacbti for r in self.its.records())
        except StorageFailure:
            malfunction = True
            failure = False
        failure = failure or self.lifecycle.state is LifecycleState.NSPE_COMPROMISED
        c = state.control
        return RunPbaStatus(failure, malfunction, PacbtiControl(c.pac_priv, c.pac_unpriv, c.bti_priv, c.bti_unpriv))

    def recover(self, decision: Decision) -> LifecycleState:
        """Lifecycle half of operator recovery; the device performs the restart."""
        if self.lifecycle.state is not LifecycleState.NSPE_COMPROMISED:
            raise InvalidTransition(f"recover from {self.lifecycle.state.name}")
        if decision is Decision.RECOVER:
            self.lifecycle.transition(LifecycleState.SECURED)
            self.locked = False
        else:
            self.lifecycle.transition(LifecycleState.DECOMMISSIONED)
            for hook in self.decommission_hooks:
                hook()
        return self.lifecycle.state


__all__ = [
    "BufferEmpty", "Decision", "FaultRecord", "InvalidTransition", "ItsStore", "LEGAL_TRANSITIONS",
    "Lifecycle", "LifecycleState", "NotInvalidState", "Policy", "RunPBA", "RunPbaError",
    "RunPbaStatus", "StorageFailure", "ViolationKind", "classify_fault", "parse_its",
]
