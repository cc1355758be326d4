"""Secure/non-secure split: banked fault configuration, fault escalation,
exception stacking and secure-first interrupt dispatch.

Interrupt ids 0-15 belong to the secure world and 16-31 to the non-secure
world. The RunPBA second-level handler is wired to secure id 5.
"""

import enum
from dataclasses import dataclass, field

from .image import W, World
from .isa import EXC_RETURN, MASK32
from .machine import Fault, FaultContext, FaultKind, MachineState

__all__ = [
    "DispatchOutcome", "DoubleFault", "FaultContext", "IrqKind", "PendedInterrupt",
    "SystemControlRegisters", "UnknownIrq", "audit_configuration", "clear_nonessential_interrupts",
    "dispatch_pending", "exception_return", "pend_interrupt", "raise_fault",
]

SLIH_IRQ = 5
SECURE_IRQS = range(0, 16)
NONSECURE_IRQS = range(16, 32)

FRAME_SIZE = 32
FRAME_PC_OFFSET = 24
FRAME_XPSR_OFFSET = 28
XPSR_B = 1


class DoubleFault(Exception):
    """A fault occurred while stacking the context of another fault (lockup)."""


class UnknownIrq(KeyError):
    pass


class ConfigurationError(Exception):
    pass


class IrqKind(enum.Enum):
    FLIH = "FLIH"
    SLIH = "SLIH"
    ORDINARY = "ordinary"


@dataclass(frozen=True)
class PendedInterrupt:
    id: int
    world: World
    priority: int = 0
    kind: IrqKind = IrqKind.ORDINARY

    def __post_init__(self):
        expected = SECURE_IRQS if self.world is World.SECURE else NONSECURE_IRQS
        if self.id not in expected:
            raise ValueError(f"irq {self.id} is not a {self.world.name} interrupt id")

    def sort_key(self):
        return (self.world is not World.SECURE, self.priority, self.id)


@dataclass
class SystemControlRegisters:
    shcsr_ns_usgfaultact: bool = False
    shcsr_ns_memfaultact: bool = False
    aircr_bfhfnmins: bool = True
    # (world, exception name or irq id) -> handler address
    vector_table: dict = field(default_factory=dict)
    # secure irq id -> callable(state); FLIH entries run synchronously in handler mode
    flih: dict = field(default_factory=dict)


def audit_configuration(scr: SystemControlRegisters):
    """Raise ConfigurationError unless the fault routing is the one RunPBA depends on."""
    problems = []
    if scr.shcsr_ns_usgfaultact:
        problems.append("SHCSR_NS.USGFAULTACT must be 0")
    if not scr.aircr_bfhfnmins:
        problems.append("AIRCR.BFHFNMINS must be 1")
    if (World.SECURE, "HardFault") not in scr.vector_table:
        problems.append("no secure HardFault handler")
    if problems:
        raise ConfigurationError("; ".join(problems))


@dataclass(frozen=True)
class ExceptionFrame:
    frame_sp: int
    return_world: World
    return_privileged: bool
    return_handler_mode: bool
    cause: str


@dataclass(frozen=True)
class DispatchOutcome:
    exception: str
    world: World
    handler_pc: int
    escalated: bool
    context: FaultContext


def _stack_context(state: MachineState, cause):
    regs = state.regs
    frame = (state.sp - FRAME_SIZE) & MASK32
    if state.memory.check(frame, FRAME_SIZE, W, state.world, regs.privileged) is None:
        raise DoubleFault(f"cannot stack {cause} frame at {frame:#010x} ({state.world.name})")
    g = regs.general
    words = [g[0], g[1], g[2], g[3], g[12], regs.lr, regs.pc, XPSR_B if regs.epsr_b else 0]
    for i, w in enumerate(words):
        state.memory.write_word(frame + 4 * i, w)
    state.sp = frame
    state.exc_stack.append(ExceptionFrame(frame, state.world, regs.privileged, state.handler_mode, cause))
    return frame


def _enter(state, world, pc, handler_mode=True):
    state.world = world
    state.regs.privileged = True
    state.regs.epsr_b = False
    state.handler_mode = handler_mode
    state.regs.pc = pc


def raise_fault(state: MachineState, fault: Fault) -> DispatchOutcome:
    """Route a synchronous fault to its handler, escalating where the banked
    configuration says so, and stack the interrupted context."""
    scr = state.scr
    escalated = False
    if fault.world is World.NON_SECURE:
        if fault.kind is FaultKind.USAGE_FAULT and scr.shcsr_ns_usgfaultact:
            world, name = World.NON_SECURE, "UsageFault"
        elif fault.kind is FaultKind.MEM_FAULT and scr.shcsr_ns_memfaultact:
            world, name = World.NON_SECURE, "MemFault"
        else:
            escalated = fault.kind is not FaultKind.HARD_FAULT
            world = World.SECURE if scr.aircr_bfhfnmins else World.NON_SECURE
            name = "HardFault"
    else:
        world, name = World.SECURE, fault.kind.value
    try:
        handler = scr.vector_table[(world, name)]
    except KeyError:
        raise DoubleFault(f"no {world.name} {name} handler") from None
    _stack_context(state, name)
    state.fault_context = fault.context
    _enter(state, world, handler)
    return DispatchOutcome(name, world, handler, escalated, fault.context)


def pend_interrupt(state: MachineState, irq: PendedInterrupt):
    scr = state.scr
    if irq.kind is IrqKind.FLIH:
        if irq.id not in scr.flih:
            raise UnknownIrq(irq.id)
        if state.handler_mode and state.world is World.SECURE:
            scr.flih[irq.id](state)
            return
    elif (irq.world, irq.id) not in scr.vector_table:
        raise UnknownIrq(irq.id)
    if not any(p.id == irq.id and p.world is irq.world for p in state.pending):
        state.pending.append(irq)


def has_secure_pending(state):
    return any(p.world is World.SECURE for p in state.pending)


def _next_dispatchable(state):
    for irq in sorted(state.pending, key=PendedInterrupt.sort_key):
        if irq.world is World.SECURE:
            return irq
        if not state.ns_irq_masked and state.world is World.NON_SECURE and not state.handler_mode:
            return irq
        return None
    return None


def _take(state, irq):
    state.pending.remove(irq)
    handler = state.scr.vector_table[(irq.world, irq.id)]
    _enter(state, irq.world, handler, handler_mode=irq.kind is not IrqKind.SLIH)
    if irq.world is World.NON_SECURE:
        state.regs.lr = EXC_RETURN


def dispatch_pending(state: MachineState):
    """Take the most urgent dispatchable interrupt, if any. Secure interrupts
    always win over non-secure ones."""
    irq = _next_dispatchable(state)
    if irq is None:
        return None
    _stack_context(state, f"irq{irq.id}")
    _take(state, irq)
    return irq


def innermost_nonsecure_frame(state):
    for entry in reversed(state.exc_stack):
        if entry.return_world is World.NON_SECURE:
            return entry
    return None


def exception_return(state: MachineState):
    """Leave the current handler. Pending secure interrupts tail-chain before
    the stacked context is restored."""
    irq = _next_dispatchable_on_return(state)
    if irq is not None:
        _take(state, irq)
        return irq
    entry = state.exc_stack.pop()
    mem = state.memory
    words = [mem.read_word(entry.frame_sp + 4 * i) for i in range(8)]
    regs = state.regs
    regs.general[0:4] = words[0:4]
    regs.general[12] = words[4]
    regs.lr = words[5]
    regs.pc = words[6]
    regs.epsr_b = bool(words[7] & XPSR_B)
    state.world = entry.return_world
    state.sp = entry.frame_sp + FRAME_SIZE
    regs.privileged = entry.return_privileged
    state.handler_mode = entry.return_handler_mode
    return None


def _next_dispatchable_on_return(state):
    secure = [p for p in state.pending if p.world is World.SECURE]
    if secure:
        return min(secure, key=PendedInterrupt.sort_key)
    return None


def clear_nonessential_interrupts(state: MachineState) -> int:
    """Drop every pending interrupt except the RunPBA SLIH trigger.

    Meant to be called from secure handler mode just before the fault handler
    hands control away."""
    keep = [p for p in state.pending
            if p.world is World.SECURE and p.id == SLIH_IRQ and p.kind is IrqKind.SLIH]
    removed = len(state.pending) - len(keep)
    state.pending = keep
    return removed
