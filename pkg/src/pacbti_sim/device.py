"""A simulated device: execution core plus the secure-side firmware.

Secure firmware is modelled as Python natives placed at fixed addresses in
the secure code region; the run loop calls a native whenever the secure
world's pc lands on one. Everything else is interpreted instruction by
instruction.
"""

import enum
import json
import os
import random
from collections import namedtuple

from .assembler import PARK_SYMBOL, STACK_TOP_SYMBOL
from .image import ProgramImage, World
from .machine import (
    ITS_WINDOW_BASE, ITS_WINDOW_SIZE, SECURE_CODE_BASE, FaultKind, PacbtiControl, StepStatus,
    UsageCause, new_state, reset, step,
)
from .runpba import (
    Decision, ItsStore, Lifecycle, LifecycleState, NotInvalidState, Policy, RunPBA, ViolationKind,
    classify_fault,
)
from .securezone import (
    SLIH_IRQ, DoubleFault, IrqKind, PendedInterrupt, SystemControlRegisters, audit_configuration,
    clear_nonessential_interrupts, dispatch_pending, exception_return, pend_interrupt, raise_fault,
)

BOOT_ADDR = SECURE_CODE_BASE
HARDFAULT_ADDR = SECURE_CODE_BASE + 0x08
FATAL_ADDR = SECURE_CODE_BASE + 0x10
SLIH_ADDR = SECURE_CODE_BASE + 0x18

DEFAULT_STEP_LIMIT = 10_000_000

TraceEntry = namedtuple("TraceEntry", "step world pc op privileged")
Event = namedtuple("Event", "step kind detail")


class RunResult(enum.Enum):
    HALTED = "halted"
    PARKED = "parked"
    STEP_LIMIT = "step_limit"
    LOCKUP = "lockup"
    STOPPED = "stopped"


class Device:
    def __init__(self, image: ProgramImage, seed=0, tag_width=32, policy=Policy.HOLD_IN_SPE,
                 features=PacbtiControl(), nspe_privileged=False, its_path=None, record_trace=False):
        self.image = image
        self.seed = seed
        self.machine = new_state(image, seed, tag_width)
        self.runpba = RunPBA(ItsStore(its_path), Lifecycle(), policy)
        self.runpba.decommission_hooks.append(self._erase_key)
        self.features = features
        self.nspe_privileged = nspe_privileged
        self.attestation_key = None
        self.record_trace = record_trace
        self.trace = []
        self.events = []
        self.steps = 0
        self.ns_steps = 0
        self.breakpoints = {}
        self.stop_requested = False
        self.park_addr = image.symbols[PARK_SYMBOL]
        self.natives = {
            BOOT_ADDR: self._boot,
            HARDFAULT_ADDR: self._hardfault,
            FATAL_ADDR: self._fatal,
            SLIH_ADDR: self._slih,
        }

    # ------------------------------------------------------------ lifecycle

    def provision(self):
        """Factory flow: install the device-generated attestation key and move to SECURED."""
        lc = self.runpba.lifecycle
        if lc.state is LifecycleState.ASSEMBLY_AND_TEST:
            lc.transition(LifecycleState.PROVISIONING)
        self.attestation_key = random.Random(f"attestation-key:{self.seed}").randbytes(32)
        lc.transition(LifecycleState.SECURED)
        return self

    def _erase_key(self):
        self.attestation_key = None

    def log(self, kind, detail=None):
        self.events.append(Event(self.steps, kind, detail))

    def reset(self, reason):
        self.runpba.buffer = None
        self.runpba.locked = False
        reset(self.machine)
        self.log("reset", reason)

    def recover(self, decision: Decision):
        state = self.runpba.recover(decision)
        self.log("recover", decision.value)
        if decision is Decision.RECOVER:
            self.reset("recover")
        else:
            self.machine.halted = True
            self.machine.halt_reason = "decommissioned"
        return state

    # ------------------------------------------------------------ secure natives

    def _sync_its_window(self):
        raw = self.runpba.its.window_bytes(ITS_WINDOW_SIZE)
        self.machine.memory.write(ITS_WINDOW_BASE, raw.ljust(ITS_WINDOW_SIZE, b"\0"))

    def _boot(self):
        st = self.machine
        if self.runpba.lifecycle.state is LifecycleState.DECOMMISSIONED:
            st.halted = True
            st.halt_reason = "decommissioned"
            return
        scr = SystemControlRegisters()
        vt = scr.vector_table
        for name in ("HardFault", "UsageFault", "MemFault"):
            vt[(World.SECURE, name)] = FATAL_ADDR
        vt[(World.SECURE, "HardFault")] = HARDFAULT_ADDR
        vt[(World.SECURE, SLIH_IRQ)] = SLIH_ADDR
        for name, addr in self.image.symbols.items():
            if name.startswith("irq_") and name[4:].isdigit():
                vt[(World.NON_SECURE, int(name[4:]))] = addr
        if "usage_fault" in self.image.symbols:
            vt[(World.NON_SECURE, "UsageFault")] = self.image.symbols["usage_fault"]
        audit_configuration(scr)
        st.scr = scr
        st.control = PacbtiControl(**vars(self.features))
        self._sync_its_window()
        st.world = World.NON_SECURE
        st.handler_mode = False
        st.regs.sp_nonsecure = self.image.symbols[STACK_TOP_SYMBOL]
        st.regs.privileged = self.nspe_privileged
        st.regs.lr = 0
        st.regs.pc = self.image.entry
        st.decode_cache = {}
        self.log("boot", st.boot_epoch)

    def _hardfault(self):
        st = self.machine
        ctx = st.fault_context
        try:
            kind = classify_fault(ctx, self.image)
        except NotInvalidState:
            kind = None
        if kind is None or kind is ViolationKind.OtherInvalidState:
            self.reset(f"hardfault at {ctx.stacked_pc:#010x}" if ctx else "hardfault")
            return
        self.runpba.flih_capture(ctx)
        self.runpba.lockdown_nspe(st, self.park_addr)
        self.log("lockdown", {"kind": kind.name, "pc": ctx.stacked_pc})
        pend_interrupt(st, PendedInterrupt(SLIH_IRQ, World.SECURE, kind=IrqKind.SLIH))
        clear_nonessential_interrupts(st)
        exception_return(st)

    def _slih(self):
        st = self.machine
        rec = self.runpba.slih_persist(self.image, st.boot_epoch)
        self._sync_its_window()
        self.log("persist", {"kind": rec.kind.name, "pc": rec.fault_pc, "sequence": rec.sequence})
        if self.runpba.policy is Policy.RESET_AFTER_PERSIST and \
                self.runpba.lifecycle.state is LifecycleState.NSPE_COMPROMISED:
            self.recover(Decision.RECOVER)
        else:
            exception_return(st)

    def _fatal(self):
        st = self.machine
        st.halted = True
        st.halt_reason = "secure fault"
        self.log("halt", "secure fault")

    # ------------------------------------------------------------ execution

    def pend_irq(self, irq_id, world=World.NON_SECURE):
        pend_interrupt(self.machine, PendedInterrupt(irq_id, world))

    def idle(self):
        """True when an attestation request can be serviced without preempting a handler."""
        st = self.machine
        return not st.handler_mode and not any(p.world is World.SECURE for p in st.pending)

    @property
    def parked(self):
        st = self.machine
        return (self.runpba.locked and st.world is World.NON_SECURE and st.regs.pc == self.park_addr
                and not st.handler_mode and not st.pending)

    def step_once(self):
        st = self.machine
        if st.pending:
            try:
                dispatch_pending(st)
            except DoubleFault as e:
                self._lockup(e)
                return
        pc = st.regs.pc
        if st.world is World.SECURE:
            native = self.natives.get(pc)
            if native is not None:
                self.steps += 1
                native()
                return
        else:
            bp = self.breakpoints.get(pc)
            if bp is not None:
                bp(self)
                if self.stop_requested or st.halted:
                    return
                pc = st.regs.pc
        if self.record_trace:
            insn = st.fetch(pc)
            self.trace.append(TraceEntry(self.steps, st.world, pc, insn.op.name if insn else None,
                                         st.regs.privileged))
        self.steps += 1
        if st.world is World.NON_SECURE:
            self.ns_steps += 1
        res = step(st)
        if res.status is StepStatus.CONTINUE:
            return
        if res.status is StepStatus.FAULTED:
            f = res.fault
            if f.world is World.NON_SECURE and f.kind is FaultKind.USAGE_FAULT:
                self.log("usage_fault", {"cause": f.cause.value, "pc": f.context.stacked_pc})
            else:
                self.log("fault", {"kind": f.kind.value, "pc": f.context.stacked_pc})
            try:
                raise_fault(st, f)
            except DoubleFault as e:
                self._lockup(e)
        elif res.status is StepStatus.EXC_RETURN:
            exception_return(st)
        elif res.status is StepStatus.HALTED:
            self.log("halt", "halt")

    def _lockup(self, err):
        st = self.machine
        st.halted = True
        st.halt_reason = "lockup"
        self.log("lockup", str(err))

    def run(self, max_steps=DEFAULT_STEP_LIMIT, stop_when_parked=True) -> RunResult:
        st = self.machine
        limit = self.steps + max_steps
        self.stop_requested = False
        while self.steps < limit:
            if st.halted:
                return RunResult.LOCKUP if st.halt_reason == "lockup" else RunResult.HALTED
            if self.stop_requested:
                return RunResult.STOPPED
            if stop_when_parked and self.parked:
                return RunResult.PARKED
            self.step_once()
        if st.halted:
            return RunResult.LOCKUP if st.halt_reason == "lockup" else RunResult.HALTED
        return RunResult.STEP_LIMIT

    def run_until(self, predicate, max_steps=DEFAULT_STEP_LIMIT):
        """Step until ``predicate(device)`` holds; returns False on halt or step limit."""
        st = self.machine
        limit = self.steps + max_steps
        while self.steps < limit and not st.halted:
            if predicate(self):
                return True
            self.step_once()
        return predicate(self)

    @property
    def out(self):
        return self.machine.out

    # ------------------------------------------------------------ persistence

    def save_state(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "its.bin"), "wb") as f:
            f.write(self.runpba.its.to_bytes())
        with open(os.path.join(directory, "image.bin"), "wb") as f:
            f.write(self.image.to_bytes())
        meta = {
            "seed": self.seed,
            "tag_width": self.machine.keys.tag_width,
            "lifecycle": self.runpba.lifecycle.state.name,
            "boot_epoch": self.machine.boot_epoch,
            "malfunction": self.runpba.malfunction,
            "policy": self.runpba.policy.value,
            "features": self.features.mask,
            "nspe_privileged": self.nspe_privileged,
            "attestation_key": self.attestation_key.hex() if self.attestation_key else None,
        }
        with open(os.path.join(directory, "device.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
        if self.attestation_key:
            # verifier-side copy, as handed over at provisioning time
            with open(os.path.join(directory, "attestation.key"), "w") as f:
                f.write(self.attestation_key.hex() + "\n")

    @classmethod
    def load_state(cls, directory):
        with open(os.path.join(directory, "device.json")) as f:
            meta = json.load(f)
        with open(os.path.join(directory, "image.bin"), "rb") as f:
            image = ProgramImage.from_bytes(f.read())
        dev = cls(image, seed=meta["seed"], tag_width=meta["tag_width"], policy=Policy(meta["policy"]),
                  features=PacbtiControl.from_mask(meta["features"]),
                  nspe_privileged=meta["nspe_privileged"], its_path=os.path.join(directory, "its.bin"))
        dev.runpba.lifecycle.state = LifecycleState[meta["lifecycle"]]
        dev.runpba.lifecycle.history = [dev.runpba.lifecycle.state]
        dev.runpba.malfunction = meta["malfunction"]
        dev.machine.boot_epoch = meta["boot_epoch"]
        key = meta.get("attestation_key")
        dev.attestation_key = bytes.fromhex(key) if key else None
        return dev


def no_resume_violations(device: Device):
    """Non-secure trace entries that break lockdown: anything executed after a
    PACBTI usage fault other than the park loop, until the next reset/recovery."""
    bad = []
    events = sorted(device.events, key=lambda e: e.step)
    windows = []
    start = None
    for e in events:
        if e.kind == "usage_fault" and e.detail["cause"] == UsageCause.INVALID_STATE.value and start is None:
            start = e.step
        elif e.kind in ("reset", "recover") and start is not None:
            windows.append((start, e.step))
            start = None
        elif e.kind == "lockdown" and start is None:
            start = e.step
    if start is not None:
        windows.append((start, float("inf")))
    for lo, hi in windows:
        for t in device.trace:
            if lo <= t.step < hi and t.world is World.NON_SECURE and t.pc != device.park_addr:
                bad.append(t)
    return bad


__all__ = [
    "BOOT_ADDR", "DEFAULT_STEP_LIMIT", "Device", "Event", "FATAL_ADDR", "HARDFAULT_ADDR",
    "RunResult", "SLIH_ADDR", "TraceEntry", "no_resume_violations",
]
