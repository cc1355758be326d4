import pytest
from hypothesis import given, settings, strategies as st

from pacbti_sim.device import HARDFAULT_ADDR, SLIH_ADDR
from pacbti_sim.image import World
from pacbti_sim.machine import Fault, FaultKind, UsageCause
from pacbti_sim.securezone import (
    FRAME_PC_OFFSET, FRAME_SIZE, FRAME_XPSR_OFFSET, SLIH_IRQ, XPSR_B, ConfigurationError, DoubleFault,
    IrqKind, PendedInterrupt, SystemControlRegisters, UnknownIrq, audit_configuration,
    clear_nonessential_interrupts, dispatch_pending, exception_return, pend_interrupt, raise_fault,
)

from conftest import make_device

SRC = """
fn main:
spin:
    B spin
fn irq_17:
    RET
fn irq_20:
    RET
"""


@pytest.fixture
def dev():
    d = make_device(SRC)
    d.step_once()           # secure boot hands over to the NSPE
    assert d.machine.world is World.NON_SECURE
    return d


def ns_usage_fault(state, invalid=True, b=False):
    state.regs.epsr_b = b
    ctx = state.capture_context(invalid_state=invalid)
    return Fault(FaultKind.USAGE_FAULT, World.NON_SECURE, ctx,
                 UsageCause.INVALID_STATE if invalid else UsageCause.NOT_PRIVILEGED)


def test_boot_configuration_passes_audit(dev):
    audit_configuration(dev.machine.scr)
    assert not dev.machine.scr.shcsr_ns_usgfaultact
    assert dev.machine.scr.aircr_bfhfnmins


@pytest.mark.parametrize("change, message", [
    (dict(shcsr_ns_usgfaultact=True), "USGFAULTACT"),
    (dict(aircr_bfhfnmins=False), "BFHFNMINS"),
    (dict(vector_table={}), "HardFault"),
])
def test_audit_rejects_bad_routing(change, message):
    scr = SystemControlRegisters(vector_table={(World.SECURE, "HardFault"): 0x1000_0008})
    for k, v in change.items():
        setattr(scr, k, v)
    with pytest.raises(ConfigurationError, match=message):
        audit_configuration(scr)


def test_ns_usage_fault_escalates_to_secure_hardfault(dev):
    s = dev.machine
    pc, sp = s.regs.pc, s.sp
    out = raise_fault(s, ns_usage_fault(s, b=True))
    assert out.escalated and out.exception == "HardFault"
    assert out.world is World.SECURE and out.handler_pc == HARDFAULT_ADDR
    assert s.world is World.SECURE and s.handler_mode and s.regs.privileged
    frame = s.regs.sp_nonsecure
    assert frame == sp - FRAME_SIZE
    assert s.memory.read_word(frame + FRAME_PC_OFFSET) == pc
    assert s.memory.read_word(frame + FRAME_XPSR_OFFSET) & XPSR_B
    assert s.fault_context.cfsr_invalid_state


def test_banked_usgfaultact_keeps_fault_in_nspe(dev):
    s = dev.machine
    s.scr.shcsr_ns_usgfaultact = True
    with pytest.raises(DoubleFault):        # no NS UsageFault handler installed
        raise_fault(s, ns_usage_fault(s))
    s.scr.vector_table[(World.NON_SECURE, "UsageFault")] = dev.image.symbols["irq_17"]
    out = raise_fault(s, ns_usage_fault(s))
    assert out.world is World.NON_SECURE and not out.escalated


def test_hardfault_target_follows_bfhfnmins(dev):
    s = dev.machine
    s.scr.aircr_bfhfnmins = False
    with pytest.raises(DoubleFault):
        raise_fault(s, ns_usage_fault(s))


def test_fault_while_stacking_is_double_fault(dev):
    s = dev.machine
    s.regs.sp_nonsecure = dev.image.symbols["main"] + 0x40       # frame would land in read-only code
    with pytest.raises(DoubleFault):
        raise_fault(s, ns_usage_fault(s))


def test_secure_interrupts_win(dev):
    s = dev.machine
    pend_interrupt(s, PendedInterrupt(17, World.NON_SECURE, priority=0))
    pend_interrupt(s, PendedInterrupt(SLIH_IRQ, World.SECURE, priority=200, kind=IrqKind.SLIH))
    taken = dispatch_pending(s)
    assert taken.world is World.SECURE and s.regs.pc == SLIH_ADDR
    assert [p.id for p in s.pending] == [17]


def test_ns_priority_order(dev):
    s = dev.machine
    pend_interrupt(s, PendedInterrupt(20, World.NON_SECURE, priority=3))
    pend_interrupt(s, PendedInterrupt(17, World.NON_SECURE, priority=7))
    assert dispatch_pending(s).id == 20
    assert s.regs.pc == dev.image.symbols["irq_20"]


def test_pending_is_deduplicated(dev):
    s = dev.machine
    for _ in range(3):
        pend_interrupt(s, PendedInterrupt(17, World.NON_SECURE))
    assert len(s.pending) == 1


def test_masked_ns_interrupts_stay_pending(dev):
    s = dev.machine
    s.ns_irq_masked = True
    pend_interrupt(s, PendedInterrupt(17, World.NON_SECURE))
    assert dispatch_pending(s) is None
    assert len(s.pending) == 1


def test_clear_nonessential_keeps_only_slih(dev):
    s = dev.machine
    pend_interrupt(s, PendedInterrupt(17, World.NON_SECURE))
    pend_interrupt(s, PendedInterrupt(20, World.NON_SECURE))
    pend_interrupt(s, PendedInterrupt(SLIH_IRQ, World.SECURE, kind=IrqKind.SLIH))
    assert clear_nonessential_interrupts(s) == 2
    assert [(p.id, p.world) for p in s.pending] == [(SLIH_IRQ, World.SECURE)]


@pytest.mark.parametrize("irq_id, world", [(16, World.SECURE), (3, World.NON_SECURE), (32, World.NON_SECURE),
                                           (-1, World.SECURE)])
def test_irq_ids_are_partitioned_by_world(irq_id, world):
    with pytest.raises(ValueError):
        PendedInterrupt(irq_id, world)


def test_unknown_irq(dev):
    with pytest.raises(UnknownIrq):
        pend_interrupt(dev.machine, PendedInterrupt(30, World.NON_SECURE))
    with pytest.raises(UnknownIrq):
        pend_interrupt(dev.machine, PendedInterrupt(9, World.SECURE, kind=IrqKind.FLIH))


def test_exception_return_tail_chains_pending_secure(dev):
    s = dev.machine
    raise_fault(s, ns_usage_fault(s))
    depth = len(s.exc_stack)
    pend_interrupt(s, PendedInterrupt(SLIH_IRQ, World.SECURE, kind=IrqKind.SLIH))
    assert exception_return(s).id == SLIH_IRQ
    assert s.regs.pc == SLIH_ADDR
    assert len(s.exc_stack) == depth        # no second frame pushed


@settings(max_examples=50, deadline=None)
@given(regs=st.lists(st.integers(0, 2**32 - 1), min_size=6, max_size=6), b=st.booleans(), priv=st.booleans())
def test_fault_then_return_restores_context(regs, b, priv):
    d = make_device(SRC)
    d.step_once()
    s = d.machine
    s.regs.general[0:4] = regs[0:4]
    s.regs.general[12] = regs[4]
    s.regs.lr = regs[5]
    s.regs.privileged = priv
    before = (list(s.regs.general[0:4]), s.regs.general[12], s.regs.lr, s.regs.pc, s.sp)
    raise_fault(s, ns_usage_fault(s, b=b))
    s.regs.general[0:4] = [0, 0, 0, 0]
    assert exception_return(s) is None
    after = (list(s.regs.general[0:4]), s.regs.general[12], s.regs.lr, s.regs.pc, s.sp)
    assert after == before
    assert s.regs.epsr_b is b and s.regs.privileged is priv
    assert s.world is World.NON_SECURE and not s.handler_mode
