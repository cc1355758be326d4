import os

import pytest
from hypothesis import given, settings, strategies as st

from pacbti_sim.device import RunResult, no_resume_violations
from pacbti_sim.image import World
from pacbti_sim.isa import Op
from pacbti_sim.machine import ITS_WINDOW_BASE, FaultContext, PacbtiControl
from pacbti_sim.runpba import (
    LEGAL_TRANSITIONS, BufferEmpty, Decision, FaultRecord, InvalidTransition, ItsStore, Lifecycle,
    LifecycleState, NotInvalidState, Policy, RunPBA, ViolationKind, classify_fault, parse_its,
)

from conftest import FULL, make_device

# f's own store clobbers its saved return address, so the AUT before RET fails
SELF_SMASH = """
fn main:
    PUSH {lr}
    OUT #1
    BL f
    OUT #2
    POP {lr}
    RET
fn f:
    PUSH {lr}
    MOV r0, #main
    STR r0, sp, #0
    BL g
    POP {lr}
    RET
fn g:
    RET
"""

# reads the ITS window from the non-secure world
ITS_PEEK = f"""
fn main:
    MOV r0, #{ITS_WINDOW_BASE}
    LDR r1, r0, #0
    OUT r1
    HALT
"""


def faulted_device(**kw):
    dev = make_device(SELF_SMASH, record_trace=True, **kw)
    return dev, dev.run(100_000)


def ctx(pc, b=False, inv=True, world=World.NON_SECURE, priv=False):
    return FaultContext(pc, 0x20008FE0, 0x10010, (1, 2, 3, 4), 0xABCD, b, world, priv, inv)


def aut_and_mov(image):
    aut = mov = None
    for addr in range(image.entry, image.entry + image.code_units * 8, 8):
        insn = image.instruction_at(addr)
        if insn.op is Op.AUT and aut is None:
            aut = addr
        if insn.op is Op.MOV and mov is None:
            mov = addr
    return aut, mov


def test_classify_examples():
    dev = make_device(SELF_SMASH)
    aut, mov = aut_and_mov(dev.image)
    assert classify_fault(ctx(aut), dev.image) is ViolationKind.PacFault
    assert classify_fault(ctx(mov, b=True), dev.image) is ViolationKind.BtiFault
    assert classify_fault(ctx(mov), dev.image) is ViolationKind.OtherInvalidState
    with pytest.raises(NotInvalidState):
        classify_fault(ctx(aut, inv=False), dev.image)
    with pytest.raises(NotInvalidState):
        classify_fault(ctx(aut, world=World.SECURE), dev.image)


def test_flih_only_buffers():
    rp = RunPBA(ItsStore())
    c = ctx(0x10040)
    rp.flih_capture(c)
    assert rp.its.entries == {} and not rp.malfunction
    assert FaultContext.from_bytes(rp.buffer) == c


def test_two_faults_before_slih_sets_malfunction():
    rp = RunPBA(ItsStore())
    rp.flih_capture(ctx(0x10040))
    rp.flih_capture(ctx(0x10048))
    assert rp.malfunction
    assert FaultContext.from_bytes(rp.buffer).stacked_pc == 0x10048


def test_slih_needs_a_buffered_fault():
    with pytest.raises(BufferEmpty):
        RunPBA(ItsStore()).slih_persist(None, 0)


@settings(max_examples=100, deadline=None)
@given(pc=st.integers(0, 2**32 - 1), sp=st.integers(0, 2**32 - 1), lr=st.integers(0, 2**32 - 1),
       r=st.tuples(*[st.integers(0, 2**32 - 1)] * 5), b=st.booleans(), priv=st.booleans())
def test_context_round_trips_through_buffer(pc, sp, lr, r, b, priv):
    c = FaultContext(pc, sp, lr, r[:4], r[4], b, World.NON_SECURE, priv, True)
    assert FaultContext.from_bytes(c.to_bytes()) == c


def test_golden_record_bytes():
    rec = FaultRecord(1, ViolationKind.PacFault, 0x000100A8, 0x20008FE8, 0x00010020, False, 3)
    assert rec.to_bytes().hex() == "01000000" "01" "a8000100" "e88f0020" "20000100" "00" "03000000"
    assert FaultRecord.from_bytes(rec.to_bytes()) == rec


def test_pac_fault_is_persisted_and_compromises_lifecycle():
    dev, res = faulted_device()
    assert res is RunResult.PARKED
    assert dev.out == [1]
    recs = dev.runpba.its.records()
    assert len(recs) == 1 and recs[0].kind is ViolationKind.PacFault
    assert dev.image.instruction_at(recs[0].fault_pc).op is Op.AUT
    faults = [e for e in dev.events if e.kind == "usage_fault"]
    assert [f.detail["pc"] for f in faults] == [recs[0].fault_pc]
    assert dev.runpba.lifecycle.state is LifecycleState.NSPE_COMPROMISED
    assert dev.runpba.query_status(dev.machine).runtime_failure


def test_read_only_storage_sets_malfunction():
    dev = make_device(SELF_SMASH)
    dev.runpba.its.read_only = True
    dev.run(100_000)
    assert dev.runpba.malfunction
    assert dev.runpba.its.records() == []


def test_unavailable_storage_in_status():
    dev = make_device(SELF_SMASH)
    dev.runpba.its.unavailable = True
    s = dev.runpba.query_status(dev.machine)
    assert s.malfunction and not s.runtime_failure


def test_record_survives_reset_with_file_backing(tmp_path):
    path = str(tmp_path / "its.bin")
    dev, _ = faulted_device(its_path=path)
    epoch = dev.machine.boot_epoch
    dev.recover(Decision.RECOVER)
    assert dev.machine.boot_epoch == epoch + 1
    assert len(dev.runpba.its.records()) == 1
    with open(path, "rb") as f:
        assert parse_its(f.read()) == dev.runpba.its.records()
    assert ItsStore(path).records() == dev.runpba.its.records()


def test_file_appends_keep_count_in_place(tmp_path):
    path = str(tmp_path / "its.bin")
    store = ItsStore(path)
    for i in range(1, 4):
        store.put(i, FaultRecord(i, ViolationKind.BtiFault, i, i, i, True, 0).to_bytes())
    raw = open(path, "rb").read()
    assert raw[:8] == b"ITS1" + (3).to_bytes(4, "little")
    assert [r.sequence for r in parse_its(raw)] == [1, 2, 3]
    assert RunPBA(ItsStore(path)).next_sequence == 4


def test_lockdown_parks_for_ten_thousand_steps():
    dev, _ = faulted_device()
    before = len(dev.trace)
    dev.run(10_000, stop_when_parked=False)
    tail = dev.trace[before:]
    assert len(tail) == 10_000
    assert all(t.world is World.NON_SECURE and t.pc == dev.park_addr for t in tail)
    assert no_resume_violations(dev) == []
    assert dev.out == [1]


def test_lockdown_is_idempotent():
    dev, _ = faulted_device()
    snapshot = (dev.machine.regs.pc, dev.machine.ns_irq_masked, dev.runpba.locked)
    dev.runpba.lockdown_nspe(dev.machine, dev.park_addr)
    dev.runpba.lockdown_nspe(dev.machine, dev.park_addr)
    assert (dev.machine.regs.pc, dev.machine.ns_irq_masked, dev.runpba.locked) == snapshot


def test_recover_restarts_nspe_from_reset():
    dev, _ = faulted_device()
    assert dev.recover(Decision.RECOVER) is LifecycleState.SECURED
    assert len(dev.runpba.its.records()) == 1
    dev.run(10)
    assert dev.machine.world is World.NON_SECURE and not dev.runpba.locked
    dev.run(100_000)
    assert dev.out == [1, 1]        # restarted from the top, faulted again


def test_decommission_erases_key():
    dev, _ = faulted_device()
    assert dev.recover(Decision.DECOMMISSION) is LifecycleState.DECOMMISSIONED
    assert dev.attestation_key is None
    assert dev.machine.halted


def test_recover_from_secured_is_rejected():
    dev = make_device(SELF_SMASH)
    with pytest.raises(InvalidTransition):
        dev.recover(Decision.RECOVER)


def test_reset_after_persist_policy():
    dev = make_device(SELF_SMASH, policy=Policy.RESET_AFTER_PERSIST)
    dev.run(400)
    kinds = [e.kind for e in dev.events]
    assert "persist" in kinds and "recover" in kinds and "reset" in kinds
    assert dev.machine.boot_epoch >= 1
    assert dev.runpba.lifecycle.state is LifecycleState.SECURED


def test_other_invalid_state_resets_without_compromise():
    dev = make_device("fn main:\n HALT\n")
    dev.step_once()
    mov = dev.image.symbols["main"]
    dev.machine.fault_context = ctx(mov)
    dev.runpba.lifecycle.state = LifecycleState.SECURED
    dev._hardfault()
    assert dev.machine.boot_epoch == 1
    assert dev.runpba.lifecycle.state is LifecycleState.SECURED
    assert dev.runpba.its.records() == []


def test_its_window_is_secure_only():
    dev = make_device(ITS_PEEK, record_trace=True)
    res = dev.run(1000)
    # the MemFault escalates; it is not a PACBTI fault, so the device resets and retries
    faults = [e for e in dev.events if e.kind == "fault"]
    assert faults and faults[0].detail["kind"] == "MemFault"
    assert dev.out == []
    assert res is RunResult.STEP_LIMIT
    assert dev.runpba.its.records() == []


def test_query_status_fresh_and_after_disable():
    dev = make_device("fn main:\n MOV r0, #0x7\n MSR PACBTI_CTRL, r0\n HALT\n", nspe_privileged=True)
    s = dev.runpba.query_status(dev.machine)
    assert (s.runtime_failure, s.malfunction) == (False, False)
    dev.run(1000)
    s = dev.runpba.query_status(dev.machine)
    assert s.control == PacbtiControl(True, True, True, False)
    assert not s.control.bti_unpriv


def test_fresh_status_all_features_on():
    dev = make_device("fn main:\n HALT\n")
    dev.step_once()
    s = dev.runpba.query_status(dev.machine)
    assert s == type(s)(False, False, PacbtiControl.all_on())


def test_legal_transition_table():
    L = LifecycleState
    assert (L.SECURED, L.PROVISIONING) not in LEGAL_TRANSITIONS
    assert (L.DECOMMISSIONED, L.SECURED) not in LEGAL_TRANSITIONS
    assert all((s, L.DECOMMISSIONED) in LEGAL_TRANSITIONS for s in L if s is not L.DECOMMISSIONED)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list(LifecycleState)), max_size=30))
def test_fsm_never_leaves_legal_set(targets):
    lc = Lifecycle()
    for t in targets:
        before = lc.state
        if (before, t) in LEGAL_TRANSITIONS:
            assert lc.transition(t) is t
        else:
            with pytest.raises(InvalidTransition):
                lc.transition(t)
            assert lc.state is before
    for a, b in zip(lc.history, lc.history[1:]):
        assert (a, b) in LEGAL_TRANSITIONS
