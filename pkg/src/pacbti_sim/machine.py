"""Instruction-level execution core.

A :class:`MachineState` is one simulated device's architectural state:
register file, permissioned memory, security world, PAC keys and the
PACBTI feature-enable register. :func:`step` executes exactly one
instruction and reports synchronous faults as return values.
"""

import collections
import enum
import hashlib
import random
import struct
from dataclasses import dataclass, field

from .image import R, W, X, ProgramImage, World
from .isa import (
    CALLS, EXC_RETURN, INSN_SIZE, LANDING_PADS, LR, MASK32, NUM_GENERAL, SP, TAG_REG,
    Cond, Instruction, Op, SysReg, UndecodableInstruction, reglist,
)

__all__ = [
    "CALLS", "Fault", "FaultContext", "FaultKind", "MachineState", "MemoryRegion", "Memory",
    "PacKeySet", "PacbtiControl", "RegisterFile", "StepResult", "StepStatus", "UsageCause",
    "UndecodableInstruction", "World", "new_state", "pac_compute", "reset", "step",
]

# Platform (secure) memory map; program regions come from the image.
SECURE_CODE_BASE = 0x1000_0000
SECURE_CODE_SIZE = 0x100
ITS_WINDOW_BASE = 0x1000_8000
ITS_WINDOW_SIZE = 0x400
SECURE_RAM_BASE = 0x1001_0000
SECURE_RAM_SIZE = 0x1000
SECURE_RESET_VECTOR = SECURE_CODE_BASE

SVC_RECV_LEN = 0
SVC_RECV_WORD = 1


class RegionOverlap(ValueError):
    pass


@dataclass
class MemoryRegion:
    name: str
    base: int
    length: int
    flags: int
    world: World
    min_privileged: bool
    contents: bytearray

    @property
    def readable(self):
        return bool(self.flags & R)

    @property
    def writable(self):
        return bool(self.flags & W)

    @property
    def executable(self):
        return bool(self.flags & X)


class Memory:
    """Non-overlapping regions with per-access permission checks."""

    def __init__(self, regions):
        regions = sorted(regions, key=lambda r: r.base)
        for lo, hi in zip(regions, regions[1:]):
            if lo.base + lo.length > hi.base:
                raise RegionOverlap(f"{lo.name} overlaps {hi.name}")
        for r in regions:
            if r.name == "stack" and r.executable:
                raise ValueError("stack region must not be executable")
        self.regions = regions
        self._last = regions[0] if regions else None

    def find(self, addr, size=1):
        r = self._last
        if r is not None and r.base <= addr and addr + size <= r.base + r.length:
            return r
        for r in self.regions:
            if r.base <= addr and addr + size <= r.base + r.length:
                self._last = r
                return r
        return None

    def region(self, name):
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def check(self, addr, size, access, world, privileged):
        """Return the region permitting this access, or None."""
        r = self.find(addr, size)
        if r is None or not r.flags & access:
            return None
        if r.world is World.SECURE and world is not World.SECURE:
            return None
        if r.min_privileged and not privileged:
            return None
        return r

    def read_word(self, addr):
        r = self.find(addr, 4)
        off = addr - r.base
        return int.from_bytes(r.contents[off:off + 4], "little")

    def write_word(self, addr, value):
        r = self.find(addr, 4)
        off = addr - r.base
        r.contents[off:off + 4] = (value & MASK32).to_bytes(4, "little")

    def read(self, addr, size):
        r = self.find(addr, size)
        off = addr - r.base
        return bytes(r.contents[off:off + size])

    def write(self, addr, data):
        r = self.find(addr, len(data))
        off = addr - r.base
        r.contents[off:off + len(data)] = data


@dataclass
class RegisterFile:
    general: list = field(default_factory=lambda: [0] * NUM_GENERAL)
    sp_secure: int = 0
    sp_nonsecure: int = 0
    lr: int = 0
    pc: int = 0
    epsr_b: bool = False
    privileged: bool = True


@dataclass
class PacKeySet:
    key: int
    tag_width: int = 32

    def __post_init__(self):
        if not 4 <= self.tag_width <= 32:
            raise ValueError("tag_width must be in [4, 32]")


@dataclass
class PacbtiControl:
    pac_priv: bool = False
    pac_unpriv: bool = False
    bti_priv: bool = False
    bti_unpriv: bool = False

    @classmethod
    def all_on(cls):
        return cls(True, True, True, True)

    @classmethod
    def from_mask(cls, mask):
        return cls(bool(mask & 1), bool(mask & 2), bool(mask & 4), bool(mask & 8))

    @property
    def mask(self):
        return (int(self.pac_priv) | int(self.pac_unpriv) << 1
                | int(self.bti_priv) << 2 | int(self.bti_unpriv) << 3)

    def pac_enabled(self, privileged):
        return self.pac_priv if privileged else self.pac_unpriv

    def bti_enabled(self, privileged):
        return self.bti_priv if privileged else self.bti_unpriv


def pac_compute(pointer: int, modifier: int, keys: PacKeySet) -> int:
    """Keyed PRF over ``pointer || modifier``, truncated to ``keys.tag_width`` bits."""
    msg = struct.pack("<II", pointer & MASK32, modifier & MASK32)
    digest = hashlib.blake2s(msg, key=keys.key.to_bytes(16, "little"), digest_size=4).digest()
    return int.from_bytes(digest, "little") & ((1 << keys.tag_width) - 1)


class FaultKind(enum.Enum):
    USAGE_FAULT = "UsageFault"
    MEM_FAULT = "MemFault"
    HARD_FAULT = "HardFault"


class UsageCause(enum.Enum):
    INVALID_STATE = "InvalidState"
    NOT_PRIVILEGED = "NotPrivileged"


_CTX = struct.Struct("<IIIIIIIIBBBB")


@dataclass(frozen=True)
class FaultContext:
    stacked_pc: int
    stacked_sp: int
    stacked_lr: int
    stacked_r0_r3: tuple
    stacked_r12: int
    epsr_b: bool
    world: World
    privileged: bool
    cfsr_invalid_state: bool

    @property
    def pc(self):
        return self.stacked_pc

    def to_bytes(self) -> bytes:
        return _CTX.pack(self.stacked_pc, self.stacked_sp, self.stacked_lr, *self.stacked_r0_r3,
                         self.stacked_r12, self.epsr_b, int(self.world), self.privileged,
                         self.cfsr_invalid_state)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FaultContext":
        pc, sp, lr, r0, r1, r2, r3, r12, b, world, priv, inv = _CTX.unpack(raw)
        return cls(pc, sp, lr, (r0, r1, r2, r3), r12, bool(b), World(world), bool(priv), bool(inv))

    SIZE = _CTX.size


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    world: World
    context: FaultContext
    cause: UsageCause = None
    address: int = None


class StepStatus(enum.Enum):
    CONTINUE = "Continue"
    HALTED = "Halted"
    FAULTED = "Faulted"
    EXC_RETURN = "ExceptionReturn"


@dataclass(frozen=True)
class StepResult:
    status: StepStatus
    fault: Fault = None
    insn: Instruction = None



@dataclass
class MachineState:
    image: ProgramImage
    memory: Memory
    regs: RegisterFile
    keys: PacKeySet
    rng: random.Random
    control: PacbtiControl = field(default_factory=PacbtiControl)
    world: World = World.SECURE
    handler_mode: bool = False
    flags: tuple = (False, False, False, False)  # n, z, c, v
    boot_epoch: int = 0
    halted: bool = False
    halt_reason: str = None
    out: list = field(default_factory=list)
    inputs: collections.deque = field(default_factory=collections.deque)
    message: collections.deque = field(default_factory=collections.deque)
    # exception / interrupt state, managed by securezone
    scr: object = None
    pending: list = field(default_factory=list)
    exc_stack: list = field(default_factory=list)
    fault_context: FaultContext = None
    ns_irq_masked: bool = False
    decode_cache: dict = field(default_factory=dict)

    @property
    def pc(self):
        return self.regs.pc

    @property
    def sp(self):
        return self.regs.sp_secure if self.world is World.SECURE else self.regs.sp_nonsecure

    @sp.setter
    def sp(self, value):
        if self.world is World.SECURE:
            self.regs.sp_secure = value & MASK32
        else:
            self.regs.sp_nonsecure = value & MASK32

    def get(self, i):
        if i < NUM_GENERAL:
            return self.regs.general[i]
        if i == SP:
            return self.sp
        if i == LR:
            return self.regs.lr
        raise IndexError(i)

    def set(self, i, value):
        value &= MASK32
        if i < NUM_GENERAL:
            self.regs.general[i] = value
        elif i == SP:
            self.sp = value
        elif i == LR:
            self.regs.lr = value
        else:
            raise IndexError(i)

    def access_ok(self, addr, size, access):
        return self.memory.check(addr, size, access, self.world, self.regs.privileged) is not None

    def fetch(self, addr):
        """Decoded instruction at addr, or None if fetch is not permitted."""
        insn = self.decode_cache.get((addr, self.world, self.regs.privileged))
        if insn is not None:
            return insn
        if addr % INSN_SIZE or not self.access_ok(addr, INSN_SIZE, X):
            return None
        insn = Instruction.decode(self.memory.read(addr, INSN_SIZE), addr)
        self.decode_cache[(addr, self.world, self.regs.privileged)] = insn
        return insn

    def capture_context(self, invalid_state=False) -> FaultContext:
        g = self.regs.general
        return FaultContext(self.regs.pc, self.sp, self.regs.lr, tuple(g[0:4]), g[TAG_REG],
                            self.regs.epsr_b, self.world, self.regs.privileged, invalid_state)


def platform_regions():
    return [
        ("secure_code", SECURE_CODE_BASE, SECURE_CODE_SIZE, R | X, World.SECURE, True),
        ("its", ITS_WINDOW_BASE, ITS_WINDOW_SIZE, R | W, World.SECURE, True),
        ("secure_ram", SECURE_RAM_BASE, SECURE_RAM_SIZE, R | W, World.SECURE, True),
    ]


def _build_memory(image: ProgramImage) -> Memory:
    regions = []
    for r in image.regions:
        contents = bytearray(r.length)
        contents[:len(r.payload)] = r.payload
        regions.append(MemoryRegion(r.name, r.base, r.length, r.flags, r.world, r.min_privileged, contents))
    for name, base, length, flags, world, priv in platform_regions():
        regions.append(MemoryRegion(name, base, length, flags, world, priv, bytearray(length)))
    return Memory(regions)


def _clear_registers(state):
    state.regs = RegisterFile()
    state.regs.pc = SECURE_RESET_VECTOR
    state.regs.sp_secure = SECURE_RAM_BASE + SECURE_RAM_SIZE
    state.world = World.SECURE
    state.handler_mode = False
    state.flags = (False, False, False, False)
    state.control = PacbtiControl()
    state.pending = []
    state.exc_stack = []
    state.fault_context = None
    state.ns_irq_masked = False
    state.halted = False
    state.halt_reason = None
    state.decode_cache = {}


def new_state(image: ProgramImage, seed: int, tag_width: int = 32) -> MachineState:
    """Power-on state: secure world at the reset vector with a fresh PAC key."""
    rng = random.Random(seed)
    state = MachineState(image=image, memory=_build_memory(image), regs=RegisterFile(),
                         keys=PacKeySet(rng.getrandbits(128), tag_width), rng=rng)
    _clear_registers(state)
    return state


def reset(state: MachineState, seed_advance: bool = True) -> MachineState:
    """Warm reset. Program memory is reloaded from the image and the PAC key redrawn.

    Storage owned by the secure partition lives outside MachineState and is untouched.
    """
    _clear_registers(state)
    state.memory = _build_memory(state.image)
    if seed_advance:
        state.keys = PacKeySet(state.rng.getrandbits(128), state.keys.tag_width)
    state.boot_epoch += 1
    return state


def _cond(flags, cond):
    n, z, c, v = flags
    return {
        Cond.EQ: z, Cond.NE: not z, Cond.LT: n != v, Cond.GE: n == v,
        Cond.GT: not z and n == v, Cond.LE: z or n != v, Cond.LO: not c, Cond.HS: c,
    }[cond]


def _fault(state, kind, cause=None, address=None):
    ctx = state.capture_context(invalid_state=cause is UsageCause.INVALID_STATE)
    return StepResult(StepStatus.FAULTED, Fault(kind, state.world, ctx, cause, address))


def _mem_fault(state, address):
    return _fault(state, FaultKind.MEM_FAULT, address=address)


def _invalid_state(state):
    return _fault(state, FaultKind.USAGE_FAULT, UsageCause.INVALID_STATE)


def step(state: MachineState) -> StepResult:
    """Execute one instruction. Faults are returned, never raised."""
    regs = state.regs
    pc = regs.pc
    insn = state.fetch(pc)
    if insn is None:
        return _mem_fault(state, pc)
    if regs.epsr_b:
        if insn.op not in LANDING_PADS:
            return _invalid_state(state)
        regs.epsr_b = False

    op = insn.op
    nxt = (pc + INSN_SIZE) & MASK32
    priv = regs.privileged
    get = state.get

    if op is Op.MOV:
        state.set(insn.a, insn.imm if insn.use_imm else get(insn.b))
    elif op is Op.ADD or op is Op.SUB:
        rhs = insn.imm if insn.use_imm else get(insn.c)
        lhs = get(insn.b)
        state.set(insn.a, lhs + rhs if op is Op.ADD else lhs - rhs)
    elif op is Op.CMP:
        a = get(insn.a)
        b = insn.imm if insn.use_imm else get(insn.c)
        res = (a - b) & MASK32
        sa, sb, sr = a >> 31, b >> 31, res >> 31
        state.flags = (bool(sr), res == 0, a >= b, sa != sb and sr != sa)
    elif op is Op.LDR or op is Op.STR:
        addr = (get(insn.b) + insn.imm) & MASK32
        if addr % 4 or not state.access_ok(addr, 4, R if op is Op.LDR else W):
            return _mem_fault(state, addr)
        if op is Op.LDR:
            state.set(insn.a, state.memory.read_word(addr))
        else:
            state.memory.write_word(addr, get(insn.a))
    elif op is Op.B:
        nxt = insn.imm
    elif op is Op.BCOND:
        if _cond(state.flags, Cond(insn.a)):
            nxt = insn.imm
    elif op is Op.BL:
        regs.lr = nxt
        nxt = insn.imm
    elif op is Op.BX or op is Op.BLX:
        target = get(insn.a)
        if op is Op.BX and target == EXC_RETURN:
            return StepResult(StepStatus.EXC_RETURN, insn=insn)
        if op is Op.BLX:
            regs.lr = nxt
        if state.control.bti_enabled(priv):
            regs.epsr_b = True
        nxt = target
    elif op is Op.RET:
        if regs.lr == EXC_RETURN:
            return StepResult(StepStatus.EXC_RETURN, insn=insn)
        nxt = regs.lr
    elif op is Op.PUSH:
        regs_list = reglist(insn.imm)
        base = (state.sp - 4 * len(regs_list)) & MASK32
        if not state.access_ok(base, 4 * len(regs_list), W):
            return _mem_fault(state, base)
        values = [get(i) for i in regs_list]
        for k, v in enumerate(values):
            state.memory.write_word(base + 4 * k, v)
        state.sp = base
    elif op is Op.POP:
        regs_list = reglist(insn.imm)
        base = state.sp
        if not state.access_ok(base, 4 * len(regs_list), R):
            return _mem_fault(state, base)
        values = [state.memory.read_word(base + 4 * k) for k in range(len(regs_list))]
        state.sp = base + 4 * len(regs_list)
        for i, v in zip(regs_list, values):
            state.set(i, v)
    elif op is Op.PACG or op is Op.PACBTI:
        if state.control.pac_enabled(priv):
            regs.general[TAG_REG] = pac_compute(regs.lr, state.sp, state.keys)
    elif op is Op.AUT:
        if state.control.pac_enabled(priv):
            if pac_compute(regs.lr, state.sp, state.keys) != regs.general[TAG_REG]:
                return _invalid_state(state)
    elif op is Op.BTI or op is Op.NOP:
        pass
    elif op is Op.MSR:
        if not priv:
            return _fault(state, FaultKind.USAGE_FAULT, UsageCause.NOT_PRIVILEGED)
        value = get(insn.a)
        if insn.imm == SysReg.PACBTI_CTRL:
            state.control = PacbtiControl.from_mask(value)
        elif insn.imm == SysReg.CONTROL:
            if value & 1:
                regs.privileged = False
                state.decode_cache = {}
        else:
            raise UndecodableInstruction(pc, insn.encode())
    elif op is Op.MRS:
        if insn.imm == SysReg.PACBTI_CTRL:
            state.set(insn.a, state.control.mask)
        elif insn.imm == SysReg.CONTROL:
            state.set(insn.a, 0 if priv else 1)
        else:
            raise UndecodableInstruction(pc, insn.encode())
    elif op is Op.SVC:
        if insn.imm == SVC_RECV_LEN:
            msg = state.inputs.popleft() if state.inputs else ()
            state.message = collections.deque(msg)
            state.set(0, len(msg))
        elif insn.imm == SVC_RECV_WORD:
            state.set(0, state.message.popleft() if state.message else 0)
    elif op is Op.OUT:
        state.out.append(insn.imm if insn.use_imm else get(insn.a))
    elif op is Op.HALT:
        state.halted = True
        state.halt_reason = "halt"
        return StepResult(StepStatus.HALTED, insn=insn)
    else:  # pragma: no cover - Op is exhaustive
        raise UndecodableInstruction(pc, insn.encode())

    regs.pc = nxt & MASK32
    return StepResult(StepStatus.CONTINUE, insn=insn)
