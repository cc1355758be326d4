"""Assembler for the toy ISA, plus the PAC/BTI instrumentation pass.

Source grammar, one statement per line (``;`` starts a comment)::

    fn name[!indirect]:        open a function
    label[!indirect]:          label the next instruction (or data item)
    OP dst, src[, src2]        instruction; immediates are #n or #label
    .data                      switch to the data section
    db 1, 0x41, "text"         bytes
    dw 0x1234, label           32-bit little-endian words

Branch operands are bare labels. PUSH/POP take a register list ``{r4, lr}``.
"""

import copy
import re
from dataclasses import dataclass, field, replace

from .image import R, W, X, ProgramImage, RegionImage, World
from .isa import (
    CALLS, INSN_SIZE, LR, MASK32, NUM_GENERAL, SP, TAG_REG, Cond, Instruction, Op, SysReg,
    disassemble, reglist,
)

START_SYMBOL = "_start"
PARK_SYMBOL = "__runpba_park"
STACK_TOP_SYMBOL = "__stack_top"
RESERVED = {START_SYMBOL, PARK_SYMBOL, STACK_TOP_SYMBOL}


class AssemblySyntaxError(SyntaxError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class UnresolvedLabel(Exception):
    def __init__(self, name, line=None):
        super().__init__(f"unresolved label {name!r}" + (f" (line {line})" if line else ""))
        self.name = name
        self.line = line


class InstrumentTwice(Exception):
    pass


class ImageOverflow(Exception):
    pass


@dataclass(frozen=True)
class AsmInstruction:
    op: Op
    a: int = 0
    b: int = 0
    c: int = 0
    imm: object = 0          # int, or label name resolved at assembly time
    use_imm: bool = False
    line: int = 0
    labels: tuple = ()       # ((name, indirect), ...) naming this instruction's address

    @property
    def indirect_labels(self):
        return [name for name, ind in self.labels if ind]

    def resolve(self, symbols) -> Instruction:
        imm = self.imm
        if isinstance(imm, str):
            if imm not in symbols:
                raise UnresolvedLabel(imm, self.line)
            imm = symbols[imm]
        return Instruction(self.op, self.a, self.b, self.c, imm & MASK32, self.use_imm)


@dataclass
class Function:
    name: str
    body: list
    is_indirect_target: bool = False

    @property
    def is_leaf(self):
        return not any(i.op in CALLS for i in self.body)


@dataclass
class DataBlob:
    labels: tuple
    items: list = field(default_factory=list)   # ("b", value) | ("w", value-or-label)
    line: int = 0


@dataclass(frozen=True)
class RegionPlan:
    code_base: int = 0x0001_0000
    code_size: int = 0x4000
    data_base: int = 0x2000_0000
    data_size: int = 0x1000
    stack_base: int = 0x2000_8000
    stack_size: int = 0x1000


@dataclass
class Program:
    functions: list
    data: list = field(default_factory=list)
    entry: str = "main"
    region_plan: RegionPlan = field(default_factory=RegionPlan)

    def function(self, name) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def non_entry_indirect_targets(self):
        return [n for f in self.functions for i in f.body for n in i.indirect_labels]


@dataclass(frozen=True)
class InstrumentConfig:
    pac: bool = False
    bti: bool = False


# ---------------------------------------------------------------- parsing

_REGS = {f"r{i}": i for i in range(NUM_GENERAL)}
_REGS.update(sp=SP, lr=LR, r13=SP, r14=LR)
_IDENT = r"[A-Za-z_.$][\w.$]*"
_LABEL_RE = re.compile(rf"^({_IDENT})(!indirect)?:$")
_FN_RE = re.compile(rf"^fn\s+({_IDENT})(!indirect)?:$")
_COND_BRANCHES = {f"B{c.name}": c for c in Cond}


def _split_operands(text):
    out, depth, cur, quoted = [], 0, "", False
    for ch in text:
        if ch == '"':
            quoted = not quoted
        if not quoted and ch == "{":
            depth += 1
        elif not quoted and ch == "}":
            depth -= 1
        if ch == "," and depth == 0 and not quoted:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _strip_comment(line):
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == ";" and not quoted:
            return line[:i]
    return line


def _number(tok, lineno):
    try:
        return int(tok, 0)
    except ValueError:
        raise AssemblySyntaxError(lineno, f"bad number {tok!r}") from None


class _Parser:
    def __init__(self, text):
        self.text = text
        self.functions = []
        self.data = []
        self.pending_labels = []
        self.pending_line = 0
        self.section = None      # "code" | "data"
        self.current = None
        self.refs = []           # (label, line)
        self.defined = {}

    def define(self, name, lineno):
        if name in self.defined or name in RESERVED:
            raise AssemblySyntaxError(lineno, f"duplicate label {name!r}")
        self.defined[name] = lineno

    def flush_labels(self, lineno):
        if self.pending_labels:
            if self.section == "data":
                self.data.append(DataBlob(tuple(n for n, _ in self.pending_labels), [], self.pending_line))
                self.pending_labels = []
            else:
                raise AssemblySyntaxError(self.pending_line, "label not followed by an instruction")

    def reg(self, tok, lineno):
        r = _REGS.get(tok.lower())
        if r is None:
            raise AssemblySyntaxError(lineno, f"expected register, got {tok!r}")
        return r

    def imm(self, tok, lineno):
        if not tok.startswith("#"):
            raise AssemblySyntaxError(lineno, f"expected immediate, got {tok!r}")
        body = tok[1:].strip()
        if re.fullmatch(_IDENT, body):
            self.refs.append((body, lineno))
            return body
        return _number(body, lineno) & MASK32

    def reg_or_imm(self, tok, lineno):
        if tok.startswith("#"):
            return 0, self.imm(tok, lineno), True
        return self.reg(tok, lineno), 0, False

    def label_ref(self, tok, lineno):
        if not re.fullmatch(_IDENT, tok):
            raise AssemblySyntaxError(lineno, f"expected label, got {tok!r}")
        self.refs.append((tok, lineno))
        return tok

    def reglist(self, tok, lineno):
        if not (tok.startswith("{") and tok.endswith("}")):
            raise AssemblySyntaxError(lineno, f"expected register list, got {tok!r}")
        mask = 0
        for part in tok[1:-1].split(","):
            r = self.reg(part.strip(), lineno)
            if r == SP:
                raise AssemblySyntaxError(lineno, "sp cannot appear in a register list")
            mask |= 1 << r
        if not mask:
            raise AssemblySyntaxError(lineno, "empty register list")
        return mask

    def sysreg(self, tok, lineno):
        try:
            return int(SysReg[tok.upper()])
        except KeyError:
            raise AssemblySyntaxError(lineno, f"unknown system register {tok!r}") from None

    def instruction(self, mnemonic, ops, lineno):
        m = mnemonic.upper()
        n = len(ops)

        def arity(*allowed):
            if n not in allowed:
                raise AssemblySyntaxError(lineno, f"{m} takes {' or '.join(map(str, allowed))} operands")

        if m in _COND_BRANCHES:
            arity(1)
            return AsmInstruction(Op.BCOND, a=int(_COND_BRANCHES[m]), imm=self.label_ref(ops[0], lineno))
        try:
            op = Op[m]
        except KeyError:
            raise AssemblySyntaxError(lineno, f"unknown mnemonic {mnemonic!r}") from None
        if op is Op.BCOND:
            raise AssemblySyntaxError(lineno, "use B<cond> mnemonics such as BEQ")
        if op is Op.MOV:
            arity(2)
            src, imm, use_imm = self.reg_or_imm(ops[1], lineno)
            return AsmInstruction(op, a=self.reg(ops[0], lineno), b=src, imm=imm, use_imm=use_imm)
        if op in (Op.ADD, Op.SUB):
            arity(3)
            c, imm, use_imm = self.reg_or_imm(ops[2], lineno)
            return AsmInstruction(op, a=self.reg(ops[0], lineno), b=self.reg(ops[1], lineno),
                                  c=c, imm=imm, use_imm=use_imm)
        if op is Op.CMP:
            arity(2)
            c, imm, use_imm = self.reg_or_imm(ops[1], lineno)
            return AsmInstruction(op, a=self.reg(ops[0], lineno), c=c, imm=imm, use_imm=use_imm)
        if op in (Op.LDR, Op.STR):
            arity(2, 3)
            off = self.imm(ops[2], lineno) if n == 3 else 0
            return AsmInstruction(op, a=self.reg(ops[0], lineno), b=self.reg(ops[1], lineno), imm=off)
        if op in (Op.B, Op.BL):
            arity(1)
            return AsmInstruction(op, imm=self.label_ref(ops[0], lineno))
        if op in (Op.BX, Op.BLX):
            arity(1)
            return AsmInstruction(op, a=self.reg(ops[0], lineno))
        if op in (Op.PUSH, Op.POP):
            arity(1)
            return AsmInstruction(op, imm=self.reglist(ops[0], lineno))
        if op is Op.MSR:
            arity(2)
            return AsmInstruction(op, a=self.reg(ops[1], lineno), imm=self.sysreg(ops[0], lineno))
        if op is Op.MRS:
            arity(2)
            return AsmInstruction(op, a=self.reg(ops[0], lineno), imm=self.sysreg(ops[1], lineno))
        if op is Op.SVC:
            arity(1)
            return AsmInstruction(op, imm=self.imm(ops[0], lineno), use_imm=True)
        if op is Op.OUT:
            arity(1)
            a, imm, use_imm = self.reg_or_imm(ops[0], lineno)
            return AsmInstruction(op, a=a, imm=imm, use_imm=use_imm)
        arity(0)
        return AsmInstruction(op)

    def data_items(self, directive, ops, lineno):
        items = []
        for tok in ops:
            if directive == "db":
                if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
                    items.extend(("b", b) for b in tok[1:-1].encode().decode("unicode_escape").encode("latin-1"))
                else:
                    v = _number(tok, lineno)
                    if not 0 <= v <= 0xFF:
                        raise AssemblySyntaxError(lineno, f"byte out of range: {tok}")
                    items.append(("b", v))
            else:
                if re.fullmatch(_IDENT, tok):
                    self.refs.append((tok, lineno))
                    items.append(("w", tok))
                else:
                    items.append(("w", _number(tok, lineno) & MASK32))
        return items

    def run(self):
        for lineno, raw in enumerate(self.text.splitlines(), 1):
            line = _strip_comment(raw).strip()
            if not line:
                continue
            if line == ".data":
                self.flush_labels(lineno)
                self.section, self.current = "data", None
                continue
            m = _FN_RE.match(line)
            if m:
                self.flush_labels(lineno)
                name = m.group(1)
                self.define(name, lineno)
                self.current = Function(name, [], bool(m.group(2)))
                self.functions.append(self.current)
                self.section = "code"
                continue
            m = _LABEL_RE.match(line)
            if m:
                if self.section is None:
                    raise AssemblySyntaxError(lineno, "label outside any function or data section")
                self.define(m.group(1), lineno)
                if not self.pending_labels:
                    self.pending_line = lineno
                if self.section == "data":
                    # consecutive data labels each get their own (possibly empty) blob
                    self.flush_labels(lineno)
                    self.pending_line = lineno
                self.pending_labels.append((m.group(1), bool(m.group(2))))
                continue
            parts = line.split(None, 1)
            mnemonic, rest = parts[0], parts[1] if len(parts) > 1 else ""
            ops = _split_operands(rest)
            if self.section == "data":
                if mnemonic.lower() not in ("db", "dw"):
                    raise AssemblySyntaxError(lineno, f"expected db/dw in data section, got {mnemonic!r}")
                if self.pending_labels:
                    blob = DataBlob(tuple(n for n, _ in self.pending_labels), [], self.pending_line)
                    self.data.append(blob)
                    self.pending_labels = []
                elif not self.data:
                    raise AssemblySyntaxError(lineno, "data item without a label")
                self.data[-1].items.extend(self.data_items(mnemonic.lower(), ops, lineno))
                continue
            if self.current is None:
                raise AssemblySyntaxError(lineno, "instruction outside a function")
            insn = self.instruction(mnemonic, ops, lineno)
            insn = replace(insn, line=lineno, labels=tuple(self.pending_labels))
            self.pending_labels = []
            self.current.body.append(insn)
        self.flush_labels(lineno if self.text else 0)
        for name, lineno in self.refs:
            if name not in self.defined:
                raise UnresolvedLabel(name, lineno)
        for f in self.functions:
            if not f.body:
                raise AssemblySyntaxError(self.defined[f.name], f"function {f.name!r} is empty")


def parse(text: str, entry: str = "main") -> Program:
    """Parse assembly source into a Program with every label checked."""
    p = _Parser(text)
    p.run()
    if not any(f.name == entry for f in p.functions):
        raise UnresolvedLabel(entry)
    return Program(p.functions, p.data, entry)


# ---------------------------------------------------------------- instrumentation

def instrument(program: Program, cfg: InstrumentConfig) -> Program:
    """Insert PAC/BTI instructions the way a branch-protection-aware compiler does.

    Every function entry gets a landing pad / tag generation instruction,
    every RET is preceded by AUT, non-leaf functions spill r12 after the
    entry and reload it before AUT, and labels marked ``!indirect`` get BTI.
    """
    if not (cfg.pac or cfg.bti):
        return copy.deepcopy(program)
    for f in program.functions:
        if f.body[0].op in (Op.PACBTI, Op.BTI, Op.PACG):
            raise InstrumentTwice(f"function {f.name!r} is already instrumented")
    entry_op = Op.PACBTI if cfg.pac and cfg.bti else Op.PACG if cfg.pac else Op.BTI
    spill = AsmInstruction(Op.PUSH, imm=1 << TAG_REG)
    reload = AsmInstruction(Op.POP, imm=1 << TAG_REG)
    functions = []
    for f in program.functions:
        nonleaf = not f.is_leaf
        line = f.body[0].line
        body = [AsmInstruction(entry_op, line=line)]
        if cfg.pac and nonleaf:
            body.append(replace(spill, line=line))
        for insn in f.body:
            pre = []
            if cfg.bti and insn.indirect_labels:
                pre.append(AsmInstruction(Op.BTI, line=insn.line))
            if cfg.pac and insn.op is Op.RET:
                if nonleaf:
                    pre.append(replace(reload, line=insn.line))
                pre.append(AsmInstruction(Op.AUT, line=insn.line))
            if pre:
                pre[0] = replace(pre[0], labels=insn.labels)
                insn = replace(insn, labels=())
            body.extend(pre)
            body.append(insn)
        functions.append(Function(f.name, body, f.is_indirect_target))
    return Program(functions, copy.deepcopy(program.data), program.entry, program.region_plan)


def expected_size_delta(program: Program, cfg: InstrumentConfig) -> int:
    """Instruction-count growth that instrument() must produce for ``program``."""
    if not (cfg.pac or cfg.bti):
        return 0
    delta = len(program.functions)
    if cfg.bti:
        delta += len(program.non_entry_indirect_targets)
    if cfg.pac:
        for f in program.functions:
            rets = sum(1 for i in f.body if i.op is Op.RET)
            delta += rets
            if not f.is_leaf:
                delta += 1 + rets
    return delta


# ---------------------------------------------------------------- emission

def _crt0(entry):
    return [
        AsmInstruction(Op.BL, imm=entry, labels=((START_SYMBOL, False),)),
        AsmInstruction(Op.HALT),
        AsmInstruction(Op.B, imm=PARK_SYMBOL, labels=((PARK_SYMBOL, False),)),
    ]


def layout(program: Program):
    """Return (code listing as [(address, AsmInstruction)], symbol table)."""
    plan = program.region_plan
    listing = []
    symbols = {}
    addr = plan.code_base
    for insn in _crt0(program.entry):
        listing.append((addr, insn))
        addr += INSN_SIZE
    for f in program.functions:
        symbols[f.name] = addr
        for insn in f.body:
            listing.append((addr, insn))
            addr += INSN_SIZE
    for a, insn in listing:
        for name, _ in insn.labels:
            symbols[name] = a
    daddr = plan.data_base
    for blob in program.data:
        daddr = (daddr + 3) & ~3
        for name in blob.labels:
            symbols[name] = daddr
        for kind, _ in blob.items:
            if kind == "w":
                daddr = (daddr + 3) & ~3
            daddr += 4 if kind == "w" else 1
    symbols[STACK_TOP_SYMBOL] = plan.stack_base + plan.stack_size
    return listing, symbols


def assemble(program: Program) -> ProgramImage:
    plan = program.region_plan
    listing, symbols = layout(program)
    code = b"".join(insn.resolve(symbols).encode() for _, insn in listing)
    if len(code) > plan.code_size:
        raise ImageOverflow(f"code is {len(code)} bytes, region holds {plan.code_size}")
    data = bytearray()
    for blob in program.data:
        data.extend(b"\0" * (-len(data) % 4))
        for kind, value in blob.items:
            if kind == "b":
                data.append(value)
            else:
                data.extend(b"\0" * (-len(data) % 4))
                v = symbols[value] if isinstance(value, str) else value
                data.extend((v & MASK32).to_bytes(4, "little"))
    if len(data) > plan.data_size:
        raise ImageOverflow(f"data is {len(data)} bytes, region holds {plan.data_size}")
    regions = [
        RegionImage("code", plan.code_base, plan.code_size, R | X, World.NON_SECURE, False, code),
        RegionImage("data", plan.data_base, plan.data_size, R | W, World.NON_SECURE, False, bytes(data)),
        RegionImage("stack", plan.stack_base, plan.stack_size, R | W, World.NON_SECURE, False, b""),
    ]
    return ProgramImage(regions, symbols, symbols[START_SYMBOL])


def _fmt_insn(insn: AsmInstruction):
    if isinstance(insn.imm, str) or insn.op in (Op.B, Op.BL, Op.BCOND):
        target = insn.imm if isinstance(insn.imm, str) else f"{insn.imm:#x}"
        if insn.op is Op.BCOND:
            return f"B{Cond(insn.a).name} {target}"
        if insn.op in (Op.B, Op.BL):
            return f"{insn.op.name} {target}"
        text = disassemble(Instruction(insn.op, insn.a, insn.b, insn.c, 0, insn.use_imm))
        return text.replace("#0x0", f"#{target}").replace("#0", f"#{target}")
    return disassemble(Instruction(insn.op, insn.a, insn.b, insn.c, insn.imm, insn.use_imm))


def format_program(program: Program) -> str:
    """Render a Program back to source; the output parses to the same structure."""
    lines = []
    for f in program.functions:
        lines.append(f"fn {f.name}{'!indirect' if f.is_indirect_target else ''}:")
        for insn in f.body:
            for name, ind in insn.labels:
                lines.append(f"{name}{'!indirect' if ind else ''}:")
            lines.append(f"    {_fmt_insn(insn)}")
    if program.data:
        lines.append(".data")
        for blob in program.data:
            lines.extend(f"{name}:" for name in blob.labels)
            for kind, value in blob.items:
                lines.append(f"    {'db' if kind == 'b' else 'dw'} {value}")
    return "\n".join(lines) + "\n"


def function_at(program: Program, image: ProgramImage, addr):
    """Function whose entry symbol is ``addr`` (None if addr is not an entry)."""
    for f in program.functions:
        if image.symbols.get(f.name) == addr:
            return f
    return None


__all__ = [
    "AsmInstruction", "AssemblySyntaxError", "DataBlob", "Function", "ImageOverflow",
    "InstrumentConfig", "InstrumentTwice", "Program", "RegionPlan", "UnresolvedLabel",
    "assemble", "expected_size_delta", "format_program", "instrument", "layout", "parse",
    "reglist",
]
