"""Scenario engine: provisions devices, injects attacks through an out-of-band
memory primitive, services attestation checkpoints and produces reports.

Scenario scripts are ``key = value`` lines; ``#`` starts a comment::

    name = rop_protected
    program = echo_service.s
    instrument = pac+bti
    attack = RopReturn
    policy = HoldInSpe
    attestations = 50, 100000
    seed = 7
    input = 1, 2, 3
    input = 4
    expect.fault_kind = PacFault
"""

import ast
import enum
import json
import os
import random
from dataclasses import dataclass, field

from . import attestation as att
from .assembler import InstrumentConfig, assemble, instrument, parse
from .device import DEFAULT_STEP_LIMIT, Device, RunResult, no_resume_violations
from .image import R, W, World
from .isa import CALLS, INSN_SIZE, Op
from .machine import PacbtiControl, UsageCause
from .runpba import Policy, StorageFailure, ViolationKind

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
FIXTURES_DIR = os.path.join(PACKAGE_DIR, "fixtures")
SCENARIOS_DIR = os.path.join(PACKAGE_DIR, "scenarios")

WIN_MARKER = 0x57494E21
FILLER = 0x41414141


class ScenarioError(Exception):
    pass


class GadgetNotFound(ScenarioError):
    pass


class NotPrivileged(ScenarioError):
    pass


class NonTermination(ScenarioError):
    pass


class AccessDenied(Exception):
    pass


class AttackKind(enum.Enum):
    NONE = "None"
    ROP_RETURN = "RopReturn"
    BTI_FORWARD = "BtiForwardEdge"
    BRUTE_FORCE = "PacBruteForce"
    PAC_REUSE = "PacReuse"
    FOP_DISABLE = "FopDisablePacbti"


def parse_instrument(text) -> InstrumentConfig:
    parts = {p.strip().lower() for p in text.replace("+", ",").split(",") if p.strip()}
    parts.discard("none")
    unknown = parts - {"pac", "bti"}
    if unknown:
        raise ScenarioError(f"unknown instrumentation flag(s): {', '.join(sorted(unknown))}")
    return InstrumentConfig("pac" in parts, "bti" in parts)


def format_instrument(cfg: InstrumentConfig):
    return "+".join(n for n, on in (("pac", cfg.pac), ("bti", cfg.bti)) if on) or "none"


def features_for(cfg: InstrumentConfig) -> PacbtiControl:
    """Feature enables the secure boot programs for an image built with ``cfg``."""
    return PacbtiControl(cfg.pac, cfg.pac, cfg.bti, cfg.bti)


# ---------------------------------------------------------------- scripts

@dataclass
class ScenarioScript:
    name: str
    program: str
    instrument: InstrumentConfig = field(default_factory=InstrumentConfig)
    attack: AttackKind = AttackKind.NONE
    attempts: int = 0
    tag_width: int = 32
    window: tuple = None
    policy: Policy = Policy.HOLD_IN_SPE
    attestations: list = field(default_factory=list)
    seed: int = 0
    inputs: list = field(default_factory=list)
    nspe_privileged: bool = False
    step_limit: int = DEFAULT_STEP_LIMIT
    expect: dict = field(default_factory=dict)
    source_path: str = None


def _parse_value(text):
    if text.startswith("["):
        try:
            return ast.literal_eval(text)
        except (ValueError, SyntaxError):
            raise ScenarioError(f"bad list literal: {text}") from None
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(text, 0)
    except ValueError:
        return text


def _int_list(text):
    return [int(t, 0) for t in text.replace(",", " ").split()]


def parse_scenario(text, path=None) -> ScenarioScript:
    kv = {}
    inputs = []
    expect = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ScenarioError(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key == "input":
            inputs.append(_int_list(value))
        elif key.startswith("expect."):
            expect[key[len("expect."):]] = _parse_value(value)
        elif key in kv:
            raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
        else:
            kv[key] = value
    known = {"name", "program", "instrument", "attack", "attempts", "tag_width", "window", "policy",
             "attestations", "seed", "nspe_privileged", "step_limit"}
    extra = set(kv) - known
    if extra:
        raise ScenarioError(f"unknown key(s): {', '.join(sorted(extra))}")
    if "program" not in kv:
        raise ScenarioError("scenario has no program")
    try:
        script = ScenarioScript(
            name=kv.get("name") or os.path.splitext(os.path.basename(path or "scenario"))[0],
            program=kv["program"],
            instrument=parse_instrument(kv.get("instrument", "none")),
            attack=AttackKind(kv.get("attack", "None")),
            attempts=int(kv.get("attempts", "0"), 0),
            tag_width=int(kv.get("tag_width", "32"), 0),
            window=tuple(_int_list(kv["window"])) if "window" in kv else None,
            policy=Policy(kv.get("policy", "HoldInSpe")),
            attestations=_int_list(kv.get("attestations", "")),
            seed=int(kv.get("seed", "0"), 0) & ((1 << 64) - 1),
            inputs=inputs,
            nspe_privileged=kv.get("nspe_privileged", "false").lower() == "true",
            step_limit=int(kv.get("step_limit", str(DEFAULT_STEP_LIMIT)), 0),
            expect=expect,
            source_path=path,
        )
    except ValueError as e:
        raise ScenarioError(str(e)) from None
    if script.window is not None and len(script.window) != 2:
        raise ScenarioError("window needs exactly two step indices")
    return script


def load_scenario(path) -> ScenarioScript:
    with open(path) as f:
        return parse_scenario(f.read(), path)


def resolve_program(script: ScenarioScript):
    candidates = []
    if script.source_path:
        candidates.append(os.path.join(os.path.dirname(script.source_path), script.program))
    candidates += [script.program, os.path.join(FIXTURES_DIR, script.program)]
    for c in candidates:
        if os.path.isfile(c):
            return c
    raise ScenarioError(f"program not found: {script.program}")


def load_program(path):
    with open(path) as f:
        return parse(f.read())


def build_image(program, cfg: InstrumentConfig):
    return assemble(instrument(program, cfg))


# ---------------------------------------------------------------- attacker

class Attacker:
    """Arbitrary read/write of non-secure memory, subject to region permissions.

    The attacker acts between instructions; it cannot execute code or touch
    secure memory or registers.
    """

    def __init__(self, device: Device):
        self.device = device
        self.writes = []

    def _check(self, addr, access):
        mem = self.device.machine.memory
        if addr % 4 or mem.check(addr, 4, access, World.NON_SECURE, True) is None:
            raise AccessDenied(f"attacker cannot {'write' if access == W else 'read'} {addr:#010x}")

    def read_word(self, addr):
        self._check(addr, R)
        return self.device.machine.memory.read_word(addr)

    def write_word(self, addr, value):
        self._check(addr, W)
        self.device.machine.memory.write_word(addr, value)
        self.writes.append((self.device.steps, addr, value))

    def stack_bounds(self):
        r = self.device.image.region("stack")
        return r.base, r.end

    def find_on_stack(self, value):
        """Highest-addressed stack word equal to ``value`` (innermost frames sit lower,
        so this finds the outermost live copy first)."""
        lo, hi = self.stack_bounds()
        for addr in range(hi - 4, lo - 4, -4):
            if self.read_word(addr) == value:
                return addr
        return None


@dataclass
class InjectionPlan:
    trigger: str
    writes: list            # [(address, value)]
    description: str = ""

    def apply(self, attacker: Attacker):
        for addr, value in self.writes:
            attacker.write_word(addr, value)


def _symbol(image, name):
    try:
        return image.symbols[name]
    except KeyError:
        raise GadgetNotFound(f"symbol {name!r} not in image") from None


def return_sites(image, callee):
    """Addresses every ``BL callee`` returns to, in code order."""
    target = _symbol(image, callee)
    return [addr + INSN_SIZE for addr, insn in image.instructions()
            if insn.op is Op.BL and insn.imm == target]


def return_site(image, callee):
    sites = return_sites(image, callee)
    if not sites:
        raise GadgetNotFound(f"no call to {callee!r}")
    return sites[0]


def _secret(image):
    start, end = _symbol(image, "secret"), _symbol(image, "secret_end")
    return start, (end - start) // 4


def _saved_lr_slot(attacker, ret):
    slot = attacker.find_on_stack(ret)
    if slot is None:
        raise GadgetNotFound(f"return address {ret:#010x} not on the stack")
    return slot


def attack_rop_return(device: Device) -> InjectionPlan:
    """Overflow echo1's buffer: saved lr -> log_block_emit gadget, which prints
    the secret and returns to main through a forged frame."""
    image = device.image
    attacker = Attacker(device)
    gadget = _symbol(image, "log_block_emit")
    secret, n = _secret(image)
    ret = return_site(image, "echo1")
    lr_slot = _saved_lr_slot(attacker, ret)
    buf = lr_slot - 24      # buf[4], r4, r5 sit below the saved lr
    words = [FILLER] * 6 + [gadget, secret, n, FILLER, ret]
    return InjectionPlan("echo1_trigger", [(buf + 4 * i, w) for i, w in enumerate(words)],
                         "echo1 overflow: lr -> log_block_emit, leak secret, return to main")


def attack_bti_forward(device: Device) -> InjectionPlan:
    """Overflow echo2's buffer into its handler pointer so BLX lands mid-function
    on the log_block_emit gadget."""
    image = device.image
    attacker = Attacker(device)
    gadget = _symbol(image, "log_block_emit")
    resume = _symbol(image, "echo2_drop_handler")
    secret, n = _secret(image)
    lr_slot = _saved_lr_slot(attacker, return_site(image, "echo2"))
    buf = lr_slot - 28      # buf[4], handler, r4, r5 sit below the saved lr
    words = [secret, n, FILLER, resume, gadget]
    return InjectionPlan("echo2_trigger", [(buf + 4 * i, w) for i, w in enumerate(words)],
                         "echo2 overflow: handler -> log_block_emit, leak secret, resume echo2")


@dataclass
class BruteForceStats:
    successes: int
    attempts: int
    resets: int
    tag_width: int
    boot_epoch_delta: int


def attack_brute_force(device: Device, attempts, tag_width, rng=None, step_limit=DEFAULT_STEP_LIMIT):
    """Forge (lr = main_win, tag = random) at bf_site until ``attempts`` forgeries
    were tried. Every wrong guess faults, gets persisted and resets the device."""
    image = device.image
    rng = rng or random.Random(device.seed ^ 0xB5)
    win = _symbol(image, "main_win")
    ret = return_site(image, "service")
    attacker = Attacker(device)
    done = [0]
    epoch0 = device.machine.boot_epoch
    resets0 = sum(1 for e in device.events if e.kind == "reset")
    wins0 = device.out.count(WIN_MARKER)

    def forge(dev):
        if done[0] >= attempts:
            dev.stop_requested = True
            return
        lr_slot = _saved_lr_slot(attacker, ret)
        attacker.write_word(lr_slot, win)
        attacker.write_word(lr_slot + 4, rng.getrandbits(tag_width))
        done[0] += 1

    device.breakpoints[_symbol(image, "bf_site")] = forge
    if not device.machine.inputs:
        device.machine.inputs.extend([k] for k in range(1, attempts + 2))
    result = device.run(step_limit, stop_when_parked=True)
    del device.breakpoints[_symbol(image, "bf_site")]
    if result is RunResult.STEP_LIMIT:
        raise NonTermination("brute force did not finish within the step limit")
    resets = sum(1 for e in device.events if e.kind == "reset") - resets0
    return BruteForceStats(device.out.count(WIN_MARKER) - wins0, done[0], resets, tag_width,
                           device.machine.boot_epoch - epoch0)


class PacReuse:
    """Harvest the spilled (lr, tag) pair during the first call to worker and
    replay it during the second. Both calls run at the same sp, so AUT accepts
    the replayed pair and worker returns to the first call site again."""

    def __init__(self, device: Device):
        self.device = device
        self.attacker = Attacker(device)
        self.site = _symbol(device.image, "reuse_site")
        sites = return_sites(device.image, "worker")
        if len(sites) < 2:
            raise GadgetNotFound("reuse needs two calls to worker")
        self.first, self.second = sites[:2]
        self.harvested = None
        self.replayed = False

    def __call__(self, dev):
        a = self.attacker
        if self.harvested is None:
            slot = a.find_on_stack(self.first)
            if slot is not None:
                self.harvested = (a.read_word(slot), a.read_word(slot + 4))
        elif not self.replayed:
            slot = a.find_on_stack(self.second)
            if slot is not None:
                a.write_word(slot, self.harvested[0])
                a.write_word(slot + 4, self.harvested[1])
                self.replayed = True

    def install(self):
        self.device.breakpoints[self.site] = self


@dataclass
class FopAttack:
    actions: list               # [(step, callable(device))]
    observed: dict = field(default_factory=dict)


def attack_fop_disable(device: Device, window) -> FopAttack:
    """Timeline actions rewriting the dispatcher's hook row: at ``window[0]`` it
    names pacbti_config(0), at ``window[1]`` pacbti_config(all on).

    The caller runs the device and fires each action once its step is reached.
    Nothing here checks privilege: an unprivileged world reaches the MSR and
    faults, which the harness reports as NotPrivileged.
    """
    image = device.image
    attacker = Attacker(device)
    gadget = _symbol(image, "pacbti_config")
    hook = _symbol(image, "hook_slot")
    disable_step, enable_step = window
    if not disable_step < enable_step:
        raise ScenarioError("window must satisfy disable_step < enable_step")
    full = device.features.mask
    attack = FopAttack([])

    def disable(dev):
        attacker.write_word(hook, gadget)
        attacker.write_word(hook + 4, 0)

    def enable(dev):
        attack.observed["disabled_before_enable"] = dev.machine.control.mask != full
        attacker.write_word(hook, gadget)
        attacker.write_word(hook + 4, full)

    attack.actions = [(disable_step, disable), (enable_step, enable)]
    return attack


# ---------------------------------------------------------------- reports

REPORT_FIELDS = (
    "name", "attack", "instrument", "policy", "seed",
    "secret_leaked", "fault_raised", "fault_kind", "fault_pc", "lifecycle_final",
    "tokens", "instr_counts", "detection_gap",
    "attack_succeeded", "completed", "run_result", "steps", "boot_epoch",
    "fault_records", "out_length", "out_head", "extra",
)


@dataclass
class ScenarioReport:
    name: str
    attack: str
    instrument: str
    policy: str
    seed: int
    secret_leaked: bool
    fault_raised: bool
    fault_kind: str
    fault_pc: str
    lifecycle_final: str
    tokens: list
    instr_counts: dict
    detection_gap: bool
    attack_succeeded: bool
    completed: bool
    run_result: str
    steps: int
    boot_epoch: int
    fault_records: int
    out_length: int
    out_head: list
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def to_json(self) -> str:
        """Deterministic serialization: fixed field order, no floats beyond repr."""
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def lookup(self, path):
        """Value at a dotted path such as ``tokens[-1].runtime_failure``."""
        cur = self.to_dict()
        for part in path.split("."):
            name, _, idx = part.partition("[")
            if name:
                cur = cur[name]
            if idx:
                cur = cur[int(idx.rstrip("]"))]
        return cur


def _contains_run(haystack, needle):
    n = len(needle)
    return n > 0 and any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def secret_words(image):
    if "secret" not in image.symbols or "secret_end" not in image.symbols:
        return []
    start, end = image.symbols["secret"], image.symbols["secret_end"]
    data = image.region("data")
    raw = data.payload[start - data.base:end - data.base]
    return [int.from_bytes(raw[i:i + 4], "little") for i in range(0, len(raw), 4)]


def _token_flags(token, features: PacbtiControl):
    if "error" in token:
        return True
    expected = {"pac_priv": features.pac_priv, "pac_unpriv": features.pac_unpriv,
                "bti_priv": features.bti_priv, "bti_unpriv": features.bti_unpriv}
    return (token["runtime_failure"] or token["runpba_malfunction"]
            or any(on and not token[k] for k, on in expected.items()))


# ---------------------------------------------------------------- overhead

@dataclass
class OverheadReport:
    plain_count: int
    instrumented_count: int
    ratio: float
    plain_out: list
    instrumented_out: list

    def to_dict(self):
        return {"plain_count": self.plain_count, "instrumented_count": self.instrumented_count,
                "ratio": round(self.ratio, 6)}


def run_benign(program, cfg: InstrumentConfig, inputs=(), step_limit=DEFAULT_STEP_LIMIT,
               nspe_privileged=False, seed=0, record_trace=False) -> Device:
    dev = Device(build_image(program, cfg), seed=seed, features=features_for(cfg),
                 nspe_privileged=nspe_privileged, record_trace=record_trace).provision()
    dev.machine.inputs.extend(list(m) for m in inputs)
    result = dev.run(step_limit)
    if result is RunResult.STEP_LIMIT:
        raise NonTermination(f"no termination within {step_limit} steps")
    return dev


def overhead_report(program, inputs=(), step_limit=DEFAULT_STEP_LIMIT, nspe_privileged=False) -> OverheadReport:
    """Executed non-secure instruction counts, plain vs pac+bti, on the same input."""
    plain = run_benign(program, InstrumentConfig(), inputs, step_limit, nspe_privileged)
    inst = run_benign(program, InstrumentConfig(True, True), inputs, step_limit, nspe_privileged)
    return OverheadReport(plain.ns_steps, inst.ns_steps, inst.ns_steps / plain.ns_steps,
                          list(plain.out), list(inst.out))


def executed_delta_oracle(program, inputs=(), step_limit=DEFAULT_STEP_LIMIT, nspe_privileged=False):
    """Expected pac+bti executed-count growth, from a plain trace: each dynamic
    call adds an entry instruction and an AUT, calls into non-leaf functions add
    a spill/reload pair, and every pass over an indirect-target label adds a BTI."""
    dev = run_benign(program, InstrumentConfig(), inputs, step_limit, nspe_privileged, record_trace=True)
    syms = dev.image.symbols
    funcs = {syms[f.name]: f for f in program.functions}
    j_addrs = {syms[n] for n in program.non_entry_indirect_targets}
    ns = [t for t in dev.trace if t.world is World.NON_SECURE]
    calls = nonleaf = 0
    for cur, nxt in zip(ns, ns[1:]):
        if cur.op in (Op.BL.name, Op.BLX.name):
            f = funcs.get(nxt.pc)
            if f is None:
                raise ScenarioError(f"call to non-entry address {nxt.pc:#010x}")
            calls += 1
            nonleaf += not f.is_leaf
    j_hits = sum(1 for t in ns if t.pc in j_addrs)
    return {"calls": calls, "nonleaf_calls": nonleaf, "j_hits": j_hits,
            "delta": 2 * calls + 2 * nonleaf + j_hits}


def image_size_formula(program):
    """2F + J + 2 * (non-leaf functions): the pac+bti size growth in address units."""
    f = len(program.functions)
    j = len(program.non_entry_indirect_targets)
    nl = sum(1 for fn in program.functions if not fn.is_leaf)
    return 2 * f + j + 2 * nl


# ---------------------------------------------------------------- scenarios

_REQUIRED = {
    AttackKind.ROP_RETURN: ("echo1", "echo1_trigger", "log_block_emit", "secret", "secret_end"),
    AttackKind.BTI_FORWARD: ("echo2", "echo2_trigger", "echo2_drop_handler", "log_block_emit",
                             "secret", "secret_end"),
    AttackKind.BRUTE_FORCE: ("service", "bf_site", "main_win"),
    AttackKind.PAC_REUSE: ("worker", "reuse_site"),
    AttackKind.FOP_DISABLE: ("pacbti_config", "hook_slot"),
}

DEFAULT_FOP_WINDOW = (300, 700)


@dataclass
class ScenarioRun:
    script: ScenarioScript
    device: Device
    report: ScenarioReport
    verifier_key: bytes


def _attest(device, verifier_key, rng):
    nonce = rng.randbytes(att.NONCE_SIZE)
    transport = att.LoopbackTransport(att.AttestationEndpoint(device))
    entry = {"step": device.steps}
    try:
        entry.update(att.challenge_response(transport, verifier_key, nonce).as_dict())
    except att.AttestationError as e:
        entry["error"] = type(e).__name__
    return entry


def execute_scenario(script: ScenarioScript, record_trace=False, its_path=None) -> ScenarioRun:
    program = load_program(resolve_program(script))
    image = build_image(program, script.instrument)
    for sym in _REQUIRED.get(script.attack, ()):
        if sym not in image.symbols:
            raise ScenarioError(f"{script.attack.value} needs symbol {sym!r}, which {script.program} lacks")
    if script.attack is AttackKind.PAC_REUSE and not script.instrument.pac:
        raise ScenarioError("PacReuse replays a spilled tag; it needs a pac build")
    features = features_for(script.instrument)
    device = Device(image, seed=script.seed, tag_width=script.tag_width, policy=script.policy,
                    features=features, nspe_privileged=script.nspe_privileged,
                    its_path=its_path, record_trace=record_trace).provision()
    verifier_key = device.attestation_key
    device.machine.inputs.extend(list(m) for m in script.inputs)
    rng = random.Random(f"scenario:{script.seed}")
    extra = {}
    plans = []

    def injector(attack_fn):
        def fire(dev):
            del dev.breakpoints[dev.image.symbols[trigger]]
            plan = attack_fn(dev)
            plan.apply(Attacker(dev))
            plans.append(plan)
        trigger = "echo1_trigger" if attack_fn is attack_rop_return else "echo2_trigger"
        device.breakpoints[image.symbols[trigger]] = fire

    reuse = fop = stats = None
    if script.attack is AttackKind.ROP_RETURN:
        injector(attack_rop_return)
    elif script.attack is AttackKind.BTI_FORWARD:
        injector(attack_bti_forward)
    elif script.attack is AttackKind.PAC_REUSE:
        reuse = PacReuse(device)
        reuse.install()
    elif script.attack is AttackKind.FOP_DISABLE:
        fop = attack_fop_disable(device, script.window or DEFAULT_FOP_WINDOW)

    timeline = [(s, "attest", None) for s in script.attestations]
    if fop is not None:
        timeline += [(s, "act", fn) for s, fn in fop.actions]
    timeline.sort(key=lambda e: (e[0], e[1] != "act"))
    tokens = []
    limit = script.step_limit

    if script.attack is AttackKind.BRUTE_FORCE:
        stats = attack_brute_force(device, script.attempts, script.tag_width,
                                   random.Random(f"brute:{script.seed}"), limit)
        extra["brute_force"] = vars(stats)
        result = RunResult.STOPPED
        for _ in timeline:
            tokens.append(_attest(device, verifier_key, rng))
    else:
        for step_at, kind, fn in timeline:
            if kind == "attest":
                device.run_until(lambda d: d.parked or (d.steps >= step_at and d.idle()),
                                 max(0, limit - device.steps))
                tokens.append(_attest(device, verifier_key, rng))
            else:
                device.run_until(lambda d: d.parked or d.steps >= step_at, max(0, limit - device.steps))
                fn(device)
        result = device.run(max(0, limit - device.steps))

    if fop is not None and any(e.kind == "usage_fault" and e.detail["cause"] == UsageCause.NOT_PRIVILEGED.value
                               for e in device.events):
        raise NotPrivileged("MSR PACBTI_CTRL faulted: non-secure world is unprivileged")

    lockdowns = [e for e in device.events if e.kind == "lockdown"]
    fault_raised = bool(lockdowns)
    fault_kind = lockdowns[0].detail["kind"] if lockdowns else None
    fault_pc = f"{lockdowns[0].detail['pc']:#010x}" if lockdowns else None
    secret = secret_words(image)
    out = list(device.out)
    leaked = _contains_run(out, secret)
    if script.attack in (AttackKind.ROP_RETURN, AttackKind.BTI_FORWARD):
        succeeded = leaked
    elif stats is not None:
        succeeded = stats.successes > 0
    elif reuse is not None:
        succeeded = reuse.replayed and not fault_raised
        extra["reuse"] = {"harvested": reuse.harvested is not None, "replayed": reuse.replayed}
    elif fop is not None:
        succeeded = bool(fop.observed.get("disabled_before_enable"))
        extra["fop_window"] = list(script.window or DEFAULT_FOP_WINDOW)
    else:
        succeeded = False
    if plans:
        extra["injection"] = [{"trigger": p.trigger, "writes": len(p.writes)} for p in plans]
    try:
        n_records = len(device.runpba.its.records())
    except StorageFailure:
        n_records = -1
    try:
        oh = overhead_report(program, script.inputs, limit, script.nspe_privileged).to_dict()
    except NonTermination:
        oh = None
    flagged = any(_token_flags(t, features) for t in tokens)
    report = ScenarioReport(
        name=script.name,
        attack=script.attack.value,
        instrument=format_instrument(script.instrument),
        policy=script.policy.value,
        seed=script.seed,
        secret_leaked=leaked,
        fault_raised=fault_raised,
        fault_kind=fault_kind,
        fault_pc=fault_pc,
        lifecycle_final=device.runpba.lifecycle.state.name,
        tokens=tokens,
        instr_counts=oh and {"plain": oh["plain_count"], "instrumented": oh["instrumented_count"]},
        detection_gap=succeeded and not flagged,
        attack_succeeded=succeeded,
        completed=device.machine.halted and device.machine.halt_reason == "halt",
        run_result=result.value,
        steps=device.steps,
        boot_epoch=device.machine.boot_epoch,
        fault_records=n_records,
        out_length=len(out),
        out_head=[f"{w:#x}" for w in out[:16]],
        extra=extra,
    )
    return ScenarioRun(script, device, report, verifier_key)


def run_scenario(script: ScenarioScript, record_trace=False) -> ScenarioReport:
    return execute_scenario(script, record_trace).report


# ---------------------------------------------------------------- suite

@dataclass
class SuiteResult:
    name: str
    passed: bool
    failures: list
    report: ScenarioReport = None


def check_invariants(run: ScenarioRun):
    """Invariant breaches for one finished run (empty list when clean)."""
    problems = []
    rep, dev, script = run.report, run.device, run.script
    if dev.record_trace:
        bad = no_resume_violations(dev)
        if bad:
            problems.append(f"{len(bad)} non-secure instruction(s) ran outside the park loop after a fault")
        if any(t.world is World.NON_SECURE and dev.image.instruction_at(t.pc) is None for t in dev.trace):
            problems.append("non-secure fetch outside executable code")
    full = script.instrument.pac and script.instrument.bti
    if full and script.attack in (AttackKind.ROP_RETURN, AttackKind.BTI_FORWARD):
        if not rep.fault_raised or rep.secret_leaked:
            problems.append("control-flow violation was not stopped before the secret left")
    if script.attack is AttackKind.NONE and rep.fault_raised:
        problems.append("benign run raised a PACBTI fault")
    lock = next((e for e in dev.events if e.kind == "lockdown"), None)
    if lock is not None:
        for t in rep.tokens:
            if t["step"] >= lock.step and not t.get("runtime_failure"):
                problems.append(f"token at step {t['step']} after the fault lacks runtime_failure")
    return problems


def _same(got, want):
    """Equality that also accepts hex strings in reports against integer expectations."""
    if isinstance(got, str) and isinstance(want, int) and not isinstance(want, bool):
        try:
            return int(got, 0) == want
        except ValueError:
            return False
    return got == want


def check_expectations(script, report=None, error=None):
    problems = []
    for key, want in script.expect.items():
        if key == "error":
            got = type(error).__name__ if error else None
        elif error is not None:
            problems.append(f"scenario raised {type(error).__name__}: {error}")
            break
        else:
            try:
                got = report.lookup(key)
            except (KeyError, IndexError, TypeError):
                problems.append(f"{key}: no such report field")
                continue
        if not _same(got, want):
            problems.append(f"{key}: expected {want!r}, got {got!r}")
    if error is not None and "error" not in script.expect:
        problems.append(f"unexpected {type(error).__name__}: {error}")
    return problems


def run_suite_entry(path, record_trace=True) -> SuiteResult:
    script = load_scenario(path)
    try:
        run = execute_scenario(script, record_trace=record_trace)
    except ScenarioError as e:
        problems = check_expectations(script, error=e)
        return SuiteResult(script.name, not problems, problems)
    problems = check_expectations(script, run.report) + check_invariants(run)
    return SuiteResult(script.name, not problems, problems, run.report)


def suite(directory, record_trace=True):
    paths = sorted(os.path.join(directory, n) for n in os.listdir(directory) if n.endswith(".toy"))
    return [run_suite_entry(p, record_trace) for p in paths]


__all__ = [
    "AccessDenied", "AttackKind", "Attacker", "BruteForceStats", "FopAttack", "GadgetNotFound",
    "InjectionPlan", "NonTermination", "NotPrivileged", "OverheadReport", "PacReuse",
    "ScenarioError", "ScenarioReport", "ScenarioRun", "ScenarioScript", "SuiteResult",
    "attack_bti_forward", "attack_brute_force", "attack_fop_disable", "attack_rop_return",
    "check_invariants", "executed_delta_oracle", "execute_scenario", "image_size_formula",
    "load_scenario", "overhead_report", "parse_scenario", "run_scenario", "secret_words", "suite",
]
