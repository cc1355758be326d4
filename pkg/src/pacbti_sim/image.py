"""Program images: region descriptors plus payloads, and their binary layout.

Layout (all integers little-endian)::

    "PBIM"  u32 entry  u32 region_count
    region*:  u32 name_len  name  u32 base  u32 length
              u8 flags  u8 world  u8 min_privilege  u32 payload_len  payload
    u32 symbol_count
    symbol*:  u32 name_len  name  u32 address
"""

import enum
import struct
from dataclasses import dataclass, field

from .isa import INSN_SIZE, Instruction, UndecodableInstruction

MAGIC = b"PBIM"

R = 1
W = 2
X = 4


class World(enum.IntEnum):
    SECURE = 0
    NON_SECURE = 1


class ImageFormatError(ValueError):
    pass


@dataclass
class RegionImage:
    name: str
    base: int
    length: int
    flags: int
    world: World = World.NON_SECURE
    min_privileged: bool = False
    payload: bytes = b""

    @property
    def end(self):
        return self.base + self.length

    def contains(self, addr):
        return self.base <= addr < self.base + self.length


@dataclass
class ProgramImage:
    regions: list
    symbols: dict = field(default_factory=dict)
    entry: int = 0

    def region(self, name) -> RegionImage:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def code(self) -> RegionImage:
        return self.region("code")

    @property
    def code_units(self) -> int:
        """Size of the code payload in address units (one unit per instruction)."""
        return len(self.code.payload) // INSN_SIZE

    def instruction_at(self, addr):
        """Decode the instruction at ``addr`` or return None if it is not code."""
        for r in self.regions:
            if r.flags & X and r.contains(addr):
                off = addr - r.base
                if off % INSN_SIZE or off + INSN_SIZE > len(r.payload):
                    return None
                try:
                    return Instruction.decode(r.payload[off:off + INSN_SIZE], addr)
                except UndecodableInstruction:
                    return None
        return None

    def instructions(self):
        code = self.code
        for off in range(0, len(code.payload), INSN_SIZE):
            yield code.base + off, Instruction.decode(code.payload[off:off + INSN_SIZE], code.base + off)

    def symbol_at(self, addr):
        names = sorted(n for n, a in self.symbols.items() if a == addr)
        return names[0] if names else None

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<II", self.entry, len(self.regions))
        for r in self.regions:
            name = r.name.encode()
            out += struct.pack("<I", len(name)) + name
            out += struct.pack("<IIBBBI", r.base, r.length, r.flags, int(r.world),
                               int(r.min_privileged), len(r.payload))
            out += r.payload
        out += struct.pack("<I", len(self.symbols))
        for name, addr in sorted(self.symbols.items()):
            raw = name.encode()
            out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", addr)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProgramImage":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise ImageFormatError("truncated image")
            chunk = bytes(view[pos:pos + n])
            pos += n
            return chunk

        def u32():
            return struct.unpack("<I", take(4))[0]

        if take(4) != MAGIC:
            raise ImageFormatError("bad magic")
        entry, count = struct.unpack("<II", take(8))
        regions = []
        for _ in range(count):
            name = take(u32()).decode()
            base, length, flags, world, priv, plen = struct.unpack("<IIBBBI", take(15))
            regions.append(RegionImage(name, base, length, flags, World(world), bool(priv), take(plen)))
        symbols = {}
        for _ in range(u32()):
            name = take(u32()).decode()
            symbols[name] = u32()
        if pos != len(view):
            raise ImageFormatError("trailing bytes after symbol table")
        return cls(regions, symbols, entry)
