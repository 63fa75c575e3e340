"""Gadget scanning and classification over toy code images.

A gadget is an instruction-aligned suffix of at most ``depth`` instructions
ending at RET/ICALL/IJMP whose opcodes contain no trap byte.  Gadgets are
deduplicated by exact byte sequence; a sequence belongs to a class if any
of its occurrences qualifies:

    syscall  contains a SYSCALL instruction
    SPU      contains a SPADJ instruction
    COP      terminator is ICALL
    JOP      terminator is IJMP
    CS       first instruction immediately follows a CALL
    EP       first instruction is a function entry
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._scan import find_gadget_spans
from .errors import MisalignedImage
from .ir import (INSTRUCTION_WIDTH, OP_CALL, OP_ICALL, OP_IJMP, OP_SPADJ, OP_SYSCALL)
from .loader import PAGE_NX, ProcessImage

CLASSES = ("syscall", "SPU", "COP", "CS", "JOP", "EP")

DEFAULT_DEPTH = 5


@dataclass
class GadgetReport:
    depth: int = DEFAULT_DEPTH
    gadgets: dict[bytes, set[str]] = field(default_factory=dict)  # byte seq -> classes

    @property
    def unique_total(self) -> int:
        return len(self.gadgets)

    def count(self, cls: str) -> int:
        return sum(1 for classes in self.gadgets.values() if cls in classes)

    def merge(self, other: "GadgetReport") -> None:
        for seq, classes in other.gadgets.items():
            self.gadgets.setdefault(seq, set()).update(classes)

    def as_dict(self) -> dict:
        return {
            "depth": self.depth,
            "unique_total": self.unique_total,
            "classes": {cls: self.count(cls) for cls in CLASSES},
            "gadgets": {seq.hex(): sorted(classes) for seq, classes in self.gadgets.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GadgetReport":
        report = cls(depth=data.get("depth", DEFAULT_DEPTH))
        report.gadgets = {bytes.fromhex(seq): set(classes)
                          for seq, classes in data["gadgets"].items()}
        return report


def scan(data: bytes, entry_offsets=(), depth: int = DEFAULT_DEPTH,
         nx_pages=frozenset(), page_size: int | None = None) -> GadgetReport:
    """Scan one code image.  ``entry_offsets`` are function start byte
    offsets from the layout; pages listed in ``nx_pages`` are dead and
    cannot contribute gadget bytes."""
    if len(data) % INSTRUCTION_WIDTH:
        raise MisalignedImage(f"image length {len(data)} not a multiple of {INSTRUCTION_WIDTH}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    opcodes = np.frombuffer(data, dtype=np.uint8)[::INSTRUCTION_WIDTH].copy()
    starts, ends = find_gadget_spans(opcodes, depth)

    entries = {off // INSTRUCTION_WIDTH for off in entry_offsets}
    report = GadgetReport(depth=depth)
    for start, end in zip(starts.tolist(), ends.tolist()):
        lo, hi = start * INSTRUCTION_WIDTH, (end + 1) * INSTRUCTION_WIDTH
        if nx_pages and page_size:
            if any(p in nx_pages for p in range(lo // page_size, (hi - 1) // page_size + 1)):
                continue
        seq = bytes(data[lo:hi])
        window = opcodes[start:end + 1]
        classes = report.gadgets.setdefault(seq, set())
        if (window == OP_SYSCALL).any():
            classes.add("syscall")
        if (window == OP_SPADJ).any():
            classes.add("SPU")
        term = opcodes[end]
        if term == OP_ICALL:
            classes.add("COP")
        elif term == OP_IJMP:
            classes.add("JOP")
        if start > 0 and opcodes[start - 1] == OP_CALL:
            classes.add("CS")
        if start in entries:
            classes.add("EP")
    return report


def scan_loaded(loaded, depth: int = DEFAULT_DEPTH) -> GadgetReport:
    """Scan a module straight out of its container."""
    entries = [s.value for s in loaded.defined_symbols()]
    return scan(loaded.code, entries, depth)


def scan_process(image: ProcessImage, depth: int = DEFAULT_DEPTH) -> GadgetReport:
    """Scan every module of a (possibly debloated) process image,
    honouring non-executable pages, merged into one deduplicated report."""
    total = GadgetReport(depth=depth)
    for mod in image.load_order:
        nx = {i for i, state in enumerate(image.page_state[mod.name]) if state == PAGE_NX}
        entries = [s.value for s in mod.defined_symbols()]
        total.merge(scan(bytes(image.memory[mod.name]), entries, depth,
                         nx_pages=nx, page_size=image.page_size))
    return total


def diff(before: GadgetReport, after: GadgetReport) -> dict:
    """Per-class percentage reduction; classes absent before are n/a.
    Gadgets present only after debloating are flagged as anomalies."""
    out: dict = {"classes": {}, "anomalies": []}

    def reduction(b: int, a: int):
        if b == 0:
            return None
        return (1.0 - a / b) * 100.0

    out["unique_total"] = reduction(before.unique_total, after.unique_total)
    for cls in CLASSES:
        out["classes"][cls] = reduction(before.count(cls), after.count(cls))
    for seq in after.gadgets:
        if seq not in before.gadgets:
            out["anomalies"].append(seq.hex())
    return out
