"""Piece-wise loader simulator: pre-load, pre-bind, retain, remove.

The loader never executes anything; it maps modules at page-aligned bases,
resolves every undefined symbol up front (pre-binding), walks the embedded
dependency records to compute the retained set, and overwrites dead code
with the 0x6D trap byte (whole dead pages are flipped to non-executable
instead of being written).
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

from . import pwof
from .errors import ModuleNotFound, UnresolvedSymbol
from .ir import TRAP_BYTE, INSTRUCTION_WIDTH
from .pwof import DEF_UNDEFINED, DEF_DEFINED_ASM, BIND_STRONG, BIND_WEAK, LoadedModule

PAGE_UNTOUCHED = "untouched"
PAGE_COW = "cow_written"
PAGE_NX = "nx"

DEFAULT_PAGE_SIZE = 4096


class FileResolver:
    """Finds ``<name>.pwof`` on a list of directories."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]

    def load(self, name: str) -> LoadedModule:
        for directory in self.paths:
            candidate = os.path.join(directory, name + ".pwof")
            if os.path.exists(candidate):
                with open(candidate, "rb") as fh:
                    return pwof.read_module(fh.read())
        raise KeyError(name)


class MemoryResolver:
    """Resolves module names from an in-memory mapping (tests, generators)."""

    def __init__(self, modules):
        # store bytes so repeated loads hand out fresh, unrelocated copies
        self.modules = {name: pwof.serialize(m) if isinstance(m, LoadedModule) else bytes(m)
                        for name, m in dict(modules).items()}

    def load(self, name: str) -> LoadedModule:
        return pwof.read_module(self.modules[name])


@dataclass
class ProcessImage:
    load_order: list[LoadedModule]
    bases: dict[str, int]
    page_size: int
    memory: dict[str, bytearray]
    page_state: dict[str, list[str]]
    bindings: dict[tuple[str, str], tuple[str, str]] | None = None
    diagnostics: list[str] = field(default_factory=list)

    def module(self, name: str) -> LoadedModule:
        for mod in self.load_order:
            if mod.name == name:
                return mod
        raise KeyError(name)

    @property
    def executable(self) -> LoadedModule:
        return self.load_order[0]


def _num_pages(code_len: int, page_size: int) -> int:
    return max(1, -(-code_len // page_size))


def preload(executable: str, resolver, page_size: int = DEFAULT_PAGE_SIZE) -> ProcessImage:
    """Breadth-first traversal of needed lists, executable first; dlopen
    training records of the executable join the queue after static needs."""
    try:
        exe = resolver.load(executable)
    except KeyError:
        raise ModuleNotFound(executable, "<command line>")

    order: list[LoadedModule] = [exe]
    seen = {exe.name}
    queue: list[tuple[str, str]] = [(dep, exe.name) for dep in exe.needed]
    queue.extend((rec.module, exe.name) for rec in exe.training if rec.kind == "dlopen")

    while queue:
        name, requester = queue.pop(0)
        if name in seen:
            continue
        try:
            mod = resolver.load(name)
        except KeyError:
            raise ModuleNotFound(name, requester)
        seen.add(name)
        order.append(mod)
        queue.extend((dep, name) for dep in mod.needed)

    bases: dict[str, int] = {}
    memory: dict[str, bytearray] = {}
    page_state: dict[str, list[str]] = {}
    base = page_size  # keep address zero unmapped
    for mod in order:
        bases[mod.name] = base
        memory[mod.name] = bytearray(mod.code)
        page_state[mod.name] = [PAGE_UNTOUCHED] * _num_pages(len(mod.code), page_size)
        base += _num_pages(len(mod.code), page_size) * page_size
        if mod.dep is not None and not mod.dep.relocated:
            pwof.relocate_dep(mod.dep, bases[mod.name])
    return ProcessImage(order, bases, page_size, memory, page_state)


def resolve(image: ProcessImage) -> dict[tuple[str, str], tuple[str, str]]:
    """Pre-binding: first strong exported definition in load order wins,
    weak definitions only when no strong one exists anywhere."""
    bindings: dict[tuple[str, str], tuple[str, str]] = {}
    for mod in image.load_order:
        for sym in mod.symbols:
            if sym.defined != DEF_UNDEFINED:
                continue
            strong = None
            weak = None
            for provider in image.load_order:
                idx = provider.symbol_index(sym.name)
                if idx is None:
                    continue
                entry = provider.symbols[idx]
                if entry.defined == DEF_UNDEFINED:
                    continue
                if entry.binding == BIND_STRONG and strong is None:
                    strong = provider.name
                elif entry.binding == BIND_WEAK and weak is None:
                    weak = provider.name
            chosen = strong or weak
            if chosen is None:
                raise UnresolvedSymbol(sym.name, mod.name)
            bindings[(mod.name, sym.name)] = (chosen, sym.name)
    image.bindings = bindings
    return bindings


@dataclass
class RetainedSet:
    retained: dict[str, set[str]]  # module -> function names
    provenance: dict[tuple[str, str], str]
    diagnostics: list[str] = field(default_factory=list)

    def functions(self, module: str) -> set[str]:
        return self.retained.get(module, set())


def compute_retained(image: ProcessImage, bindings=None) -> RetainedSet:
    if bindings is None:
        bindings = image.bindings if image.bindings is not None else resolve(image)
    retained: dict[str, set[str]] = {mod.name: set() for mod in image.load_order}
    provenance: dict[tuple[str, str], str] = {}
    diagnostics: list[str] = []
    mods = {mod.name: mod for mod in image.load_order}

    work: list[tuple[str, str, str]] = []

    def seed(module: str, func: str, reason: str) -> None:
        work.append((module, func, reason))

    def close() -> None:
        while work:
            mname, func, reason = work.pop()
            if func in retained[mname]:
                continue
            retained[mname].add(func)
            provenance[(mname, func)] = reason
            mod = mods[mname]
            if mod.dep is None:
                continue  # dep-less modules are seeded wholesale below
            idx = mod.symbol_index(func)
            rec = mod.dep.record_for(idx) if idx is not None else None
            if rec is None:
                diagnostics.append(f"ConservativeRetention: {mname}/{func} has no dep record")
                continue
            for dep in rec.deps:
                symbol = mod.symbols[dep.index].name
                if dep.kind == "local":
                    seed(mname, symbol, "dep-closure")
                else:
                    target = bindings.get((mname, symbol))
                    if target is None:
                        raise UnresolvedSymbol(symbol, mname)
                    seed(target[0], target[1], "dep-closure")

    exe = image.executable
    if exe.dep is None:
        pass  # falls under the dep-less seeding below
    else:
        entry = _entry_function(exe)
        if entry is not None:
            seed(exe.name, entry, "root")

    for rec in exe.training:
        if rec.kind != "dlsym":
            continue
        target_mod = mods.get(rec.module)
        if target_mod is not None and _exports(target_mod, rec.symbol):
            seed(rec.module, rec.symbol, "training")
        else:
            bound = bindings.get((exe.name, rec.symbol))
            if bound is None:
                raise UnresolvedSymbol(rec.symbol, f"{exe.name} (dlsym training)")
            seed(bound[0], bound[1], "training")

    for mod in image.load_order:
        if mod.dep is None:
            for sym in mod.defined_symbols():
                seed(mod.name, sym.name, "root" if mod is exe else "no-dep-module")
            for sym in mod.undefined_symbols():
                target = bindings.get((mod.name, sym.name))
                if target is None:
                    raise UnresolvedSymbol(sym.name, mod.name)
                seed(target[0], target[1], "dep-closure")
        else:
            for idx in mod.dep.required:
                sym = mod.symbols[idx]
                if sym.defined == DEF_UNDEFINED:
                    target = bindings.get((mod.name, sym.name))
                    if target is None:
                        raise UnresolvedSymbol(sym.name, mod.name)
                    seed(target[0], target[1], "required-global")
                else:
                    seed(mod.name, sym.name, "required-global")
            for sym in mod.defined_symbols():
                if sym.defined == DEF_DEFINED_ASM:
                    seed(mod.name, sym.name, "asm")

    close()
    return RetainedSet(retained, provenance, diagnostics)


def _entry_function(exe: LoadedModule) -> str | None:
    if exe.ir_text is not None:
        entry = exe.module().entry_function()
        if entry is not None:
            return entry.name
    if exe.symbol_index("main") is not None:
        return "main"
    return None


def _exports(mod: LoadedModule, symbol: str) -> bool:
    idx = mod.symbol_index(symbol)
    if idx is None:
        return False
    sym = mod.symbols[idx]
    return sym.defined != DEF_UNDEFINED and sym.binding in (BIND_STRONG, BIND_WEAK)


@dataclass
class ModuleReport:
    total_functions: int = 0
    total_bytes: int = 0
    removed_functions: int = 0
    removed_bytes: int = 0
    nx_pages: int = 0
    cow_pages: int = 0
    untouched_pages: int = 0

    def as_dict(self) -> dict:
        insns = self.total_bytes // INSTRUCTION_WIDTH
        removed_insns = self.removed_bytes // INSTRUCTION_WIDTH
        return {
            "total_functions": self.total_functions,
            "removed_functions": self.removed_functions,
            "removed_bytes": self.removed_bytes,
            "nx_pages": self.nx_pages,
            "cow_pages": self.cow_pages,
            "untouched_pages": self.untouched_pages,
            "function_reduction_pct": _pct(self.removed_functions, self.total_functions),
            "instruction_reduction_pct": _pct(removed_insns, insns),
        }


def _pct(part: int, whole: int) -> float:
    return 100.0 * part / whole if whole else 0.0


@dataclass
class DebloatReport:
    modules: dict[str, ModuleReport]

    @property
    def removed_functions(self) -> int:
        return sum(m.removed_functions for m in self.modules.values())

    @property
    def removed_bytes(self) -> int:
        return sum(m.removed_bytes for m in self.modules.values())

    def as_dict(self) -> dict:
        total_fn = sum(m.total_functions for m in self.modules.values())
        total_insns = sum(m.total_bytes for m in self.modules.values()) // INSTRUCTION_WIDTH
        removed_insns = self.removed_bytes // INSTRUCTION_WIDTH
        return {
            "modules": {name: rep.as_dict() for name, rep in self.modules.items()},
            "totals": {
                "removed_functions": self.removed_functions,
                "removed_bytes": self.removed_bytes,
                "function_reduction_pct": _pct(self.removed_functions, total_fn),
                "instruction_reduction_pct": _pct(removed_insns, total_insns),
            },
        }


def debloat(image: ProcessImage, retained: RetainedSet) -> DebloatReport:
    """Overwrite dead functions with the trap byte; fully dead pages are
    marked non-executable instead of written (no copy-on-write cost)."""
    reports: dict[str, ModuleReport] = {}
    for mod in image.load_order:
        rep = ModuleReport()
        defined = [s for s in mod.symbols if s.defined != DEF_UNDEFINED]
        rep.total_functions = len(defined)
        rep.total_bytes = sum(s.size for s in defined)
        keep = retained.functions(mod.name)
        dead = [s for s in defined if s.name not in keep]
        rep.removed_functions = len(dead)
        rep.removed_bytes = sum(s.size for s in dead)

        mem = image.memory[mod.name]
        states = image.page_state[mod.name]
        page = image.page_size
        live = bytearray(len(mod.code))
        for sym in defined:
            if sym.name in keep:
                live[sym.value:sym.value + sym.size] = b"\x01" * sym.size
        dead_mask = bytearray(len(mod.code))
        for sym in dead:
            dead_mask[sym.value:sym.value + sym.size] = b"\x01" * sym.size

        for pidx in range(len(states)):
            lo, hi = pidx * page, min((pidx + 1) * page, len(mod.code))
            if hi <= lo:
                continue
            if any(dead_mask[lo:hi]) and not any(live[lo:hi]):
                states[pidx] = PAGE_NX

        for sym in dead:
            for off in range(sym.value, sym.value + sym.size):
                pidx = off // page
                if states[pidx] == PAGE_NX:
                    continue
                mem[off] = TRAP_BYTE
                states[pidx] = PAGE_COW

        rep.nx_pages = states.count(PAGE_NX)
        rep.cow_pages = states.count(PAGE_COW)
        rep.untouched_pages = states.count(PAGE_UNTOUCHED)
        reports[mod.name] = rep
    return DebloatReport(reports)


def load_and_debloat(executable: str, resolver, page_size: int = DEFAULT_PAGE_SIZE,
                     no_debloat: bool = False):
    """Full preload/resolve/retain/remove workflow; returns (image, retained, report)."""
    image = preload(executable, resolver, page_size)
    bindings = resolve(image)
    if no_debloat:
        return image, None, None
    retained = compute_retained(image, bindings)
    report = debloat(image, retained)
    return image, retained, report


def measure_load_time(executable: str, resolver, repetitions: int = 5,
                      page_size: int = DEFAULT_PAGE_SIZE) -> dict:
    """Wall-clock of the full pipeline versus preload+resolve alone."""
    def stats(samples):
        ms = [s * 1000.0 for s in samples]
        return {"mean_ms": sum(ms) / len(ms), "max_ms": max(ms), "n": len(ms)}

    with_debloat = []
    without_debloat = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        image = preload(executable, resolver, page_size)
        resolve(image)
        without_debloat.append(time.perf_counter() - t0)

        t0 = time.perf_counter()
        image = preload(executable, resolver, page_size)
        bindings = resolve(image)
        retained = compute_retained(image, bindings)
        debloat(image, retained)
        with_debloat.append(time.perf_counter() - t0)

    enabled = stats(with_debloat)
    disabled = stats(without_debloat)
    return {
        "debloat_enabled": enabled,
        "debloat_disabled": disabled,
        "overhead_ms": enabled["mean_ms"] - disabled["mean_ms"],
    }
