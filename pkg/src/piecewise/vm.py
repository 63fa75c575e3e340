"""Deterministic reference interpreter over a loaded process image.

Execution only moves control and addresses around: values are function
references, vtable references, global-cell references or null.  The trace
it produces is the ground truth for debloating soundness (a removed
function must never be entered) and for points-to soundness (observed
indirect targets must be inside the solved sets).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import MissingIR, UnresolvedSymbol
from .ir import TRAP_BYTE, Module
from .loader import PAGE_NX, ProcessImage

COMPLETED = "completed"
TRAPPED = "trapped"
LIMIT_EXCEEDED = "limit_exceeded"
FAULT = "fault"


@dataclass(frozen=True)
class Trace:
    entered: tuple[tuple[str, str], ...]
    indirect_targets: tuple[tuple[tuple[str, str, int], tuple[str, str]], ...]
    outcome: tuple

    @property
    def completed(self) -> bool:
        return self.outcome[0] == COMPLETED


class _Machine:
    def __init__(self, image: ProcessImage, debloated: bool, step_limit: int):
        if image.bindings is None:
            raise UnresolvedSymbol("<bindings>", "run resolve() before execution")
        self.image = image
        self.debloated = debloated
        self.step_limit = step_limit
        self.modules: dict[str, Module] = {}
        for mod in image.load_order:
            if mod.ir_text is None:
                raise MissingIR(f"module {mod.name!r} has no IR section; cannot execute")
            self.modules[mod.name] = mod.module()
        self.globals: dict[str, dict[str, object]] = {}
        for name, parsed in self.modules.items():
            cells: dict[str, object] = {}
            for g in parsed.globals:
                cells[g.name] = (self.resolve(name, g.initializer)
                                 if g.initializer is not None else None)
            self.globals[name] = cells
        self.entered: list[tuple[str, str]] = []
        self.indirect: list = []

    def resolve(self, module: str, symbol: str):
        """FunctionRef for a symbol as seen from `module`."""
        parsed = self.modules[module]
        if symbol in parsed.function_names():
            return ("func", module, symbol)
        target = self.image.bindings.get((module, symbol))
        if target is None:
            raise UnresolvedSymbol(symbol, module)
        return ("func", target[0], target[1])

    def enter_check(self, module: str, func: str):
        """None if the function is enterable, else a trap outcome."""
        if not self.debloated:
            return None
        loaded = self.image.module(module)
        idx = loaded.symbol_index(func)
        sym = loaded.symbols[idx]
        if sym.size == 0:
            return None
        page = sym.value // self.image.page_size
        if self.image.page_state[module][page] == PAGE_NX:
            return (TRAPPED, module, func, "nx")
        if self.image.memory[module][sym.value] == TRAP_BYTE:
            return (TRAPPED, module, func, "trap")
        return None

    def run(self, entry_module: str, entry_func: str) -> Trace:
        outcome = self._run(entry_module, entry_func)
        return Trace(tuple(self.entered), tuple(self.indirect), outcome)

    def _run(self, entry_module: str, entry_func: str) -> tuple:
        frames: list[list] = []  # [module, function, pc, locals]

        def push(module: str, func: str):
            self.entered.append((module, func))
            bad = self.enter_check(module, func)
            if bad is None:
                frames.append([module, func, 0, {}])
            return bad

        bad = push(entry_module, entry_func)
        if bad is not None:
            return bad

        steps = 0
        while frames:
            module, func, pc, env = frames[-1]
            body = self.modules[module].function(func).body
            if pc >= len(body):
                frames.pop()
                continue
            if steps >= self.step_limit:
                return (LIMIT_EXCEEDED,)
            steps += 1
            st = body[pc]
            frames[-1][2] = pc + 1
            site = (module, func, pc)
            parsed = self.modules[module]
            cells = self.globals[module]

            def get(name):
                if name in cells:
                    return cells[name]
                return env.get(name)

            def put(name, value):
                if name in cells:
                    cells[name] = value
                else:
                    env[name] = value

            kind = st.kind
            if kind in ("ret",):
                frames.pop()
            elif kind in ("syscall", "spadj"):
                pass
            elif kind == "addr_of":
                if st.b in cells:
                    put(st.a, ("cell", module, st.b))
                else:
                    put(st.a, self.resolve(module, st.b))
            elif kind == "copy":
                put(st.a, get(st.b))
            elif kind == "load":
                ptr = get(st.b)
                if isinstance(ptr, tuple) and ptr[0] == "cell":
                    put(st.a, self.globals[ptr[1]][ptr[2]])
                else:
                    put(st.a, None)
            elif kind == "store":
                ptr = get(st.a)
                if isinstance(ptr, tuple) and ptr[0] == "cell":
                    self.globals[ptr[1]][ptr[2]] = get(st.b)
            elif kind == "new_object":
                if parsed.vtable(st.b) is None:
                    return (FAULT, "UnknownType", module, func, pc)
                put(st.a, ("vtable", module, st.b))
            elif kind == "call":
                target = self.resolve(module, st.a)
                bad = push(target[1], target[2])
                if bad is not None:
                    return bad
            elif kind in ("icall", "ijmp"):
                value = get(st.a)
                if not (isinstance(value, tuple) and value[0] == "func"):
                    return (FAULT, "NullIndirectCall", module, func, pc)
                self.indirect.append((site, (value[1], value[2])))
                if kind == "ijmp":
                    frames.pop()
                bad = push(value[1], value[2])
                if bad is not None:
                    return bad
            elif kind == "vcall":
                value = get(st.a)
                if not (isinstance(value, tuple) and value[0] == "vtable"):
                    return (FAULT, "NullIndirectCall", module, func, pc)
                vt = self.modules[value[1]].vtable(value[2])
                if st.b >= len(vt.entries):
                    return (FAULT, "BadVTableSlot", module, func, pc)
                target = self.resolve(value[1], vt.entries[st.b])
                self.indirect.append((site, (target[1], target[2])))
                bad = push(target[1], target[2])
                if bad is not None:
                    return bad
            else:
                raise ValueError(f"unknown statement kind {kind!r}")
        return (COMPLETED,)


def execute(image: ProcessImage, entry: str | None = None, step_limit: int = 100_000) -> Trace:
    """Run from the executable's entry on the pristine image."""
    return _execute(image, entry, step_limit, debloated=False)


def execute_debloated(image: ProcessImage, entry: str | None = None,
                      step_limit: int = 100_000) -> Trace:
    """Identical semantics, but entering removed code traps (nx page or 0x6D)."""
    return _execute(image, entry, step_limit, debloated=True)


def _execute(image: ProcessImage, entry, step_limit, debloated) -> Trace:
    exe = image.executable
    if entry is None:
        from .loader import _entry_function

        entry = _entry_function(exe)
        if entry is None:
            raise MissingIR(f"executable {exe.name!r} has no entry function")
    machine = _Machine(image, debloated, step_limit)
    if entry not in machine.modules[exe.name].function_names():
        raise UnresolvedSymbol(entry, exe.name)
    return machine.run(exe.name, entry)


def run_workloads(image: ProcessImage, debloated: bool = False,
                  step_limit: int = 100_000) -> dict[str, Trace]:
    """Entry plus every trained dlsym symbol, one trace each."""
    exe = image.executable
    traces: dict[str, Trace] = {}
    from .loader import _entry_function

    entry = _entry_function(exe)
    machine_cls = execute_debloated if debloated else execute
    if entry is not None:
        traces["entry:" + entry] = machine_cls(image, entry, step_limit)
    for rec in exe.training:
        if rec.kind != "dlsym":
            continue
        from .loader import _exports

        if _exports(image.module(rec.module), rec.symbol):
            target = (rec.module, rec.symbol)
        else:
            target = image.bindings[(exe.name, rec.symbol)]
        machine = _Machine(image, debloated, step_limit)
        traces[f"dlsym:{rec.module}/{rec.symbol}"] = machine.run(*target)
    return traces
