"""Corpus-wide footprint study: how much of each library do programs use.

Runs the loader pipeline (localized strategy `.dep` sections are expected
in the corpus) for every executable, then tabulates per-library retained
counts.  Functions pulled in solely as required globals or asm pinning are
reported in a separate column; the footprint columns count retention
attributable to the program's own roots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from . import loader
from .errors import PiecewiseError
from .ir import INSTRUCTION_WIDTH
from .pwof import DEF_UNDEFINED

IMPORT_REASONS = frozenset({"root", "dep-closure", "training", "no-dep-module"})


@dataclass
class StudyRow:
    program: str
    library: str
    linkage: str  # "direct" | "transitive"
    functions_used: int
    instructions_used: int
    pinned_functions: int  # required-global / asm retention
    total_functions: int
    total_instructions: int

    @property
    def fn_footprint_pct(self) -> float:
        return 100.0 * self.functions_used / self.total_functions if self.total_functions else 0.0

    @property
    def insn_footprint_pct(self) -> float:
        return (100.0 * self.instructions_used / self.total_instructions
                if self.total_instructions else 0.0)


@dataclass
class StudyTable:
    rows: list[StudyRow] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)  # program -> error
    zero_adjusted: bool = False  # geometric mean saw zero percentages

    def geometric_mean(self) -> dict:
        """Geometric mean of per-program footprints; zero percentages are
        replaced with the smallest positive observed value (flagged)."""
        per_program: dict[str, list[float, float, float, float]] = {}
        for row in self.rows:
            acc = per_program.setdefault(row.program, [0, 0, 0, 0])
            acc[0] += row.functions_used
            acc[1] += row.total_functions
            acc[2] += row.instructions_used
            acc[3] += row.total_instructions
        fn_pcts = []
        insn_pcts = []
        for used_fn, tot_fn, used_in, tot_in in per_program.values():
            fn_pcts.append(100.0 * used_fn / tot_fn if tot_fn else 0.0)
            insn_pcts.append(100.0 * used_in / tot_in if tot_in else 0.0)
        return {
            "programs": len(per_program),
            "fn_footprint_pct": self._geomean(fn_pcts),
            "insn_footprint_pct": self._geomean(insn_pcts),
            "zero_adjusted": self.zero_adjusted,
        }

    def _geomean(self, values: list[float]) -> float:
        if not values:
            return 0.0
        positive = [v for v in values if v > 0]
        if not positive:
            return 0.0
        floor = min(positive)
        adjusted = []
        for v in values:
            if v <= 0:
                self.zero_adjusted = True
                v = floor
            adjusted.append(v)
        return math.exp(sum(math.log(v) for v in adjusted) / len(adjusted))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["program", "library", "linkage", "functions_used",
                             "instructions_used", "pinned_functions",
                             "fn_footprint_pct", "insn_footprint_pct"])
            for row in self.rows:
                writer.writerow([row.program, row.library, row.linkage,
                                 row.functions_used, row.instructions_used,
                                 row.pinned_functions,
                                 f"{row.fn_footprint_pct:.2f}",
                                 f"{row.insn_footprint_pct:.2f}"])
            mean = self.geometric_mean()
            writer.writerow(["geometric_mean", "", "",
                             "", "", "",
                             f"{mean['fn_footprint_pct']:.2f}",
                             f"{mean['insn_footprint_pct']:.2f}"])


def footprint(executables: list[str], resolver,
              page_size: int = loader.DEFAULT_PAGE_SIZE) -> StudyTable:
    """Per-program, per-library usage table over a corpus."""
    table = StudyTable()
    for program in executables:
        try:
            image = loader.preload(program, resolver, page_size)
            bindings = loader.resolve(image)
            retained = loader.compute_retained(image, bindings)
        except PiecewiseError as exc:
            table.failures[program] = f"{type(exc).__name__}: {exc}"
            continue
        exe = image.executable
        direct = set(exe.needed) | {rec.module for rec in exe.training if rec.kind == "dlopen"}
        for mod in image.load_order[1:]:
            sizes = {s.name: s.size for s in mod.symbols if s.defined != DEF_UNDEFINED}
            used = pinned = insns = 0
            for name in retained.functions(mod.name):
                reason = retained.provenance[(mod.name, name)]
                if reason in IMPORT_REASONS:
                    used += 1
                    insns += sizes.get(name, 0) // INSTRUCTION_WIDTH
                else:
                    pinned += 1
            table.rows.append(StudyRow(
                program=program,
                library=mod.name,
                linkage="direct" if mod.name in direct else "transitive",
                functions_used=used,
                instructions_used=insns,
                pinned_functions=pinned,
                total_functions=len(sizes),
                total_instructions=sum(sizes.values()) // INSTRUCTION_WIDTH,
            ))
    return table
