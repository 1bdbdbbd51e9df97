"""Deterministic generator for a small cross-optimization assembly corpus.

Each family is one routine compiled at three levels: a rotating low level
(O0, O1, or O2 by family index) plus O3 and Os. A family's identity rides on
tokens drawn from corpus-wide pools (immediates, callee names, one global),
so every identity token recurs often enough to survive frequency filtering.
Levels differ the way optimizers differ: register maps, frame usage, filler
volume, and event order all change, while call targets and constants do not.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np

from .corpus import FunctionRecord, save_dataset

# Shared pools. Pool sizes are balanced against the default corpus size so
# each entry lands in well over 32 records; family-unique spellings would be
# filtered into the unknown token and carry no signal.
CONSTS = tuple(
    f"0x{v:x}" for v in (
        16, 24, 32, 40, 48, 64, 80, 96, 112, 128, 160, 192,
        224, 256, 320, 384, 448, 512, 640, 768, 896, 1024,
    )
)
CALLEES = (
    "memcpy", "memset", "strlen", "strcmp", "malloc", "free",
    "printf", "fread", "fwrite", "qsort", "hash_mix", "checksum",
    "table_get", "table_put", "log_msg", "flush_buf",
)
GLOBALS = (
    "g_state", "g_table", "g_flags", "g_count", "g_limit", "g_cache",
    "g_head", "g_tail", "g_mask", "g_seed", "g_mode", "g_depth",
)
SMALL = ("0x0", "0x1", "0x2", "0x4", "0x8")
LABELS = (".L1", ".L2", ".L3", ".L4")

LOW_LEVELS = ("O0", "O1", "O2")


@dataclass(frozen=True)
class Dialect:
    regs: tuple[str, ...]
    arg_reg: str
    prologue: tuple[str, ...]
    epilogue: tuple[str, ...]
    filler_mnems: tuple[str, ...]
    filler_range: tuple[int, int]
    frame_spills: int  # stack traffic emitted after the prologue


DIALECTS = {
    "O0": Dialect(
        regs=("eax", "ebx", "ecx", "edx", "esi", "edi"), arg_reg="edi",
        prologue=("push rbp", "mov rbp, rsp"), epilogue=("pop rbp", "ret"),
        filler_mnems=("mov", "add", "sub", "cmp", "and", "or"),
        filler_range=(10, 16), frame_spills=3,
    ),
    "O1": Dialect(
        regs=("eax", "ecx", "edx", "esi", "edi", "r8d"), arg_reg="edi",
        prologue=("push rbx",), epilogue=("pop rbx", "ret"),
        filler_mnems=("mov", "add", "xor", "test", "shl", "sub"),
        filler_range=(7, 11), frame_spills=0,
    ),
    "O2": Dialect(
        regs=("eax", "ecx", "esi", "edi", "r8d", "r9d"), arg_reg="edi",
        prologue=("push r12",), epilogue=("pop r12", "ret"),
        filler_mnems=("lea", "add", "xor", "test", "imul", "or"),
        filler_range=(6, 10), frame_spills=0,
    ),
    "O3": Dialect(
        regs=("rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10"),
        arg_reg="rdi", prologue=(), epilogue=("ret",),
        filler_mnems=("lea", "imul", "xor", "test", "shl", "add"),
        filler_range=(4, 8), frame_spills=0,
    ),
    "Os": Dialect(
        regs=("eax", "ecx", "edx", "ebx"), arg_reg="edi",
        prologue=("push rbx",), epilogue=("pop rbx", "ret"),
        filler_mnems=("mov", "add", "xor", "cmp"),
        filler_range=(3, 6), frame_spills=0,
    ),
}


@dataclass(frozen=True)
class SynthConfig:
    n_families: int = 200
    seed: int = 0
    project: str = "synth"
    binary: str = "bin0"

    def __post_init__(self):
        if self.n_families < 1:
            raise ValueError("n_families must be >= 1")


@dataclass(frozen=True)
class FamilySignature:
    consts: tuple[str, str, str]
    callees: tuple[str, str]
    glob: str


def family_levels(index: int) -> tuple[str, str, str]:
    """Three levels per family: a rotating low level plus O3 and Os."""
    return (LOW_LEVELS[index % 3], "O3", "Os")


def _signature(rng: np.random.Generator) -> FamilySignature:
    consts = tuple(np.asarray(CONSTS)[rng.choice(len(CONSTS), 3, replace=False)])
    callees = tuple(np.asarray(CALLEES)[rng.choice(len(CALLEES), 2, replace=False)])
    glob = GLOBALS[int(rng.integers(len(GLOBALS)))]
    return FamilySignature(consts, callees, glob)


def _signature_events(sig: FamilySignature, d: Dialect, rng: np.random.Generator):
    """Each event is a short run of instructions; identity tokens stay put
    across levels while the registers around them are the level's own."""
    r = lambda: d.regs[int(rng.integers(len(d.regs)))]
    events = [
        [f"mov {r()}, {sig.consts[0]}"],
        [f"mov {d.arg_reg}, {sig.consts[1]}", f"call {sig.callees[0]}"],
        [f"mov {r()}, {sig.glob}", f"add {r()}, {sig.consts[0]}"],
        [f"call {sig.callees[1]}", f"mov {r()}, {sig.glob}"],
        [f"cmp {r()}, {sig.consts[2]}", f"jne {LABELS[int(rng.integers(len(LABELS)))]}"],
        # unrolled second pass over the hot pair of constants
        [f"add {r()}, {sig.consts[1]}", f"cmp {r()}, {sig.consts[2]}"],
    ]
    return events


def _filler_instruction(d: Dialect, rng: np.random.Generator) -> str:
    mnem = d.filler_mnems[int(rng.integers(len(d.filler_mnems)))]
    a = d.regs[int(rng.integers(len(d.regs)))]
    if rng.random() < 0.4:
        return f"{mnem} {a}, {SMALL[int(rng.integers(len(SMALL)))]}"
    b = d.regs[int(rng.integers(len(d.regs)))]
    return f"{mnem} {a}, {b}"


def _render(sig: FamilySignature, level: str, rng: np.random.Generator) -> list[str]:
    d = DIALECTS[level]
    body: list[str] = list(d.prologue)
    for k in range(d.frame_spills):
        reg = d.regs[int(rng.integers(len(d.regs)))]
        body.append(f"mov [rbp-0x{8 * (k + 1):x}], {reg}")

    events = _signature_events(sig, d, rng)
    order = rng.permutation(len(events))
    n_filler = int(rng.integers(d.filler_range[0], d.filler_range[1] + 1))
    # spread the filler across the gaps between event blocks
    gaps = rng.integers(0, len(events) + 1, size=n_filler)
    for slot, ev in enumerate(order):
        body.extend(_filler_instruction(d, rng) for _ in range(int(np.sum(gaps == slot))))
        body.extend(events[ev])
    body.extend(_filler_instruction(d, rng)
                for _ in range(int(np.sum(gaps == len(events)))))
    body.extend(d.epilogue)
    return body


def generate(cfg: SynthConfig) -> list[FunctionRecord]:
    root = np.random.SeedSequence(cfg.seed)
    records = []
    for i, fam_seq in enumerate(root.spawn(cfg.n_families)):
        sig_seq, *level_seqs = fam_seq.spawn(4)
        sig = _signature(np.random.default_rng(sig_seq))
        for level, seq in zip(family_levels(i), level_seqs):
            body = _render(sig, level, np.random.default_rng(seq))
            records.append(FunctionRecord(
                project=cfg.project, binary=cfg.binary,
                function_name=f"fn_{i:04d}", opt_level=level,
                instructions=tuple(body),
            ))
    return records


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="asmsim-synth",
        description="generate a deterministic cross-optimization corpus")
    parser.add_argument("--families", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="output JSONL path")
    args = parser.parse_args(argv)
    records = generate(SynthConfig(n_families=args.families, seed=args.seed))
    save_dataset(records, args.out)
    print(f"wrote {len(records)} records ({args.families} families) to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
