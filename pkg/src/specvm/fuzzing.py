"""Coverage-guided fuzzing with speculation exposure.

The loop mutates inputs from a corpus, runs each new input through the
exposure engine, and keeps the input when it reaches a new architectural
control-flow edge or surfaces a violation key nobody has seen yet.  Branch
statistics count how many distinct inputs reached each conditional branch,
which is what drives the simulation depth schedule: deeper nesting is
granted to branches as ever more inputs pile onto them.

Inputs are named by content hash, so the corpus and all reports stay
stable across runs.  With a single worker the whole session is a pure
function of the seed; extra workers trade that determinism for speed.

Artifact layout under the output directory::

    corpus/<id>_<reason>.bin   kept inputs (reason: seed, vuln, or edge)
    crashes/<id>.bin           inputs whose architectural run faulted
    trace.jsonl                violation records, per-run deduplicated
    branch_stats.json          distinct-input count per branch
    session.json               seed, counters, wall time
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .artifacts import write_json, write_lines
from .detect import dedup_key
from .engine import BranchStats, ExposureEngine, SpecConfig
from .isa import Program
from .machine import ExecImage

DEFAULT_SEEDS = (b"", b"\x00\x00\x00\x00")
MUTATORS = ("bitflip", "byteset", "insert", "delete", "splice")

KEEP_SEED = "seed"
KEEP_VULN = "vuln"
KEEP_EDGE = "edge"


def input_id(data: bytes) -> str:
    """Stable content-derived name for a fuzzing input."""
    return hashlib.sha1(data).hexdigest()[:12]


@dataclass(frozen=True)
class FuzzConfig:
    runs: int = 1000
    seed: int = 0
    workers: int = 1
    max_len: int = 64
    identity: str = "offset"
    spec: SpecConfig = field(default_factory=SpecConfig)

    def __post_init__(self):
        if self.runs < 0:
            raise ValueError("runs must not be negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")


@dataclass
class FuzzResult:
    attempts: int
    runs: int
    corpus: list[tuple[str, bytes, str]]  # (id, data, keep reason)
    crashes: list[tuple[str, bytes]]
    edges: set[tuple[int, int]]
    keys: set
    records: list  # run-deduplicated ViolationRecords, in run order
    stats: BranchStats
    wall_seconds: float


def mutate(data: bytes, rng: random.Random, corpus: list[bytes],
           max_len: int) -> bytes:
    """Apply a havoc stack of 1 to 8 elementary mutations."""
    buf = bytearray(data)
    for _ in range(rng.randint(1, 8)):
        op = rng.choice(MUTATORS)
        if op == "bitflip" and buf:
            i = rng.randrange(len(buf))
            buf[i] ^= 1 << rng.randrange(8)
        elif op == "byteset":
            if buf:
                buf[rng.randrange(len(buf))] = rng.randrange(256)
            else:
                buf.append(rng.randrange(256))
        elif op == "insert":
            if len(buf) < max_len:
                buf.insert(rng.randint(0, len(buf)), rng.randrange(256))
        elif op == "delete" and buf:
            del buf[rng.randrange(len(buf))]
        elif op == "splice" and corpus:
            other = rng.choice(corpus)
            if other:
                cut_a = rng.randint(0, len(buf))
                cut_b = rng.randrange(len(other))
                buf = bytearray(buf[:cut_a]) + bytearray(other[cut_b:])
                del buf[max_len:]
    return bytes(buf)


class Fuzzer:
    """One fuzzing session over a fixed program."""

    def __init__(self, program: Program | ExecImage,
                 config: FuzzConfig | None = None,
                 seeds: tuple[bytes, ...] = DEFAULT_SEEDS):
        self.image = program if isinstance(program, ExecImage) else ExecImage(program)
        self.cfg = config or FuzzConfig()
        self.seeds = tuple(seeds)
        self.stats = BranchStats()
        self.lock = threading.Lock()
        self.coverage: set[tuple[int, int]] = set()
        self.keys: set = set()
        self.corpus: list[tuple[str, bytes, str]] = []
        self.crashes: list[tuple[str, bytes]] = []
        self.records: list = []
        self.executed_ids: set[str] = set()
        self.runs = 0
        self.attempts = 0

    def _execute(self, engine: ExposureEngine, data: bytes, reason_hint: str) -> None:
        """Run one distinct input and merge what it found.  Caller holds no
        lock; merging takes it."""
        iid = input_id(data)
        with self.lock:
            if iid in self.executed_ids:
                return
            self.executed_ids.add(iid)
            serial = self.runs
            self.runs += 1
        trace = engine.run(data, self.stats, input_id=iid, run_serial=serial)
        run_records = trace.deduped(self.cfg.identity)
        with self.lock:
            new_edge = bool(trace.edges - self.coverage)
            self.coverage |= trace.edges
            new_key = False
            for rec in run_records:
                k = dedup_key(rec, self.cfg.identity)
                if k not in self.keys:
                    self.keys.add(k)
                    new_key = True
            self.records.extend(run_records)
            if trace.result.fault is not None:
                self.crashes.append((iid, data))
            if reason_hint == KEEP_SEED:
                self.corpus.append((iid, data, KEEP_SEED))
            elif new_key:
                self.corpus.append((iid, data, KEEP_VULN))
            elif new_edge:
                self.corpus.append((iid, data, KEEP_EDGE))

    def _pick_parent(self, rng: random.Random) -> bytes:
        with self.lock:
            pool = self.corpus
            return rng.choice(pool)[1] if pool else b""

    def _corpus_bytes(self) -> list[bytes]:
        with self.lock:
            return [d for _, d, _ in self.corpus]

    def _worker(self, widx: int, budget: int) -> None:
        rng = random.Random(self.cfg.seed * 1_000_003 + widx)
        engine = ExposureEngine(self.image, self.cfg.spec)
        for _ in range(budget):
            parent = self._pick_parent(rng)
            data = mutate(parent, rng, self._corpus_bytes(), self.cfg.max_len)
            with self.lock:
                self.attempts += 1
            self._execute(engine, data, "")

    def run_session(self) -> FuzzResult:
        t0 = time.monotonic()
        engine = ExposureEngine(self.image, self.cfg.spec)
        for s in self.seeds:
            with self.lock:
                self.attempts += 1
            self._execute(engine, s, KEEP_SEED)
        budget = self.cfg.runs
        if self.cfg.workers == 1:
            self._worker(0, budget)
        else:
            per = budget // self.cfg.workers
            extra = budget - per * self.cfg.workers
            threads = []
            for w in range(self.cfg.workers):
                b = per + (1 if w < extra else 0)
                t = threading.Thread(target=self._worker, args=(w, b))
                threads.append(t)
                t.start()
            for t in threads:
                t.join()
        return FuzzResult(
            attempts=self.attempts,
            runs=self.runs,
            corpus=list(self.corpus),
            crashes=list(self.crashes),
            edges=set(self.coverage),
            keys=set(self.keys),
            records=list(self.records),
            stats=self.stats,
            wall_seconds=time.monotonic() - t0,
        )


def write_artifacts(result: FuzzResult, out_dir: str | Path,
                    config: FuzzConfig) -> None:
    """Write the session's artifact tree (see module docstring)."""
    out = Path(out_dir)
    (out / "corpus").mkdir(parents=True, exist_ok=True)
    (out / "crashes").mkdir(parents=True, exist_ok=True)
    for iid, data, reason in result.corpus:
        (out / "corpus" / f"{iid}_{reason}.bin").write_bytes(data)
    for iid, data in result.crashes:
        (out / "crashes" / f"{iid}.bin").write_bytes(data)
    meta = {"file": "trace", "identity": config.identity,
            "seed": config.seed, "workers": config.workers}
    write_lines(out / "trace.jsonl", meta,
                [json.dumps(r.to_wire(), sort_keys=True, separators=(",", ":"))
                 for r in result.records])
    write_json(out / "branch_stats.json", {"file": "branch-stats"},
               {"counts": result.stats.to_dict()})
    write_json(out / "session.json", {"file": "session"}, {
        "seed": config.seed,
        "workers": config.workers,
        "attempts": result.attempts,
        "runs": result.runs,
        "corpus": len(result.corpus),
        "crashes": len(result.crashes),
        "edges": len(result.edges),
        "keys": len(result.keys),
        "wall_seconds": result.wall_seconds,
    })


def fuzz_loop(program: Program | ExecImage, config: FuzzConfig | None = None,
              seeds: tuple[bytes, ...] = DEFAULT_SEEDS,
              out_dir: str | Path | None = None) -> FuzzResult:
    """Run one fuzzing session; write artifacts when out_dir is given."""
    cfg = config or FuzzConfig()
    fuzzer = Fuzzer(program, cfg, seeds)
    result = fuzzer.run_session()
    if out_dir is not None:
        write_artifacts(result, out_dir, cfg)
    return result


__all__ = [
    "DEFAULT_SEEDS", "MUTATORS", "KEEP_SEED", "KEEP_VULN", "KEEP_EDGE",
    "input_id", "FuzzConfig", "FuzzResult", "mutate", "Fuzzer",
    "write_artifacts", "fuzz_loop",
]
