"""Network data model, IEEE Common Data Format ingestion and admittance assembly.

All case objects are frozen dataclasses holding tuples, so a ``NetworkCase``
can be shared freely between worker processes. Loads and machine outputs are
kept in MW/MVar; impedances, charging and bus shunts are per-unit on
``base_mva``.
"""
from __future__ import annotations

import dataclasses
import enum
import math
import sys
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class CaseError(Exception):
    """Base class for problems with case input."""


class ParseError(CaseError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


class StructuralError(CaseError):
    """The records parse but do not describe a usable network."""


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


class MachineKind(str, enum.Enum):
    SYNC_GEN = "SyncGen"
    SYNC_CONDENSER = "SyncCondenser"
    SCIG = "SCIG"
    DFIG = "DFIG"
    SOLAR_PV = "SolarPV"


@dataclass(frozen=True)
class Bus:
    id: int
    name: str
    kind: BusKind
    v_setpoint: float | None = None
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    base_kv: float = 0.0
    # solved state stored in the case file; only used for non-flat starts
    v_init: float = 1.0
    angle_init_deg: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    is_transformer: bool = False
    circuit_id: str = ""
    outage_eligible: bool = False

    @property
    def name(self) -> str:
        return f"Line_{self.from_bus:04d}_{self.to_bus:04d}{self.circuit_id}"


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float
    scalable: bool = True


@dataclass(frozen=True)
class Machine:
    bus: int
    kind: MachineKind
    p_set: float
    v_set: float
    q_min: float
    q_max: float
    rating: float
    in_service: bool = True
    # model parameters for induction machines, as sorted (name, value) pairs
    params: tuple[tuple[str, float], ...] = ()

    @property
    def param_dict(self) -> dict[str, float]:
        return dict(self.params)


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...] = ()
    machines: tuple[Machine, ...] = ()
    title: str = ""

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise StructuralError(f"duplicate bus id(s): {dup}")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise StructuralError(f"branch {br.id} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise StructuralError(f"branch {br.id} connects bus {br.from_bus} to itself")
            if br.x == 0.0:
                raise StructuralError(f"branch {br.id} has zero series reactance")
            if br.tap_ratio <= 0.0:
                raise StructuralError(f"branch {br.id} has non-positive tap ratio")
        for item in (*self.loads, *self.machines):
            if item.bus not in known:
                raise StructuralError(f"{type(item).__name__} at unknown bus {item.bus}")
        for m in self.machines:
            if m.q_min > m.q_max:
                raise StructuralError(f"machine at bus {m.bus} has q_min > q_max")
        if not any(b.kind is BusKind.SLACK for b in self.buses):
            raise StructuralError("no slack bus")

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.kind is BusKind.SLACK)

    def branch_by_name(self, name: str) -> Branch:
        for br in self.branches:
            if br.name == name:
                return br
        raise KeyError(name)

    def total_load(self, scalable_only: bool = True) -> float:
        return math.fsum(ld.p for ld in self.loads if ld.scalable or not scalable_only)

    @property
    def load_buses(self) -> frozenset[int]:
        return frozenset(ld.bus for ld in self.loads if ld.p != 0.0 or ld.q != 0.0)


@dataclass(frozen=True)
class AdmittanceMatrix:
    matrix: sp.csr_matrix
    bus_ids: tuple[int, ...]
    index: Mapping[int, int] = field(default_factory=dict)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True)
class IslandReport:
    islands: tuple[frozenset[int], ...]
    slack_island_index: int | None
    disconnected_load_buses: frozenset[int]

    @property
    def slack_island(self) -> frozenset[int]:
        if self.slack_island_index is None:
            return frozenset()
        return self.islands[self.slack_island_index]


# ---------------------------------------------------------------------------
# IEEE Common Data Format

_CDF_BUS_TYPES = {0: BusKind.PQ, 1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def _floats(tokens: list[str], lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"bad numeric field ({exc})", lineno) from None


def parse_case(text: str, sidecar: str | Mapping | None = None) -> NetworkCase:
    """Parse IEEE Common Data Format text into a :class:`NetworkCase`.

    ``sidecar`` is TOML text (or an already-loaded mapping) declaring machine
    kinds, reactive limits, parallel-circuit splits and the outage-eligible
    branch names, none of which the CDF carries. Without a sidecar every
    generator is a ``SyncGen`` and every non-transformer branch is eligible.
    """
    if isinstance(sidecar, str):
        try:
            sidecar = tomllib.loads(sidecar)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"sidecar: {exc}") from None
    sidecar = dict(sidecar or {})

    lines = text.splitlines()
    if not lines:
        raise ParseError("empty case file", 1)
    base_mva = _parse_title(lines[0])

    bus_rows: list[tuple[int, list[str], str]] = []
    branch_rows: list[tuple[int, list[str]]] = []
    section = None
    for lineno, line in enumerate(lines[1:], start=2):
        head = line.strip().upper()
        if section is None:
            if head.startswith("BUS DATA FOLLOWS"):
                section = "bus"
            elif head.startswith("BRANCH DATA FOLLOWS"):
                section = "branch"
            elif head.startswith(("LOSS ZONES", "INTERCHANGE", "TIE LINES")):
                section = "skip"
            elif head.startswith("END OF DATA"):
                break
            continue
        if head.startswith("-9"):
            section = None
            continue
        if not head or section == "skip":
            continue
        if section == "bus":
            tokens = line[18:].split() if len(line) > 18 else []
            if len(tokens) < 15:
                raise ParseError("bus record has too few fields", lineno)
            bus_rows.append((lineno, [line[:4]] + tokens, line[5:17].strip()))
        else:
            tokens = line.split()
            if len(tokens) < 15:
                raise ParseError("branch record has too few fields", lineno)
            branch_rows.append((lineno, tokens))
    if section not in (None, "skip"):
        raise ParseError("unterminated data section", len(lines))

    buses: list[Bus] = []
    loads: list[Load] = []
    machines: dict[int, Machine] = {}
    for lineno, tokens, name in bus_rows:
        try:
            bus_id = int(tokens[0])
            code = int(tokens[3])
        except ValueError:
            raise ParseError("bad bus number or type", lineno) from None
        if bus_id <= 0:
            raise ParseError("bus number must be positive", lineno)
        if code not in _CDF_BUS_TYPES:
            raise ParseError(f"unknown bus type {code}", lineno)
        v, ang, pd, qd, pg, _qg, kv, vdes, qmax, qmin, g, b = _floats(tokens[4:16], lineno)
        kind = _CDF_BUS_TYPES[code]
        vset = vdes if vdes > 0 else v
        if kind is not BusKind.PQ and vset <= 0:
            raise ParseError("regulated bus without a positive voltage setpoint", lineno)
        buses.append(Bus(bus_id, name, kind, vset if kind is not BusKind.PQ else None,
                         g, b, kv, v, ang))
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(bus_id, pd, qd))
        if kind is not BusKind.PQ:
            machines[bus_id] = Machine(bus_id, MachineKind.SYNC_GEN, pg, vset,
                                       min(qmin, qmax), max(qmin, qmax),
                                       rating=math.hypot(pg, max(abs(qmin), abs(qmax))))

    branches: list[Branch] = []
    for lineno, tokens in branch_rows:
        try:
            fb, tb, circuit, btype = int(tokens[0]), int(tokens[1]), int(tokens[4]), int(tokens[5])
        except ValueError:
            raise ParseError("bad branch bus number, circuit or type", lineno) from None
        r, x, bc = _floats(tokens[6:9], lineno)
        ratio, shift = _floats(tokens[14:16], lineno)
        if shift != 0.0:
            raise ParseError("phase-shifting transformers are not supported", lineno)
        if x == 0.0:
            raise ParseError("zero series reactance", lineno)
        branches.append(Branch(0, fb, tb, r, x, bc, ratio if ratio != 0.0 else 1.0,
                               btype != 0, str(circuit)))

    branches = _apply_parallel_splits(branches, sidecar.get("parallel_circuits", []))
    branches = _name_circuits(branches)

    elig = sidecar.get("contingency", {}).get("eligible")
    names = [br.name for br in branches]
    if elig is not None:
        unknown = sorted(set(elig) - set(names))
        if unknown:
            raise StructuralError(f"sidecar names unknown branches: {unknown}")
        elig = set(elig)
    branches = [
        dataclasses.replace(br, id=i, outage_eligible=(br.name in elig) if elig is not None
                            else not br.is_transformer)
        for i, br in enumerate(branches, start=1)
    ]

    bus_ids = {b.id for b in buses}
    for entry in sidecar.get("machines", []):
        m = _sidecar_machine(entry, machines.get(entry.get("bus")), bus_ids)
        machines[m.bus] = m

    return NetworkCase(base_mva, tuple(buses), tuple(branches), tuple(loads),
                       tuple(machines[k] for k in sorted(machines)), lines[0].rstrip())


def _parse_title(line: str) -> float:
    try:
        return float(line[31:37])
    except ValueError:
        pass
    for tok in line.split():
        try:
            value = float(tok)
        except ValueError:
            continue
        if value > 0:
            return value
    raise ParseError("title record carries no MVA base", 1)


def _apply_parallel_splits(branches: list[Branch], splits: Iterable[Mapping]) -> list[Branch]:
    out = list(branches)
    for spec in splits:
        pair = (spec["from_bus"], spec["to_bus"])
        count = int(spec.get("count", 2))
        idx = [i for i, br in enumerate(out) if (br.from_bus, br.to_bus) == pair]
        if len(idx) != 1:
            # already split (e.g. a re-parsed serialized case) or absent
            continue
        i = idx[0]
        br = out[i]
        parts = [dataclasses.replace(br, r=br.r * count, x=br.x * count,
                                     b_charging=br.b_charging / count, circuit_id=str(k))
                 for k in range(1, count + 1)]
        out[i:i + 1] = parts
    return out


def _name_circuits(branches: list[Branch]) -> list[Branch]:
    pairs: dict[tuple[int, int], int] = {}
    for br in branches:
        key = (br.from_bus, br.to_bus)
        pairs[key] = pairs.get(key, 0) + 1
    return [dataclasses.replace(br, circuit_id=f"/{br.circuit_id}"
                                if pairs[(br.from_bus, br.to_bus)] > 1 else "")
            for br in branches]


def _sidecar_machine(entry: Mapping, existing: Machine | None, bus_ids: set[int]) -> Machine:
    bus = entry.get("bus")
    if bus not in bus_ids:
        raise StructuralError(f"sidecar machine at unknown bus {bus}")
    try:
        kind = MachineKind(entry.get("kind", "SyncGen"))
    except ValueError:
        raise StructuralError(f"sidecar machine at bus {bus}: unknown kind {entry.get('kind')!r}") from None
    base = existing or Machine(bus, kind, 0.0, 1.0, 0.0, 0.0, 0.0)
    values = {k: entry[k] for k in ("p_set", "v_set", "q_min", "q_max", "rating", "in_service")
              if k in entry}
    params = tuple(sorted((str(k), float(v)) for k, v in entry.get("params", {}).items()))
    m = dataclasses.replace(base, kind=kind, params=params or base.params, **values)
    if kind is MachineKind.SYNC_CONDENSER and m.p_set != 0.0:
        raise StructuralError(f"synchronous condenser at bus {bus} has nonzero p_set")
    return m


def _num(x: float, width: int) -> str:
    text = repr(float(x))
    if text.endswith(".0") and len(text) > 2:
        text = text[:-1] + "0"
    return " " + text.rjust(width - 1)


def serialize_case(case: NetworkCase) -> str:
    """Write ``case`` back as CDF text; :func:`parse_case` inverts it."""
    machines = {m.bus: m for m in case.machines}
    codes = {BusKind.SLACK: 3, BusKind.PV: 2, BusKind.PQ: 0}
    loads: dict[int, list[float]] = {}
    for ld in case.loads:
        acc = loads.setdefault(ld.bus, [0.0, 0.0])
        acc[0] += ld.p
        acc[1] += ld.q
    title = case.title or f" 00/00/00 {'':20s} {case.base_mva:6.1f}"
    out = [title, f"BUS DATA FOLLOWS{len(case.buses):30d} ITEMS"]
    for b in case.buses:
        m = machines.get(b.id)
        pd, qd = loads.get(b.id, (0.0, 0.0))
        row = (f"{b.id:4d} {b.name[:12]:<12s}  1  1 {codes[b.kind]:2d}"
               + _num(b.v_init, 7) + _num(b.angle_init_deg, 8)
               + _num(pd, 10) + _num(qd, 10)
               + _num(m.p_set if m else 0.0, 9) + _num(0.0, 8)
               + _num(b.base_kv, 8) + _num(b.v_setpoint or 0.0, 7)
               + _num(m.q_max if m else 0.0, 8) + _num(m.q_min if m else 0.0, 8)
               + _num(b.shunt_g, 8) + _num(b.shunt_b, 8) + "    0")
        out.append(row)
    out += ["-999", f"BRANCH DATA FOLLOWS{len(case.branches):27d} ITEMS"]
    for br in case.branches:
        circuit = br.circuit_id.lstrip("/") or "1"
        ratio = br.tap_ratio if br.is_transformer else 0.0
        out.append(f"{br.from_bus:4d} {br.to_bus:4d}  1  1 {circuit} {int(br.is_transformer)}"
                   + _num(br.r, 12) + _num(br.x, 12) + _num(br.b_charging, 12)
                   + "     0     0     0    0 0" + _num(ratio, 12) + "  0.0 0.0 0.0 0.0 0.0")
    out += ["-999", "END OF DATA", ""]
    return "\n".join(out)


def load_case(case_path, sidecar_path=None) -> NetworkCase:
    with open(case_path, encoding="utf-8") as fh:
        text = fh.read()
    sidecar = None
    if sidecar_path is not None:
        with open(sidecar_path, encoding="utf-8") as fh:
            sidecar = fh.read()
    return parse_case(text, sidecar)


def ieee14(with_sidecar: bool = True) -> NetworkCase:
    """The bundled IEEE 14-bus archive case."""
    from importlib import resources

    data = resources.files("voltstab") / "data"
    text = (data / "ieee14.cdf").read_text(encoding="utf-8")
    sidecar = (data / "ieee14.toml").read_text(encoding="utf-8") if with_sidecar else None
    return parse_case(text, sidecar)


# ---------------------------------------------------------------------------
# Network matrices and topology

def build_admittance(case: NetworkCase, outages: Iterable[int] = ()) -> AdmittanceMatrix:
    outages = frozenset(outages)
    known = {br.id for br in case.branches}
    missing = outages - known
    if missing:
        raise KeyError(f"unknown branch id(s) {sorted(missing)}")
    ids = case.bus_ids
    index = {bid: i for i, bid in enumerate(ids)}
    rows: list[int] = []
    cols: list[int] = []
    vals: list[complex] = []
    for br in case.branches:
        if br.id in outages:
            continue
        f, t = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        half = 0.5j * br.b_charging
        tap = br.tap_ratio
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [(ys + half) / tap**2, -ys / tap, -ys / tap, ys + half]
    for b in case.buses:
        if b.shunt_g or b.shunt_b:
            i = index[b.id]
            rows.append(i)
            cols.append(i)
            vals.append(complex(b.shunt_g, b.shunt_b))
    n = len(ids)
    y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    y.sum_duplicates()
    return AdmittanceMatrix(y, ids, index)


def check_connectivity(case: NetworkCase, outages: Iterable[int] = ()) -> IslandReport:
    outages = frozenset(outages)
    adj: dict[int, set[int]] = {b: set() for b in case.bus_ids}
    for br in case.branches:
        if br.id not in outages:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen: set[int] = set()
    islands = []
    for start in case.bus_ids:
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in comp:
                    comp.add(nb)
                    queue.append(nb)
        seen |= comp
        islands.append(frozenset(comp))
    slack = case.slack_bus
    slack_idx = next((i for i, isl in enumerate(islands) if slack in isl), None)
    slack_island = islands[slack_idx] if slack_idx is not None else frozenset()
    return IslandReport(tuple(islands), slack_idx, case.load_buses - slack_island)


# ---------------------------------------------------------------------------
# Case transformations

def apply_sc_mode(case: NetworkCase, enabled: bool) -> NetworkCase:
    """Connect (PV-typed, zero P, Q limits active) or disconnect synchronous condensers."""
    sc_buses = {m.bus for m in case.machines if m.kind is MachineKind.SYNC_CONDENSER}
    if not sc_buses:
        return case
    if enabled:
        machines = tuple(dataclasses.replace(m, p_set=0.0, in_service=True)
                         if m.kind is MachineKind.SYNC_CONDENSER else m for m in case.machines)
        buses = tuple(dataclasses.replace(b, kind=BusKind.PV,
                                          v_setpoint=_sc_setpoint(case, b.id))
                      if b.id in sc_buses and b.kind is BusKind.PQ else b for b in case.buses)
    else:
        machines = tuple(m for m in case.machines if m.kind is not MachineKind.SYNC_CONDENSER)
        still_regulated = {m.bus for m in machines if m.in_service}
        buses = tuple(dataclasses.replace(b, kind=BusKind.PQ, v_setpoint=None)
                      if b.id in sc_buses and b.kind is BusKind.PV and b.id not in still_regulated
                      else b for b in case.buses)
    return dataclasses.replace(case, buses=buses, machines=machines)


def _sc_setpoint(case: NetworkCase, bus_id: int) -> float:
    return next(m.v_set for m in case.machines
                if m.bus == bus_id and m.kind is MachineKind.SYNC_CONDENSER)


def scale_loads(case: NetworkCase, delta_p: float, mode: str = "constant_pf") -> NetworkCase:
    """Grow the scalable system load by ``delta_p`` MW, each load in proportion to its base P.

    ``mode="constant_pf"`` scales Q with P; ``mode="p_only"`` leaves Q untouched.
    """
    if delta_p < 0:
        raise ValueError("delta_p must be non-negative")
    if mode not in ("constant_pf", "p_only"):
        raise ValueError(f"unknown load growth mode {mode!r}")
    if delta_p == 0:
        return case
    total = case.total_load()
    if total <= 0:
        raise ValueError("case has no scalable load to grow")
    k = (total + delta_p) / total
    loads = tuple(dataclasses.replace(ld, p=ld.p * k, q=ld.q * k if mode == "constant_pf" else ld.q)
                  if ld.scalable else ld for ld in case.loads)
    return dataclasses.replace(case, loads=loads)


def remove_branches(case: NetworkCase, branch_ids: Iterable[int]) -> NetworkCase:
    drop = frozenset(branch_ids)
    return dataclasses.replace(case, branches=tuple(br for br in case.branches if br.id not in drop))
