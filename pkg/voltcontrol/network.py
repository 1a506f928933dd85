"""
Grid data model, case-file parser and nodal admittance matrix.

A case file is a single JSON document. Every element object must carry
exactly the fields of its dataclass below (optional fields may be left
out); unknown keys are rejected. Power quantities stay in MW / MVar in the
model and are converted to per-unit on ``s_base_mva`` by the solvers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from .errors import CaseError

DEFAULT_S_BASE_MVA = 100.0
DEFAULT_F_BASE_HZ = 50.0
DEFAULT_V_MIN = 0.90
DEFAULT_V_MAX = 1.10
ALPHA_SUM_TOL = 1e-9


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class ShuntKind(str, Enum):
    SVC = "svc"
    STATCOM = "statcom"


@dataclass(frozen=True)
class Bus:
    id: int
    name: str
    base_kv: float
    kind: BusKind
    area: int
    v_min: float = DEFAULT_V_MIN
    v_max: float = DEFAULT_V_MAX
    is_pilot: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    rating_mva: float
    b_shunt: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p0_mw: float
    p_min_mw: float
    p_max_mw: float
    q_min_mvar: float
    q_max_mvar: float
    s_max_mva: float
    k_p_mw_per_hz: float
    alpha: float
    v_set_pu: float
    in_svr: bool = True
    # machine base (s_max_mva); None means "not given in the case file"
    x_d_pu: float | None = None
    e_q_max_pu: float | None = None


@dataclass(frozen=True)
class Load:
    bus: int
    p_mw: float
    q_mvar: float
    profile_key: str


@dataclass(frozen=True)
class WindPark:
    bus: int
    p_max_mw: float
    profile_key: str


@dataclass(frozen=True)
class ShuntDevice:
    bus: int
    kind: ShuntKind
    q_min_mvar: float
    q_max_mvar: float
    q_set_mvar: float = 0.0


@dataclass(frozen=True)
class Area:
    id: int
    pilot_bus: int
    buses: Tuple[int, ...]


@dataclass(frozen=True)
class Network:
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    generators: Tuple[Generator, ...] = ()
    loads: Tuple[Load, ...] = ()
    wind_parks: Tuple[WindPark, ...] = ()
    shunts: Tuple[ShuntDevice, ...] = ()
    areas: Tuple[Area, ...] = ()
    s_base_mva: float = DEFAULT_S_BASE_MVA
    f_base_hz: float = DEFAULT_F_BASE_HZ

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        for b in self.buses:
            if b.kind == BusKind.SLACK:
                return b.id
        raise CaseError("network has no slack bus")

    def bus_ids(self, kind: BusKind) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.kind == kind], dtype=np.int64)

    def bus_by_name(self, name: str) -> Bus:
        for b in self.buses:
            if b.name == name:
                return b
        raise KeyError(name)

    def area(self, area_id: int) -> Area:
        for a in self.areas:
            if a.id == area_id:
                return a
        raise KeyError(area_id)

    def generators_in_area(self, area_id: int, svr_only: bool = True) -> List[int]:
        """Generator indices located in an area (optionally only SVR participants)."""
        members = set(self.area(area_id).buses)
        return [
            k for k, g in enumerate(self.generators)
            if g.bus in members and (g.in_svr or not svr_only)
        ]

    def generator_label(self, k: int) -> str:
        return f"G{k + 1} (bus {self.buses[self.generators[k].bus].name})"


@dataclass(frozen=True)
class AdmittanceMatrix:
    dimension: int
    ybus: sp.csr_matrix
    # branch-by-bus matrices giving the current injected at the from / to end
    yf: sp.csr_matrix
    yt: sp.csr_matrix
    # equivalent pi-model shunt admittance seen at every bus
    shunt: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOP_LEVEL_KEYS = {
    "s_base_mva", "f_base_hz", "buses", "branches", "generators",
    "loads", "wind_parks", "shunts", "areas",
}

_SECTIONS: Dict[str, type] = {
    "buses": Bus,
    "branches": Branch,
    "generators": Generator,
    "loads": Load,
    "wind_parks": WindPark,
    "shunts": ShuntDevice,
    "areas": Area,
}

_BUS_REF_FIELDS = {
    "branches": ("from_bus", "to_bus"),
    "generators": ("bus",),
    "loads": ("bus",),
    "wind_parks": ("bus",),
    "shunts": ("bus",),
    "areas": ("pilot_bus",),
}


def _build_element(cls: type, raw: Any, where: str) -> Any:
    if not isinstance(raw, dict):
        raise CaseError(f"{where}: expected an object, got {type(raw).__name__}")

    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise CaseError(f"{where}: unknown key(s) {', '.join(unknown)}")

    missing = [
        name for name, f in fields.items()
        if name not in raw
        and f.default is dataclasses.MISSING
        and f.default_factory is dataclasses.MISSING  # type: ignore[misc]
    ]
    if missing:
        raise CaseError(f"{where}: missing key(s) {', '.join(missing)}")

    kwargs: Dict[str, Any] = {}
    try:
        for name, value in raw.items():
            if cls is Bus and name == "kind":
                value = BusKind(value)
            elif cls is ShuntDevice and name == "kind":
                value = ShuntKind(value)
            elif cls is Area and name == "buses":
                value = tuple(int(v) for v in value)
            elif name in {"id", "bus", "from_bus", "to_bus", "area", "pilot_bus"}:
                if isinstance(value, bool) or int(value) != value:
                    raise ValueError(f"{name} must be an integer")
                value = int(value)
            elif name in {"name", "profile_key"}:
                value = str(value)
            elif name in {"is_pilot", "in_svr"}:
                if not isinstance(value, bool):
                    raise ValueError(f"{name} must be true or false")
            elif value is None and name in {"x_d_pu", "e_q_max_pu"}:
                pass
            else:
                value = float(value)
            kwargs[name] = value
    except (TypeError, ValueError) as exc:
        raise CaseError(f"{where}: {exc}") from None

    return cls(**kwargs)


def parse_case(text: str) -> Network:
    """Parse and validate a case-file document; raises CaseError on any problem."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"syntax error: {exc.msg}", line=exc.lineno) from None

    if not isinstance(raw, dict):
        raise CaseError("case file must contain a JSON object")
    unknown = sorted(set(raw) - _TOP_LEVEL_KEYS)
    if unknown:
        raise CaseError(f"unknown top-level key(s) {', '.join(unknown)}")
    if "buses" not in raw or "branches" not in raw:
        raise CaseError("case file needs at least 'buses' and 'branches'")

    sections: Dict[str, Tuple[Any, ...]] = {}
    for key, cls in _SECTIONS.items():
        items = raw.get(key, [])
        if not isinstance(items, list):
            raise CaseError(f"'{key}' must be a list")
        sections[key] = tuple(_build_element(cls, item, f"{key}[{i}]") for i, item in enumerate(items))

    seen: set[int] = set()
    for b in sections["buses"]:
        if b.id in seen:
            raise CaseError(f"duplicate bus id {b.id}")
        seen.add(b.id)
    area_ids: set[int] = set()
    for a in sections["areas"]:
        if a.id in area_ids:
            raise CaseError(f"duplicate area id {a.id}")
        area_ids.add(a.id)

    for key, ref_fields in _BUS_REF_FIELDS.items():
        for i, item in enumerate(sections[key]):
            for name in ref_fields:
                ref = getattr(item, name)
                if ref not in seen:
                    raise CaseError(f"{key}[{i}]: reference to unknown bus {ref}")
    for a in sections["areas"]:
        for ref in a.buses:
            if ref not in seen:
                raise CaseError(f"areas[{a.id}]: reference to unknown bus {ref}")

    try:
        net = Network(
            buses=tuple(sorted(sections["buses"], key=lambda b: b.id)),
            branches=sections["branches"],
            generators=sections["generators"],
            loads=sections["loads"],
            wind_parks=sections["wind_parks"],
            shunts=sections["shunts"],
            areas=sections["areas"],
            s_base_mva=float(raw.get("s_base_mva", DEFAULT_S_BASE_MVA)),
            f_base_hz=float(raw.get("f_base_hz", DEFAULT_F_BASE_HZ)),
        )
    except (TypeError, ValueError) as exc:
        raise CaseError(str(exc)) from None

    violations = validate(net)
    if violations:
        raise CaseError("invalid case: " + "; ".join(violations), violations=violations)
    return net


def load_case(path: str | Path) -> Network:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CaseError(f"{path}: {exc.strerror or exc}") from None
    return parse_case(text)


def _case_dict(net: Network) -> Dict[str, Any]:
    def plain(obj: Any) -> Dict[str, Any]:
        out = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    return {
        "s_base_mva": net.s_base_mva,
        "f_base_hz": net.f_base_hz,
        **{key: [plain(item) for item in getattr(net, key)] for key in _SECTIONS},
    }


def serialize_case(net: Network) -> str:
    return json.dumps(_case_dict(net), indent=2)


def case_hash(net: Network) -> str:
    canonical = json.dumps(_case_dict(net), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _unreachable_buses(net: Network) -> List[int]:
    n = net.n_bus
    if not net.branches:
        return [b.id for b in net.buses if b.kind != BusKind.SLACK]
    f = np.array([br.from_bus for br in net.branches])
    t = np.array([br.to_bus for br in net.branches])
    graph = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n)).tocsr()
    reached = breadth_first_order(graph, net.slack_bus, directed=False, return_predecessors=False)
    return sorted(set(range(n)) - set(int(i) for i in reached))


def validate(net: Network) -> List[str]:
    """Check every structural invariant; the returned list is empty for a valid network."""
    out: List[str] = []
    ids = [b.id for b in net.buses]
    known = set(ids)

    if sorted(ids) != list(range(len(ids))):
        out.append("bus ids must be unique and contiguous from 0")

    slacks = [b for b in net.buses if b.kind == BusKind.SLACK]
    if len(slacks) != 1:
        out.append(f"expected exactly one slack bus, found {len(slacks)}")

    for b in net.buses:
        if not (0.0 < b.v_min < b.v_max):
            out.append(f"bus {b.name}: voltage bounds must satisfy 0 < v_min < v_max")

    for i, br in enumerate(net.branches):
        if br.x == 0.0:
            out.append(f"branch {i}: reactance must be non-zero")
        if br.rating_mva <= 0.0:
            out.append(f"branch {i}: rating_mva must be positive")
        if br.from_bus == br.to_bus:
            out.append(f"branch {i}: from_bus equals to_bus")
        if br.tap <= 0.0:
            out.append(f"branch {i}: tap must be positive")
        for ref in (br.from_bus, br.to_bus):
            if ref not in known:
                out.append(f"branch {i}: unknown bus {ref}")

    kinds = {b.id: b.kind for b in net.buses}
    for k, g in enumerate(net.generators):
        tag = f"generator G{k + 1}"
        if g.bus not in known:
            out.append(f"{tag}: unknown bus {g.bus}")
            continue
        if kinds[g.bus] == BusKind.PQ:
            out.append(f"{tag}: located at PQ bus {g.bus}")
        if not (g.p_min_mw <= g.p0_mw <= g.p_max_mw):
            out.append(f"{tag}: p0 outside [p_min, p_max]")
        if not (g.q_min_mvar < g.q_max_mvar):
            out.append(f"{tag}: q_min must be below q_max")
        if g.s_max_mva <= 0.0:
            out.append(f"{tag}: s_max_mva must be positive")
        if g.x_d_pu is not None and g.x_d_pu <= 0.0:
            out.append(f"{tag}: x_d_pu must be positive")
    for b in net.buses:
        if b.kind == BusKind.PV and not any(g.bus == b.id for g in net.generators):
            out.append(f"bus {b.name}: PV bus without generator")

    for i, ld in enumerate(net.loads):
        if ld.bus not in known:
            out.append(f"load {i}: unknown bus {ld.bus}")
        if ld.p_mw < 0.0:
            out.append(f"load {i}: p_mw must be non-negative")
    for i, w in enumerate(net.wind_parks):
        if w.bus not in known:
            out.append(f"wind park W{i + 1}: unknown bus {w.bus}")
        if w.p_max_mw < 0.0:
            out.append(f"wind park W{i + 1}: p_max_mw must be non-negative")
    for i, s in enumerate(net.shunts):
        if s.bus not in known:
            out.append(f"shunt {i}: unknown bus {s.bus}")
        if not (s.q_min_mvar <= s.q_set_mvar <= s.q_max_mvar):
            out.append(f"shunt {i}: q_set outside [q_min, q_max]")

    bus_area = {b.id: b.area for b in net.buses}
    for a in net.areas:
        members = [m for m in a.buses if m in known]
        for m in members:
            if bus_area[m] != a.id:
                out.append(f"area {a.id}: bus {m} declares area {bus_area[m]}")
        pilots = [m for m in members if net.buses[m].is_pilot]
        if len(pilots) > 1:
            out.append(f"multiple pilots in area {a.id}")
        elif not pilots or a.pilot_bus not in pilots:
            out.append(f"area {a.id}: pilot bus {a.pilot_bus} is not the flagged pilot of the area")

        participants = [g for g in net.generators if g.bus in set(members) and g.in_svr]
        if participants:
            total = sum(g.alpha for g in participants)
            if abs(total - 1.0) > ALPHA_SUM_TOL:
                out.append(f"area {a.id}: alpha sum {total:g} ≠ 1")
    declared = {a.id for a in net.areas}
    for b in net.buses:
        if b.is_pilot and b.area not in declared:
            out.append(f"bus {b.name}: pilot of undeclared area {b.area}")

    refs_ok = not any(m.startswith("branch") and "unknown" in m for m in out)
    if len(slacks) == 1 and refs_ok and sorted(ids) == list(range(len(ids))):
        for bus_id in _unreachable_buses(net):
            out.append(f"bus {bus_id} unreachable from slack")

    return out


# ---------------------------------------------------------------------------
# Admittance
# ---------------------------------------------------------------------------

def build_admittance(net: Network) -> AdmittanceMatrix:
    """Bus admittance matrix from pi-model branches, tap on the from side."""
    n = net.n_bus
    nl = len(net.branches)
    f = np.array([br.from_bus for br in net.branches], dtype=np.int64)
    t = np.array([br.to_bus for br in net.branches], dtype=np.int64)
    r = np.array([br.r for br in net.branches], dtype=float)
    x = np.array([br.x for br in net.branches], dtype=float)
    b = np.array([br.b_shunt for br in net.branches], dtype=float)
    tap = np.array([br.tap for br in net.branches], dtype=float)

    ys = 1.0 / (r + 1j * x)
    ytt = ys + 0.5j * b
    yff = ytt / (tap * tap)
    yft = -ys / tap
    ytf = -ys / tap

    rows = np.arange(nl)
    cf = sp.csr_matrix((np.ones(nl), (rows, f)), shape=(nl, n))
    ct = sp.csr_matrix((np.ones(nl), (rows, t)), shape=(nl, n))
    yf = sp.csr_matrix((np.r_[yff, yft], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
    yt = sp.csr_matrix((np.r_[ytf, ytt], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
    ybus = (cf.T @ yf + ct.T @ yt).tocsr()
    ybus.sum_duplicates()
    ybus.sort_indices()

    # pi-equivalent shunt legs: what is left at each end once the series part is removed
    shunt = np.zeros(n, dtype=complex)
    np.add.at(shunt, f, yff + yft)
    np.add.at(shunt, t, ytt + ytf)

    return AdmittanceMatrix(dimension=n, ybus=ybus, yf=yf.tocsr(), yt=yt.tocsr(), shunt=shunt)
