"""MATPOWER case parsing, the per-unit network model and the bus admittance matrix."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, fields
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

KNOWN_FIELDS = ("version", "baseMVA", "bus", "gen", "branch", "gencost")
# standard extras in distributed case files; skipped without a warning
OPTIONAL_FIELDS = ("bus_name", "gentype", "genfuel", "areas", "bus_geo")
BUNDLED_CASES = ("case14", "case39", "case118", "case3_fixture")


class CaseFormatError(ValueError):
    """Raised for malformed or unsupported case data."""


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


_MATPOWER_BUS_TYPE = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


@dataclass(frozen=True)
class Bus:
    index: int
    kind: BusKind
    p_load: float
    q_load: float
    g_shunt: float
    b_shunt: float
    v_min: float
    v_max: float
    v_init: float
    theta_init: float


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    in_service: bool = True
    # stored operating point from the case file (p.u.)
    p_init: float = 0.0
    q_init: float = 0.0
    v_set: float = 1.0


@dataclass(frozen=True)
class CostCurve:
    """Quadratic cost ``a P^2 + b P + c`` in $/h with ``P`` in p.u."""

    gen: int
    a: float
    b: float
    c: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float
    tap: float = 1.0
    shift: float = 0.0
    in_service: bool = True


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Sparse complex nodal admittance ``Y = G + jB`` (CSR storage)."""

    n: int
    matrix: sp.csr_matrix

    def rows(self):
        """Yield, for each bus, a list of ``(column, G_ij, B_ij)`` entries."""
        m = self.matrix
        for i in range(self.n):
            lo, hi = m.indptr[i], m.indptr[i + 1]
            yield [
                (int(j), float(y.real), float(y.imag))
                for j, y in zip(m.indices[lo:hi], m.data[lo:hi])
            ]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @cached_property
    def G(self) -> np.ndarray:
        return np.ascontiguousarray(self.dense().real)

    @cached_property
    def B(self) -> np.ndarray:
        return np.ascontiguousarray(self.dense().imag)


@dataclass(frozen=True, eq=False)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    costs: tuple[CostCurve, ...]
    name: str = "case"

    def __post_init__(self):
        _validate(self)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return all(
            getattr(self, f.name) == getattr(other, f.name) for f in fields(self)
        )

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def slack(self) -> int:
        return next(b.index for b in self.buses if b.kind is BusKind.SLACK)

    @cached_property
    def pv_set(self) -> tuple[int, ...]:
        return tuple(b.index for b in self.buses if b.kind is BusKind.PV)

    @cached_property
    def pq_set(self) -> tuple[int, ...]:
        return tuple(b.index for b in self.buses if b.kind is BusKind.PQ)

    @cached_property
    def gens_at_bus(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {}
        for k, g in enumerate(self.generators):
            if g.in_service:
                out.setdefault(g.bus, []).append(k)
        return {b: tuple(v) for b, v in out.items()}

    @cached_property
    def ybus(self) -> AdmittanceMatrix:
        return build_ybus(self)

    @property
    def input_dim(self) -> int:
        return 2 * len(self.pq_set) + len(self.pv_set)

    @cached_property
    def base_load(self) -> np.ndarray:
        """Base loads in scenario order: (P_d, Q_d) per PQ bus, then P_d per PV bus."""
        vals = []
        for i in self.pq_set:
            vals += [self.buses[i].p_load, self.buses[i].q_load]
        vals += [self.buses[i].p_load for i in self.pv_set]
        return np.array(vals, dtype=float)

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        """(n_gen, n) 0/1 matrix mapping generator outputs onto their buses."""
        m = np.zeros((self.n_gen, self.n))
        for k, g in enumerate(self.generators):
            if g.in_service:
                m[k, g.bus] = 1.0
        return m

    def array(self, attr: str, of: str = "buses") -> np.ndarray:
        return np.array([getattr(o, attr) for o in getattr(self, of)], dtype=float)


def _validate(net: Network) -> None:
    n = len(net.buses)
    if any(b.index != i for i, b in enumerate(net.buses)):
        raise CaseFormatError("bus indices must be 0..n-1 in order")
    slacks = [b.index for b in net.buses if b.kind is BusKind.SLACK]
    if len(slacks) != 1:
        raise CaseFormatError(f"expected exactly one slack bus, found {len(slacks)}")
    for b in net.buses:
        if not (0 < b.v_min < b.v_max):
            raise CaseFormatError(f"bus {b.index}: need 0 < v_min < v_max")
    for k, g in enumerate(net.generators):
        if not 0 <= g.bus < n:
            raise CaseFormatError(f"generator {k}: bus {g.bus} does not exist")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseFormatError(f"generator {k}: inverted limits")
    for k, br in enumerate(net.branches):
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise CaseFormatError(f"branch {k}: unknown bus")
    for c in net.costs:
        if c.a < 0:
            raise CaseFormatError(f"cost curve of generator {c.gen} is concave")


# ----------------------------------------------------------------------------
# MATPOWER text parsing

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")


def _strip_comment(line: str) -> str:
    # '%' starts a comment outside quoted strings; case data never quotes '%'
    quoted = False
    for i, ch in enumerate(line):
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            return line[:i]
    return line


def _read_fields(text: str) -> dict[str, tuple[int, object]]:
    """Return ``name -> (line_number, value)`` for the mpc assignments in ``text``.

    Matrix values are lists of ``(line_number, row)``; scalars are floats.
    Unknown fields are skipped; only those outside the standard optional set warn.
    """
    lines = text.splitlines()
    out: dict[str, tuple[int, object]] = {}
    i = 0
    while i < len(lines):
        line = _strip_comment(lines[i])
        m = _ASSIGN.search(line)
        if not m:
            i += 1
            continue
        name, rest, start = m.group(1), line[m.end():].strip(), i + 1
        if name not in KNOWN_FIELDS:
            log = logger.debug if name in OPTIONAL_FIELDS else logger.warning
            log("ignoring unsupported case field mpc.%s (line %d)", name, start)
            # skip a bracketed block if one opens here
            opener = rest[:1]
            closer = {"[": "]", "{": "}"}.get(opener)
            if closer:
                while closer not in _strip_comment(lines[i]):
                    i += 1
            i += 1
            continue
        if rest.startswith("["):
            rows: list[tuple[int, list[float]]] = []
            body = rest[1:]
            lineno = i + 1
            while True:
                done = "]" in body
                if done:
                    body = body[: body.index("]")]
                for chunk in body.split(";"):
                    chunk = chunk.strip().strip(",")
                    if not chunk:
                        continue
                    try:
                        rows.append((lineno, [float(t) for t in re.split(r"[\s,]+", chunk)]))
                    except ValueError:
                        raise CaseFormatError(
                            f"line {lineno}: malformed row in mpc.{name}: {chunk!r}"
                        ) from None
                if done:
                    break
                i += 1
                if i >= len(lines):
                    raise CaseFormatError(f"line {start}: unterminated matrix mpc.{name}")
                lineno = i + 1
                body = _strip_comment(lines[i])
            out[name] = (start, rows)
        else:
            value = rest.rstrip(";").strip().strip("'")
            if name == "baseMVA":
                try:
                    out[name] = (start, float(value))
                except ValueError:
                    raise CaseFormatError(f"line {start}: bad baseMVA {value!r}") from None
            else:
                out[name] = (start, value)
        i += 1
    return out


def _check_width(name: str, rows, width: int) -> None:
    for lineno, row in rows:
        if len(row) < width:
            raise CaseFormatError(
                f"line {lineno}: mpc.{name} row has {len(row)} columns, need {width}"
            )


def parse_matpower(text: str, name: str = "case") -> Network:
    """Parse MATPOWER ``mpc`` case text into a per-unit :class:`Network`.

    MW/MVAr quantities are divided by ``baseMVA``, angles are converted to
    radians and cost coefficients are rescaled to take p.u. power.
    """
    data = _read_fields(text)
    for req in ("baseMVA", "bus", "gen", "branch"):
        if req not in data:
            raise CaseFormatError(f"case text has no mpc.{req}")
    base = data["baseMVA"][1]
    bus_rows, gen_rows, br_rows = data["bus"][1], data["gen"][1], data["branch"][1]
    _check_width("bus", bus_rows, 13)
    _check_width("gen", gen_rows, 10)
    _check_width("branch", br_rows, 11)

    ids: dict[int, int] = {}
    for k, (lineno, row) in enumerate(bus_rows):
        bid = int(row[0])
        if bid in ids:
            raise CaseFormatError(f"line {lineno}: duplicate bus id {bid}")
        ids[bid] = k

    def bus_index(lineno: int, bid: float) -> int:
        try:
            return ids[int(bid)]
        except KeyError:
            raise CaseFormatError(f"line {lineno}: reference to unknown bus {int(bid)}") from None

    # in-service generators only; keep the row positions to align gencost
    gens: list[Generator] = []
    kept_rows: list[int] = []
    for k, (lineno, row) in enumerate(gen_rows):
        if row[7] <= 0:
            continue
        b = bus_index(lineno, row[0])
        gens.append(
            Generator(
                bus=b,
                p_min=row[9] / base,
                p_max=row[8] / base,
                q_min=row[4] / base,
                q_max=row[3] / base,
                in_service=True,
                p_init=row[1] / base,
                q_init=row[2] / base,
                v_set=row[5],
            )
        )
        kept_rows.append(k)
    has_gen = {g.bus for g in gens}

    buses: list[Bus] = []
    for k, (lineno, row) in enumerate(bus_rows):
        btype = int(row[1])
        if btype not in _MATPOWER_BUS_TYPE:
            raise CaseFormatError(f"line {lineno}: unsupported bus type {btype}")
        kind = _MATPOWER_BUS_TYPE[btype]
        if kind is BusKind.PV and k not in has_gen:
            logger.warning("bus %d is PV-typed without a generator; treating as PQ", int(row[0]))
            kind = BusKind.PQ
        buses.append(
            Bus(
                index=k,
                kind=kind,
                p_load=row[2] / base,
                q_load=row[3] / base,
                g_shunt=row[4] / base,
                b_shunt=row[5] / base,
                v_min=row[12],
                v_max=row[11],
                v_init=row[7],
                theta_init=np.deg2rad(row[8]),
            )
        )
    if not any(b.kind is BusKind.SLACK for b in buses):
        raise CaseFormatError("case has no slack (type 3) bus")

    branches = []
    for lineno, row in br_rows:
        tap = row[8] if row[8] != 0 else 1.0
        branches.append(
            Branch(
                from_bus=bus_index(lineno, row[0]),
                to_bus=bus_index(lineno, row[1]),
                r=row[2],
                x=row[3],
                b_charge=row[4],
                tap=tap,
                shift=np.deg2rad(row[9]),
                in_service=row[10] > 0,
            )
        )

    costs: list[CostCurve] = []
    if "gencost" in data:
        cost_rows = data["gencost"][1]
        if len(cost_rows) < len(gen_rows):
            raise CaseFormatError("mpc.gencost has fewer rows than mpc.gen")
        for new_k, old_k in enumerate(kept_rows):
            lineno, row = cost_rows[old_k]
            costs.append(_cost_curve(lineno, row, new_k, base))

    return Network(
        base_mva=base,
        buses=tuple(buses),
        generators=tuple(gens),
        branches=tuple(branches),
        costs=tuple(costs),
        name=name,
    )


def _cost_curve(lineno: int, row: list[float], gen: int, base: float) -> CostCurve:
    model = int(row[0])
    if model != 2:
        raise CaseFormatError(f"line {lineno}: only polynomial gencost (model 2) is supported")
    ncoef = int(row[3])
    coef = row[4 : 4 + ncoef]
    if len(coef) != ncoef:
        raise CaseFormatError(f"line {lineno}: gencost row is missing coefficients")
    if ncoef > 3:
        raise CaseFormatError(f"line {lineno}: gencost polynomial degree {ncoef - 1} > 2")
    a, b, c = ([0.0] * (3 - ncoef) + list(coef)) if ncoef else (0.0, 0.0, 0.0)
    return CostCurve(gen=gen, a=a * base**2, b=b * base, c=c)


# ----------------------------------------------------------------------------
# admittance matrix


def build_ybus(network: Network) -> AdmittanceMatrix:
    """Assemble ``Y`` from the branch pi-models and bus shunts (MATPOWER conventions)."""
    n = network.n
    rows, cols, vals = [], [], []
    for k, br in enumerate(network.branches):
        if not br.in_service:
            continue
        z = complex(br.r, br.x)
        if z == 0:
            raise CaseFormatError(f"branch {k} ({br.from_bus}->{br.to_bus}) has zero impedance")
        ys = 1.0 / z
        tap = br.tap * np.exp(1j * br.shift)
        ytt = ys + 0.5j * br.b_charge
        yff = ytt / (tap * np.conj(tap))
        yft = -ys / np.conj(tap)
        ytf = -ys / tap
        f, t = br.from_bus, br.to_bus
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    for b in network.buses:
        if b.g_shunt or b.b_shunt:
            rows.append(b.index)
            cols.append(b.index)
            vals.append(complex(b.g_shunt, b.b_shunt))
    y = sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))
    y.sum_duplicates()
    y.sort_indices()
    return AdmittanceMatrix(n=n, matrix=y)


# ----------------------------------------------------------------------------
# canonical JSON


def _obj_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = v.value if isinstance(v, enum.Enum) else v
    return out


def network_to_dict(network: Network) -> dict:
    return {
        "name": network.name,
        "base_mva": network.base_mva,
        "buses": [_obj_dict(b) for b in network.buses],
        "generators": [_obj_dict(g) for g in network.generators],
        "branches": [_obj_dict(br) for br in network.branches],
        "costs": [_obj_dict(c) for c in network.costs],
    }


def network_from_dict(d: dict) -> Network:
    try:
        buses = []
        for b in d["buses"]:
            b = dict(b)
            b["kind"] = BusKind(b["kind"])
            buses.append(Bus(**b))
        return Network(
            base_mva=float(d["base_mva"]),
            buses=tuple(buses),
            generators=tuple(Generator(**g) for g in d["generators"]),
            branches=tuple(Branch(**br) for br in d["branches"]),
            costs=tuple(CostCurve(**c) for c in d.get("costs", [])),
            name=d.get("name", "case"),
        )
    except (KeyError, TypeError) as exc:
        raise CaseFormatError(f"bad network JSON: {exc}") from None


def network_to_json(network: Network, indent: int | None = 1) -> str:
    return json.dumps(network_to_dict(network), indent=indent)


def network_from_json(text: str) -> Network:
    return network_from_dict(json.loads(text))


# ----------------------------------------------------------------------------


def bundled_case_text(name: str) -> str:
    return resources.files("gridflow.data").joinpath(f"{name}.m").read_text()


def load_case(source: str | Path) -> Network:
    """Load a network from a bundled case name, a ``.m`` file or a canonical JSON file."""
    source = str(source)
    if source in BUNDLED_CASES:
        return parse_matpower(bundled_case_text(source), name=source)
    path = Path(source)
    text = path.read_text()
    if path.suffix == ".json":
        return network_from_json(text)
    return parse_matpower(text, name=path.stem)
