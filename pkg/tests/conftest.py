import pytest

from gridflow.case_io import Branch, Bus, BusKind, CostCurve, Generator, Network, load_case


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case39():
    return load_case("case39")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def fixture3():
    return load_case("case3_fixture")


def case_text(bus, gen, branch, gencost=None, base=100.0):
    """MATPOWER text from row lists (raw MW / degree units)."""

    def block(name, rows):
        body = "\n".join("\t" + "\t".join(str(x) for x in r) + ";" for r in rows)
        return f"mpc.{name} = [\n{body}\n];\n"

    out = "function mpc = tiny\nmpc.version = '2';\n" f"mpc.baseMVA = {base};\n"
    out += block("bus", bus) + block("gen", gen) + block("branch", branch)
    if gencost is not None:
        out += block("gencost", gencost)
    return out


def bus_row(i, kind, pd=0, qd=0, gs=0, bs=0, vm=1.0, va=0.0, vmax=1.06, vmin=0.94):
    return [i, kind, pd, qd, gs, bs, 1, vm, va, 135, 1, vmax, vmin]


def gen_row(bus, pg=0, qg=0, qmax=100, qmin=-100, vg=1.0, status=1, pmax=200, pmin=0):
    return [bus, pg, qg, qmax, qmin, vg, 100, status, pmax, pmin]


def branch_row(f, t, r=0.01, x=0.1, b=0.0, ratio=0, angle=0, status=1):
    return [f, t, r, x, b, 250, 250, 250, ratio, angle, status, -360, 360]


def two_bus(x=0.1, r=0.0, pd=0.0, qd=0.0):
    from gridflow.case_io import parse_matpower

    text = case_text(
        [bus_row(1, 3), bus_row(2, 1, pd=pd, qd=qd)],
        [gen_row(1)],
        [branch_row(1, 2, r=r, x=x)],
        [[2, 0, 0, 3, 0.01, 10, 0]],
    )
    return parse_matpower(text, "two_bus")


def random_network(rng, n=5, shunts=True, taps=True, lossless=False):
    kinds = [BusKind.SLACK] + [BusKind.PV if k % 2 else BusKind.PQ for k in range(1, n)]
    if BusKind.PQ not in kinds:
        kinds[-1] = BusKind.PQ
    buses = tuple(
        Bus(i, kinds[i], rng.uniform(0, 0.5), rng.uniform(-0.1, 0.2),
            rng.uniform(0, 0.02) if shunts and not lossless else 0.0,
            rng.uniform(-0.05, 0.05) if shunts else 0.0,
            0.94, 1.06, 1.0, 0.0)
        for i in range(n)
    )
    gens = tuple(Generator(i, 0.0, 3.0, -2.0, 2.0) for i in range(n) if kinds[i] is not BusKind.PQ)
    edges = [(i, int(rng.integers(0, i))) for i in range(1, n)]
    edges += [(int(a), int(b)) for a, b in rng.integers(0, n, size=(2, 2)) if a != b]
    branches = tuple(
        Branch(a, b, 0.0 if lossless else rng.uniform(0.005, 0.05), rng.uniform(0.05, 0.3),
               0.0 if lossless else rng.uniform(0, 0.05),
               rng.uniform(0.95, 1.05) if taps else 1.0,
               rng.uniform(-0.1, 0.1) if taps else 0.0)
        for a, b in edges
    )
    costs = tuple(CostCurve(k, rng.uniform(0, 50), rng.uniform(500, 3000), 0.0) for k in range(len(gens)))
    return Network(100.0, buses, gens, branches, costs, name=f"random{n}")


def random_state(rng, network, spread=0.1):
    from gridflow.pf_core import SystemState

    v = rng.uniform(0.9, 1.1, network.n)
    th = rng.normal(0, spread, network.n)
    return SystemState(v, th)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
