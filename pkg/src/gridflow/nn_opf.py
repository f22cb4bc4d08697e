"""The load-to-solution MLP, the bounded voltage decoder and checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .case_io import Network
from .pf_core import Dispatch, SystemState

CHECKPOINT_MAGIC = b"GRIDFLOW"
CHECKPOINT_VERSION = 1

INIT_DISPATCH_HIGH = 1.5  # p.u., cheapest generator
INIT_DISPATCH_LOW = 0.3  # p.u., most expensive generator
OUTPUT_WEIGHT_SCALE = 1e-2


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden_dim: int
    n_layers: int  # weight layers: input + hidden-to-hidden + output

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        h = self.hidden_dim
        return (
            [(self.input_dim, h)]
            + [(h, h)] * (self.n_layers - 2)
            + [(h, self.output_dim)]
        )

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # (fan_in, fan_out) each
    biases: list[np.ndarray]

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        n = sum(1 for k in d if k.startswith("W"))
        return cls([d[f"W{k}"] for k in range(n)], [d[f"b{k}"] for k in range(n)])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def output_dim(network: Network) -> int:
    return 2 * (len(network.pv_set) + len(network.pq_set)) + network.n_gen


def auto_config(network: Network) -> MlpConfig:
    """Size the MLP from the system: 256 x 5 layers up to 20 buses, 512 x 7 above."""
    hidden, layers = (256, 5) if network.n <= 20 else (512, 7)
    return MlpConfig(network.input_dim, output_dim(network), hidden, layers)


def forward(params, scenario):
    """Tanh MLP with a linear output layer.

    ``params`` is an :class:`MlpParams` or the ``W{k}``/``b{k}`` mapping (possibly
    of autodiff variables); ``scenario`` is ``(d,)`` or ``(batch, d)``.
    """
    p = params.as_dict() if isinstance(params, MlpParams) else params
    n = sum(1 for k in p if k.startswith("W"))
    h = scenario
    for k in range(n):
        h = ad.add(ad.matvec(h, p[f"W{k}"]), p[f"b{k}"])
        if k < n - 1:
            h = ad.tanh(h)
    return h


class _DecodeLayout:
    """Index bookkeeping for decode, cached per network."""

    def __init__(self, network: Network):
        nonslack = list(network.pv_set) + list(network.pq_set)
        m = len(nonslack)
        self.n_state = 2 * m
        self.v_idx = np.arange(0, 2 * m, 2)
        self.th_idx = np.arange(1, 2 * m, 2)
        vmin = network.array("v_min")[nonslack]
        vmax = network.array("v_max")[nonslack]
        self.v_lo = vmin
        self.v_hi = vmax
        # scatter from non-slack order onto all n buses
        self.place = np.zeros((m, network.n))
        self.place[np.arange(m), nonslack] = 1.0
        slack = network.buses[network.slack]
        self.v_slack = np.zeros(network.n)
        self.v_slack[network.slack] = slack.v_init
        self.th_slack = np.zeros(network.n)
        self.th_slack[network.slack] = slack.theta_init


_layouts: dict[int, tuple[Network, _DecodeLayout]] = {}


def _layout(network: Network) -> _DecodeLayout:
    hit = _layouts.get(id(network))
    if hit is None or hit[0] is not network:
        hit = (network, _DecodeLayout(network))
        _layouts[id(network)] = hit
    return hit[1]


def decode_voltage(v_raw, v_min, v_max):
    """Map any real ``v_raw`` into ``[v_min, v_max]`` through ``tanh``."""
    return ad.add(v_min, ad.mul(v_max - v_min, ad.mul(0.5, ad.add(ad.tanh(v_raw), 1.0))))


def decode(raw, network: Network) -> tuple[SystemState, Dispatch]:
    """Split raw outputs into a bounded :class:`SystemState` and a :class:`Dispatch`.

    Layout: (V, theta) pairs for PV buses, then for PQ buses, then one entry per
    generator.  Slack voltage and angle come from the network, not the network output.
    """
    lay = _layout(network)
    width = np.shape(ad.value(raw))[-1]
    if width != lay.n_state + network.n_gen:
        raise ValueError(f"raw output has {width} entries, expected {lay.n_state + network.n_gen}")
    v_raw = ad.take(raw, (Ellipsis, lay.v_idx))
    th_raw = ad.take(raw, (Ellipsis, lay.th_idx))
    p_g = ad.take(raw, (Ellipsis, slice(lay.n_state, None)))
    v_ns = decode_voltage(v_raw, lay.v_lo, lay.v_hi)
    v = ad.add(ad.matvec(v_ns, lay.place), lay.v_slack)
    th = ad.add(ad.matvec(th_raw, lay.place), lay.th_slack)
    return SystemState(v=v, theta=th), Dispatch(p_g=p_g)


def init_dispatch_bias(network: Network) -> np.ndarray:
    """Initial generator outputs: 1.5 p.u. for the cheapest down to 0.3 p.u. for the dearest.

    Generators are ranked by linear cost ``b``, ties broken by ``a`` then index;
    outputs interpolate linearly in rank.
    """
    ng = network.n_gen
    if not network.costs:
        return np.full(ng, 0.5 * (INIT_DISPATCH_HIGH + INIT_DISPATCH_LOW))
    cost = {c.gen: c for c in network.costs}
    order = sorted(range(ng), key=lambda k: (cost[k].b, cost[k].a, k))
    out = np.empty(ng)
    for rank, k in enumerate(order):
        frac = rank / (ng - 1) if ng > 1 else 0.0
        out[k] = INIT_DISPATCH_HIGH + frac * (INIT_DISPATCH_LOW - INIT_DISPATCH_HIGH)
    return out


def init_params(config: MlpConfig, network: Network, rng_seed: int = 0) -> MlpParams:
    """Uniform fan-in initialisation with physics-informed output biases.

    Voltage and angle biases are 0 (bound midpoint and zero angle after decoding);
    dispatch biases follow :func:`init_dispatch_bias`.  Output weights are scaled
    by 1e-2 so the biases dominate the initial prediction.
    """
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    sizes = config.layer_sizes
    for k, (fan_in, fan_out) in enumerate(sizes):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        if k == len(sizes) - 1:
            w *= OUTPUT_WEIGHT_SCALE
            b = np.zeros(fan_out)
            b[fan_out - network.n_gen :] = init_dispatch_bias(network)
        weights.append(w)
        biases.append(b)
    return MlpParams(weights, biases)


# ----------------------------------------------------------------------------
# checkpoint container
#
#   8 bytes   magic b"GRIDFLOW"
#   uint32    format version (little endian)
#   uint64    header length in bytes
#   header    UTF-8 JSON: version, case, mlp_config, epoch, multipliers,
#             rng_state, state, arrays=[{name, shape}, ...]
#   payload   each listed array as row-major little-endian float64, in order;
#             the MLP layers come first as W0, b0, W1, b1, ...


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path,
    config: MlpConfig,
    params: MlpParams,
    *,
    case: str,
    epoch: int,
    multipliers: dict,
    rng_state: dict,
    state: dict | None = None,
    arrays: dict[str, np.ndarray] | None = None,
) -> None:
    named = list(params.as_dict().items()) + list((arrays or {}).items())
    header = {
        "version": CHECKPOINT_VERSION,
        "case": case,
        "mlp_config": asdict(config),
        "epoch": epoch,
        "multipliers": multipliers,
        "rng_state": rng_state,
        "state": state or {},
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in named],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in named:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, MlpConfig, MlpParams, dict[str, np.ndarray]]:
    """Return ``(header, config, params, extra_arrays)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a gridflow checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[off : off + hlen])
    off += hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    config = MlpConfig(**header["mlp_config"])
    n = config.n_layers
    params = MlpParams([arrays.pop(f"W{k}") for k in range(n)], [arrays.pop(f"b{k}") for k in range(n)])
    return header, config, params, arrays
