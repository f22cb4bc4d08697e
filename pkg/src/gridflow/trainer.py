"""Label-free training loop: sampling, AdamW, dual ascent, lr schedule, warm restarts."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import energy_landscape as el
from . import nn_opf
from .case_io import Network
from .sampler import ScenarioSampler, StageSchedule

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    batch_size: int = 64
    lr_init: float = 5e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 300
    restart_window: int = 1000
    restart_threshold: float = 1e-3  # relative improvement that resets stagnation
    restart_lr_factor: float = 2.0
    restart_lr_cap: float = 5e-3
    restart_min_interval: int = 2000
    restart_forget: float = 0.5
    converge_window: int = 1000
    converge_tol: float = 1e-6
    energy_tol: float = 1e-6
    late_epoch_threshold: int = 15000
    delta: float = 0.1
    squared_economic: bool = False
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("squared_economic", "seed"):
                continue
            if not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.restart_lr_cap < self.lr_init:
            raise ValueError("restart_lr_cap must be >= lr_init")

    @classmethod
    def paper(cls, network: Network, **overrides) -> "TrainConfig":
        """Full-length schedule: 40000 epochs up to 20 buses, 60000 above."""
        epochs = 40000 if network.n <= 20 else 60000
        return replace(cls(epochs=epochs, late_epoch_threshold=15000), **overrides)

    @classmethod
    def desk(cls, network: Network, epochs: int = 5000, **overrides) -> "TrainConfig":
        """Short schedule; the late-training multiplier boost starts at 37.5% of the run."""
        late = max(1, int(round(0.375 * epochs)))
        return replace(cls(epochs=epochs, late_epoch_threshold=late), **overrides)

    def multipliers(self) -> el.MultiplierState:
        return el.MultiplierState(late_epoch_threshold=self.late_epoch_threshold)


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    total_loss: float
    economic: float
    physics: float
    constraint: float
    lambda_f: float
    lambda_p: float
    lambda_q: float
    mu_p: float
    mu_q: float
    residual_norm_metric: float
    best_loss: float
    restart_flag: int


RECORD_FIELDS = [f.name for f in fields(TrainRecord)]


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Decoupled-weight-decay Adam.  Returns ``(params, state, accepted)``.

    A non-finite gradient rejects the step and leaves params and state untouched.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        return params, state, False
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * (g * g)
        p = p * (1.0 - lr * weight_decay)
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v), True


# ----------------------------------------------------------------------------
# learning rate and restarts


@dataclass
class LrState:
    scale: float = 1.0  # plateau halvings and restart boosts, applied on top of cosine
    plateau_best: float = math.inf
    plateau_bad: int = 0
    best_loss: float = math.inf
    stagnant: int = 0
    last_restart: int | None = None


def cosine_lr(config: TrainConfig, epoch: int) -> float:
    t = min(epoch, config.epochs)
    return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + math.cos(math.pi * t / config.epochs))


def lr_schedule(config: TrainConfig, epoch: int, lr_state: LrState) -> float:
    return lr_state.scale * cosine_lr(config, epoch)


def plateau_step(config: TrainConfig, lr_state: LrState, loss: float) -> LrState:
    """ReduceLROnPlateau: halve the scale after ``patience`` epochs without a new best."""
    if loss < lr_state.plateau_best:
        return replace(lr_state, plateau_best=loss, plateau_bad=0)
    bad = lr_state.plateau_bad + 1
    if bad >= config.plateau_patience:
        return replace(lr_state, scale=lr_state.scale * config.plateau_factor, plateau_bad=0)
    return replace(lr_state, plateau_bad=bad)


def detect_stagnation_and_restart(loss: float, epoch: int, mult: el.MultiplierState,
                                  lr_state: LrState, config: TrainConfig):
    """Track best loss and fire a warm restart after ``restart_window`` stagnant epochs.

    An epoch counts as an improvement only if ``loss < best * (1 - threshold)``.
    A restart needs ``restart_min_interval`` epochs since the previous one; it
    multiplies the lr by ``restart_lr_factor`` (capped at ``restart_lr_cap``),
    scales lambda_F, lambda_P, lambda_Q by ``restart_forget`` and resets the counter.
    Returns ``(restarted, mult, lr_state)``.
    """
    improved = loss < lr_state.best_loss * (1.0 - config.restart_threshold)
    stagnant = 0 if improved else lr_state.stagnant + 1
    lr_state = replace(lr_state, best_loss=min(lr_state.best_loss, loss), stagnant=stagnant)
    spaced = lr_state.last_restart is None or epoch - lr_state.last_restart >= config.restart_min_interval
    if stagnant < config.restart_window or not spaced:
        return False, mult, lr_state
    next_cos = cosine_lr(config, epoch + 1)
    current = lr_state.scale * next_cos
    boosted = min(current * config.restart_lr_factor, config.restart_lr_cap)
    lr_state = replace(lr_state, scale=boosted / next_cos, stagnant=0, last_restart=epoch)
    f = config.restart_forget
    mult = replace(mult, lambda_f=mult.lambda_f * f, lambda_p=mult.lambda_p * f, lambda_q=mult.lambda_q * f)
    return True, mult, lr_state


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: nn_opf.MlpParams
    config: nn_opf.MlpConfig
    multipliers: el.MultiplierState
    records: list[TrainRecord]
    checkpoint: Path | None
    stop_reason: str


class Trainer:
    """Owns every piece of mutable training state so a run can be checkpointed and resumed."""

    def __init__(self, network: Network, config: TrainConfig, mlp_config: nn_opf.MlpConfig | None = None):
        if len(network.costs) != network.n_gen:
            raise TrainingError("training needs a cost curve for every generator")
        self.network = network
        self.config = config
        self.mlp_config = mlp_config or nn_opf.auto_config(network)
        self.params = nn_opf.init_params(self.mlp_config, network, config.seed).as_dict()
        self.opt = AdamState()
        self.mult = config.multipliers()
        self.lr_state = LrState()
        self.rng = np.random.default_rng(config.seed)
        self.sampler = ScenarioSampler(network.input_dim, StageSchedule(config.epochs), config.delta)
        self.epoch = 0  # next epoch to run
        self.prev_loss: float | None = None
        self.flat_count = 0
        self.records: list[TrainRecord] = []
        self.stop_reason = ""

    # -- one epoch ------------------------------------------------------------

    def _loss_program(self, u):
        net, mult, sq = self.network, self.mult, self.config.squared_economic
        holder = {}

        def program(**p):
            dec = nn_opf.decode(nn_opf.forward(p, u), net)
            lb = el.total_loss(dec, u, net, mult, squared_economic=sq)
            holder["lb"] = lb
            return lb.total

        return program, holder

    def step(self) -> TrainRecord:
        cfg, epoch = self.config, self.epoch
        u = self.sampler.batch(epoch, cfg.batch_size, self.rng)
        lr = lr_schedule(cfg, epoch, self.lr_state)
        program, holder = self._loss_program(u)
        loss, tape = ad.forward_record(program, self.params)
        lb = holder["lb"]
        if not np.isfinite(loss):
            self._dump_failure(u, lb)
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        grads = ad.backward(tape)
        self.params, self.opt, ok = adamw_step(
            self.params, grads, self.opt, lr, cfg.weight_decay,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
        )
        if not ok:
            logger.warning("epoch %d: non-finite gradient, step rejected", epoch)
        self.mult = el.update_multipliers(self.mult, lb.physics, lb.h_p, lb.h_q, epoch, cfg.epochs)
        per = lb.per_scenario
        self.sampler.record(u, per["residual_norm"], per["cost"], per["loss"], epoch)
        self.lr_state = plateau_step(cfg, self.lr_state, loss)
        restarted, self.mult, self.lr_state = detect_stagnation_and_restart(
            loss, epoch, self.mult, self.lr_state, cfg)
        if restarted:
            logger.info("epoch %d: warm restart, lr scale %.4g, lambda_F %.4f",
                        epoch, self.lr_state.scale, self.mult.lambda_f)
        m = self.mult
        rec = TrainRecord(
            epoch=epoch, lr=lr, total_loss=loss, economic=lb.economic, physics=lb.physics,
            constraint=lb.constraint, lambda_f=m.lambda_f, lambda_p=m.lambda_p, lambda_q=m.lambda_q,
            mu_p=m.mu_p, mu_q=m.mu_q,
            residual_norm_metric=float(np.mean(per["residual_norm"])),
            best_loss=self.lr_state.best_loss, restart_flag=int(restarted),
        )
        self.records.append(rec)
        # termination bookkeeping
        if self.prev_loss is not None and abs(loss - self.prev_loss) < cfg.converge_tol:
            self.flat_count += 1
        else:
            self.flat_count = 0
        self.prev_loss = loss
        if self.flat_count >= cfg.converge_window:
            self.stop_reason = "loss-converged"
        elif lb.physics < cfg.energy_tol and lb.h_p == 0.0 and lb.h_q == 0.0:
            self.stop_reason = "energy-converged"
        self.epoch += 1
        if not self.stop_reason and self.epoch >= cfg.epochs:
            self.stop_reason = "max-epochs"
        return rec

    def _log_shadow_price(self) -> None:
        tail = self.records[-self.config.checkpoint_every:]
        est = el.shadow_price_diagnostic([r.physics for r in tail], [r.economic for r in tail])
        if est is not None:
            logger.info("epoch %d: lambda_F %.4f, shadow-price slope %.4g", self.epoch, self.mult.lambda_f, est)

    def _dump_failure(self, u, lb) -> None:
        self.failure_dump = {
            "epoch": self.epoch,
            "multipliers": self.mult.to_dict(),
            "scenarios": np.asarray(u).tolist(),
            "last_records": [asdict(r) for r in self.records[-10:]],
        }

    def run(self, out_dir: Path | None = None, max_epochs: int | None = None) -> TrainResult:
        """Train until a termination rule fires (or ``max_epochs`` more epochs ran)."""
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        budget = max_epochs if max_epochs is not None else math.inf
        ran = 0
        ckpt = None
        try:
            while not self.stop_reason and ran < budget:
                self.step()
                ran += 1
                if self.epoch % self.config.checkpoint_every == 0:
                    self._log_shadow_price()
                    if out_dir:
                        ckpt = self.save(out_dir / f"ckpt_{self.epoch:06d}.gfck")
        except TrainingError:
            if out_dir and getattr(self, "failure_dump", None):
                (out_dir / "failure_dump.json").write_text(json.dumps(self.failure_dump, indent=1))
            raise
        if out_dir:
            ckpt = self.save(out_dir / "final.gfck")
            write_log(self.records, out_dir / "train_log.csv")
        return TrainResult(
            params=nn_opf.MlpParams.from_dict(self.params), config=self.mlp_config,
            multipliers=self.mult, records=self.records, checkpoint=ckpt,
            stop_reason=self.stop_reason or "budget",
        )

    # -- checkpointing ----------------------------------------------------------

    def save(self, path: Path) -> Path:
        smeta, sarrays = self.sampler.state()
        arrays = dict(sarrays)
        for k in self.params:
            if k in self.opt.m:
                arrays[f"adam_m.{k}"] = self.opt.m[k]
                arrays[f"adam_v.{k}"] = self.opt.v[k]
        ls = self.lr_state
        state = {
            "train_config": asdict(self.config),
            "adam_step": self.opt.step,
            "lr_state": asdict(ls),
            "prev_loss": self.prev_loss,
            "flat_count": self.flat_count,
            "stop_reason": self.stop_reason,
            "sampler": smeta,
        }
        nn_opf.save_checkpoint(
            path, self.mlp_config, nn_opf.MlpParams.from_dict(self.params),
            case=self.network.name, epoch=self.epoch, multipliers=self.mult.to_dict(),
            rng_state=self.rng.bit_generator.state, state=_jsonable(state), arrays=arrays,
        )
        return Path(path)

    @classmethod
    def resume(cls, network: Network, path, config: TrainConfig | None = None) -> "Trainer":
        header, mlp_config, params, arrays = nn_opf.load_checkpoint(path)
        st = header["state"]
        config = config or TrainConfig(**st["train_config"])
        tr = cls(network, config, mlp_config)
        tr.params = params.as_dict()
        tr.opt = AdamState(
            st["adam_step"],
            {k: arrays[f"adam_m.{k}"] for k in tr.params if f"adam_m.{k}" in arrays},
            {k: arrays[f"adam_v.{k}"] for k in tr.params if f"adam_v.{k}" in arrays},
        )
        tr.mult = el.MultiplierState(**header["multipliers"])
        tr.lr_state = LrState(**{k: _unjson(v) for k, v in st["lr_state"].items()})
        tr.rng.bit_generator.state = header["rng_state"]
        tr.sampler.load_state(st["sampler"], arrays)
        tr.epoch = header["epoch"]
        tr.prev_loss = st["prev_loss"]
        tr.flat_count = st["flat_count"]
        tr.stop_reason = st["stop_reason"]
        if tr.stop_reason == "max-epochs" and tr.epoch < config.epochs:
            tr.stop_reason = ""  # resumed with a longer schedule
        return tr


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _unjson(v):
    return float(v) if v in ("inf", "-inf") else v


def train(network: Network, config: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    """Run a full training job, optionally resuming from a checkpoint."""
    trainer = Trainer.resume(network, resume, config) if resume else Trainer(network, config)
    return trainer.run(out_dir)


def write_log(records: list[TrainRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([repr(getattr(r, f)) if isinstance(getattr(r, f), float) else getattr(r, f)
                        for f in RECORD_FIELDS])


def read_log(path) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        vals = {}
        for f in fields(TrainRecord):
            raw = row[f.name]
            vals[f.name] = int(raw) if f.type in ("int", int) else float(raw)
        out.append(TrainRecord(**vals))
    return out
