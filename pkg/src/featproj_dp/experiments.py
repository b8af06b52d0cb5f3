"""Sweep configuration, the per-cell runner and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import accountant, data, metrics, models, optimizer
from .numerics import RngStream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SEED_ENV = "FEATPROJ_DP_SEED"
STRATEGIES = ("scratch", "finetune-full", "finetune-frozen")
# non-private SGD trained on ψ(x) only and evaluated on raw test images
PSI_ONLY = "SGD_PSI"
SWEEP_VARIANTS = (*optimizer.VARIANTS, PSI_ONLY)
_NON_PRIVATE = (optimizer.SGD, PSI_ONLY)

# stream ids under the base seed
_DATA, _TEST, _SPLIT, _PRETRAIN_DATA, _PRETRAIN_RUN = 1, 2, 3, 4, 5
_RUN_OFFSET = 1000


@dataclass
class DatasetConfig:
    n: int = 2000
    height: int = 32
    width: int = 32
    joints: int = 4
    noise_level: float = 0.1
    test_n: int = 500
    public_m: int = 100
    blur_kernel: int = 9
    blur_sigma: float = 3.0


@dataclass
class ModelConfig:
    hidden: int = 64
    kappa: float = 2.0
    smoothing: float = 2.0


@dataclass
class PretrainConfig:
    """Non-private warm start used by the finetune strategies."""

    n: int = 1000
    noise_level: float = 0.2
    steps: int = 100


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    variants: list[str] = field(default_factory=lambda: list(SWEEP_VARIANTS))
    epsilons: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    clips: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    delta: float = 4e-5
    k: int | None = 50
    refresh: int | None = None
    eta: float = 5.0
    steps: int = 300
    batch_size: float = 64.0
    warmup: float = 0.0
    strategies: list[str] = field(default_factory=lambda: ["scratch"])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    base_seed: int = 7
    output_dir: str = "results"
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        for name in ("variants", "epsilons", "clips", "strategies", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"config grid '{name}' is empty")
        for v in self.variants:
            if v not in SWEEP_VARIANTS:
                raise ValueError(f"unknown variant {v!r}; choose from {SWEEP_VARIANTS}")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {self.schema_version}")
        if not 0 < self.dataset.public_m < self.dataset.n:
            raise ValueError("public_m must lie strictly between 0 and n")

    @property
    def n_private(self) -> int:
        return self.dataset.n - self.dataset.public_m

    @property
    def q(self) -> float:
        return self.batch_size / self.n_private

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"dataset": DatasetConfig, "model": ModelConfig, "pretrain": PretrainConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, sub in nested.items():
            if key in d:
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ValueError(f"unknown keys in '{key}': {sorted(bad)}")
                d[key] = sub(**d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            cfg = cls.from_dict(json.load(f))
        env = os.environ.get(SEED_ENV)
        if env:
            cfg.base_seed = int(env)
        return cfg


@dataclass
class ResultRow:
    variant: str
    epsilon_target: float
    epsilon_accounted: float
    C: float
    sigma: float
    seed: int
    strategy: str
    final_loss: float
    pck_at_05: float
    pck_at_01: float
    wall_time_s: float
    status: str = "ok"


FIELDS = [f.name for f in dataclasses.fields(ResultRow)]


@dataclass(frozen=True)
class Cell:
    variant: str
    epsilon: float
    clip: float
    strategy: str
    seed: int


def cells(cfg: ExperimentConfig) -> list[Cell]:
    return [Cell(v, e, c, s, seed)
            for s in cfg.strategies
            for v in cfg.variants
            for c in cfg.clips
            for e in cfg.epsilons
            for seed in cfg.seeds]


# --------------------------------------------------------------------------
# the desk task


class DeskTask:
    """Everything a sweep cell needs, built deterministically from the config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        d = cfg.dataset
        base = cfg.base_seed
        full = data.generate(RngStream(base, _DATA), d.n, d.height, d.width, d.joints,
                             d.noise_level, d.blur_kernel, d.blur_sigma)
        self.test = data.generate(RngStream(base, _TEST), d.test_n, d.height, d.width,
                                  d.joints, d.noise_level, d.blur_kernel, d.blur_sigma)
        self.split = data.split(full, d.public_m, RngStream(base, _SPLIT))
        self.diag = metrics.frame_diagonal(d.height, d.width)

        priv, pub = self.split.private, self.split.public
        self.train_data = optimizer.TrainData(
            optimizer.PrivateBatch(_flat(priv.images), self.targets(priv)),
            optimizer.PublicBatch(_flat(priv.public_images), self.targets(priv)),
            optimizer.PublicSet(_flat(pub.images), _flat(pub.public_images), self.targets(pub)),
        )
        self.test_inputs = _flat(self.test.images)
        self.test_targets = self.targets(self.test)
        self._pretrained: np.ndarray | None = None

    def targets(self, s: data.KeypointSet) -> np.ndarray:
        d, m = self.cfg.dataset, self.cfg.model
        return models.keypoint_targets(s.joints, d.width, d.height, m.kappa, m.smoothing)

    def model(self, strategy: str) -> models.Model:
        d, m = self.cfg.dataset, self.cfg.model
        model = models.Model(models.keypoint_spec(d.height, d.width, d.joints, m.hidden, m.kappa))
        if strategy == "finetune-frozen":
            model.set_trainable(models.trainable_ranges_for(model, model.head_blocks()))
        return model

    def pretrained(self) -> np.ndarray:
        """Weights from a non-private run on a disjoint, noisier pretraining split."""
        if self._pretrained is None:
            cfg, d = self.cfg, self.cfg.dataset
            pre = data.generate(RngStream(cfg.base_seed, _PRETRAIN_DATA), cfg.pretrain.n,
                                d.height, d.width, d.joints, cfg.pretrain.noise_level,
                                d.blur_kernel, d.blur_sigma)
            td = optimizer.TrainData(optimizer.PrivateBatch(_flat(pre.images), self.targets(pre)))
            hyper = optimizer.Hyper(eta=cfg.eta, steps=cfg.pretrain.steps,
                                    q=cfg.batch_size / cfg.pretrain.n, k=None)
            res = optimizer.train(optimizer.SGD, self.model("scratch"), td, None, hyper,
                                  RngStream(cfg.base_seed, _PRETRAIN_RUN))
            self._pretrained = res.w
        return self._pretrained

    def evaluate(self, model: models.Model, w: np.ndarray) -> tuple[float, float, float]:
        loss = float(model.losses(w, self.test_inputs, self.test_targets).mean())
        pred = model.predict_coords(w, self.test_inputs)
        p05 = metrics.pck(pred, self.test.joints, 0.5, self.diag).mean
        p01 = metrics.pck(pred, self.test.joints, 0.1, self.diag).mean
        return loss, p05, p01

    def run(self, cell: Cell, sigma: float | None) -> ResultRow:
        cfg = self.cfg
        t0 = time.perf_counter()
        model = self.model(cell.strategy)
        w0 = None if cell.strategy == "scratch" else self.pretrained()
        hyper = optimizer.Hyper(eta=cfg.eta, steps=cfg.steps, q=cfg.q, k=cfg.k,
                                refresh=cfg.refresh, warmup=cfg.warmup)
        rng = RngStream(cfg.base_seed, _RUN_OFFSET + cell.seed)
        spec = None
        variant, train_data = cell.variant, self.train_data
        if variant == PSI_ONLY:
            feats = self.train_data.private_features
            variant = optimizer.SGD
            train_data = optimizer.TrainData(optimizer.PrivateBatch(feats.features, feats.targets))
        elif variant != optimizer.SGD:
            spec = accountant.PrivacySpec(cell.epsilon, cfg.delta, cell.clip, sigma, cfg.q, cfg.steps)
        res = optimizer.train(variant, model, train_data, spec, hyper, rng, w0=w0)
        loss, p05, p01 = self.evaluate(model, res.w)
        status = "halted" if res.halted else "ok"
        return ResultRow(cell.variant, cell.epsilon, res.accounted_epsilon, cell.clip,
                         0.0 if sigma is None else sigma, cell.seed, cell.strategy,
                         loss, p05, p01, time.perf_counter() - t0, status)


def _flat(images: np.ndarray) -> np.ndarray:
    return images.reshape(len(images), -1)


# --------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


class RowWriter:
    """Appends rows to the results CSV, flushing after each one."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(FIELDS)
        self._f.flush()

    def write(self, row: ResultRow) -> None:
        self._w.writerow([_fmt(getattr(row, k)) for k in FIELDS])
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rows(path) -> list[ResultRow]:
    types = {f.name: f.type for f in dataclasses.fields(ResultRow)}
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            kw = {}
            for k, v in rec.items():
                t = types[k]
                kw[k] = int(v) if t == "int" else float(v) if t == "float" else v
            rows.append(ResultRow(**kw))
    return rows


# --------------------------------------------------------------------------
# sweep


def calibrate_grid(cfg: ExperimentConfig) -> dict[float, float | accountant.CalibrationInfeasible]:
    out = {}
    for eps in cfg.epsilons:
        try:
            out[eps] = accountant.calibrate_sigma(eps, cfg.delta, cfg.q, cfg.steps)
        except accountant.CalibrationInfeasible as exc:
            out[eps] = exc
    return out


_WORKER_TASK: DeskTask | None = None


def _worker_init(cfg_dict: dict, base_seed: int) -> None:
    global _WORKER_TASK
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg.base_seed = base_seed
    _WORKER_TASK = DeskTask(cfg)


def _worker_run(cell: Cell, sigma):
    try:
        return _WORKER_TASK.run(cell, sigma)
    except Exception as exc:  # reported as a row, the sweep carries on
        return _error_row(cell, sigma, exc)


def _error_row(cell: Cell, sigma, exc) -> ResultRow:
    nan = float("nan")
    return ResultRow(cell.variant, cell.epsilon, nan, cell.clip, nan if sigma is None else sigma,
                     cell.seed, cell.strategy, nan, nan, nan, 0.0,
                     f"error: {type(exc).__name__}: {exc}".replace("\n", " "))


def select(cell_list: Iterable[Cell], filters: dict[str, str] | None) -> list[Cell]:
    if not filters:
        return list(cell_list)
    keymap = {"variant": "variant", "epsilon": "epsilon", "C": "clip", "clip": "clip",
              "strategy": "strategy", "seed": "seed"}
    out = []
    for c in cell_list:
        ok = True
        for k, v in filters.items():
            if k not in keymap:
                raise ValueError(f"cannot filter on {k!r}")
            allowed = v.split("|")
            cur = getattr(c, keymap[k])
            if isinstance(cur, str):
                ok &= cur in allowed
            else:
                ok &= any(float(a) == float(cur) for a in allowed)
        if ok:
            out.append(c)
    return out


def run_sweep(cfg: ExperimentConfig, out_csv=None, filters=None, jobs: int = 1,
              task: DeskTask | None = None) -> list[ResultRow]:
    """Run every selected cell and write ``results.csv`` row by row.

    Rows appear in cell order regardless of ``jobs``. Plain SGD ignores ε and
    C, so it (and the ψ-only baseline) runs once per (strategy, seed) and its
    result is repeated across the grid.
    """
    cfg.validate()
    out_csv = Path(out_csv or Path(cfg.output_dir) / "results.csv")
    todo = select(cells(cfg), filters)
    sigmas = calibrate_grid(cfg)
    for eps, s in sigmas.items():
        if isinstance(s, Exception):
            log.warning("epsilon=%g cannot be calibrated: %s", eps, s)

    def sigma_for(c: Cell):
        return None if c.variant in _NON_PRIVATE else sigmas[c.epsilon]

    def key(c: Cell):
        return (c.variant, c.strategy, c.seed) if c.variant in _NON_PRIVATE else c

    unique: dict = {}
    for c in todo:
        s = sigma_for(c)
        if not isinstance(s, Exception):
            unique.setdefault(key(c), c)

    rows: list[ResultRow] = []
    with RowWriter(out_csv) as writer:
        done: dict = {}

        def emit_ready():
            while len(rows) < len(todo):
                c = todo[len(rows)]
                s = sigma_for(c)
                if isinstance(s, Exception):
                    nan = float("nan")
                    row = ResultRow(c.variant, c.epsilon, nan, c.clip, nan, c.seed, c.strategy,
                                    nan, nan, nan, 0.0, "infeasible")
                elif key(c) in done:
                    base = done[key(c)]
                    row = dataclasses.replace(base, epsilon_target=c.epsilon, C=c.clip)
                else:
                    return
                rows.append(row)
                writer.write(row)

        if jobs <= 1:
            t = task or DeskTask(cfg)
            for k, c in unique.items():
                try:
                    done[k] = t.run(c, sigma_for(c))
                except Exception as exc:
                    log.exception("cell %s failed", c)
                    done[k] = _error_row(c, sigma_for(c), exc)
                emit_ready()
        else:
            with ProcessPoolExecutor(jobs, initializer=_worker_init,
                                     initargs=(cfg.to_dict(), cfg.base_seed)) as pool:
                futs = {k: pool.submit(_worker_run, c, sigma_for(c)) for k, c in unique.items()}
                for k, f in futs.items():
                    done[k] = f.result()
                    emit_ready()
        emit_ready()
    return rows


def sweep_ok(rows: list[ResultRow]) -> bool:
    """True unless some cell failed; halted and infeasible cells are expected outcomes."""
    return all(r.status in ("ok", "halted", "infeasible") for r in rows)
