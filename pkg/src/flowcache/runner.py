"""Pipeline orchestration: stage training entry points, checkpoint wiring,
and the benchmark runner with metrics CSV emission.

Sampling sessions (per strategy, class, and quota chunk) each derive their
own RNG stream from the root seed, are evaluated in a fixed key order and
may run on a thread pool; worker count therefore never changes any metric.
Wall-clock time is the only non-deterministic column in the CSV.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import distill, flow, predictor_train
from .autodiff import ParameterSet
from .cache import Strategy, cached_sample, fixture_schedule, plan_schedule
from .checkpoint import (Checkpoint, Stage, load_checkpoint, save_checkpoint,
                         verify_parent)
from .config import ExperimentConfig
from .errors import ConfigError, LineageError
from .flow import ToyDistribution, mean_velocity_sample, sample_data
from .metrics import energy_distance, w2_distance
from .nets import (Condition, DiscriminatorConfig, Predictor, PredictorConfig,
                   VelocityModel, VelocityModelConfig)

METRICS_COLUMNS = ("run_id", "strategy", "full_evals", "predictor_evals",
                   "w2", "energy_distance", "wall_clock_ms", "cache_bytes_peak")

_SESSION_CHUNK = 512


@dataclass
class MetricsRecord:
    run_id: str
    strategy: str
    full_evals: int
    predictor_evals: int
    w2: float
    energy_distance: float
    wall_clock_ms: float
    cache_bytes_peak: int

    def row(self) -> list:
        return [self.run_id, self.strategy, self.full_evals,
                self.predictor_evals, repr(self.w2),
                repr(self.energy_distance), repr(self.wall_clock_ms),
                self.cache_bytes_peak]


# ---------------------------------------------------------------------------
# Stage runners (each emits a lineage-stamped checkpoint)
# ---------------------------------------------------------------------------

def _model_from_snapshot(snapshot: dict) -> VelocityModel:
    return VelocityModel(VelocityModelConfig(**snapshot["velocity"]))


def run_train_base(config: ExperimentConfig, out_path) -> Path:
    vcfg = config.velocity_config(accepts_r=False, accepts_cfg=False)
    model = VelocityModel(vcfg)
    ts = config.base_train
    params, _ = flow.train_base(model, config.distribution, iters=ts.iters,
                                batch_size=ts.batch_size, lr=ts.lr,
                                lr_final=ts.lr_final, p_uncond=ts.p_uncond,
                                seed=config.seed)
    ckpt = Checkpoint(stage=Stage.BASE_FM, params=params,
                      config={"velocity": asdict(vcfg)})
    save_checkpoint(out_path, ckpt)
    return Path(out_path)


def run_distill_cfg(config: ExperimentConfig, base_path, out_path) -> Path:
    base = load_checkpoint(base_path)
    if base.stage is not Stage.BASE_FM:
        raise LineageError(f"{base_path}: expected a BASE_FM checkpoint, "
                           f"found {base.stage.name}")
    teacher = _model_from_snapshot(base.config)
    vcfg = config.velocity_config(accepts_r=True, accepts_cfg=True)
    student = VelocityModel(vcfg)
    ts = config.cfg_train
    params, _ = distill.train_cfg(student, teacher, base.params,
                                  config.distribution, cfg=config.cfg_distill,
                                  iters=ts.iters, batch_size=ts.batch_size,
                                  lr=ts.lr, lr_final=ts.lr_final,
                                  seed=config.seed)
    ckpt = Checkpoint(stage=Stage.CFG_DISTILLED, params=params,
                      config={"velocity": asdict(vcfg),
                              "cfg": asdict(config.cfg_distill)},
                      parent_stage=Stage.BASE_FM, parent_digest=base.digest)
    save_checkpoint(out_path, ckpt)
    return Path(out_path)


def run_distill_meanflow(config: ExperimentConfig, cfg_path, out_path) -> Path:
    parent = load_checkpoint(cfg_path)
    if parent.stage is not Stage.CFG_DISTILLED:
        raise LineageError(f"{cfg_path}: expected a CFG_DISTILLED checkpoint, "
                           f"found {parent.stage.name}")
    model = _model_from_snapshot(parent.config)
    ts = config.meanflow_train
    params, _ = distill.train_meanflow(
        model, parent.params, model, parent.params, config.distribution,
        restrict=config.restrict, cfg=config.cfg_distill, iters=ts.iters,
        batch_size=ts.batch_size, groups_per_step=ts.groups_per_step,
        lr=ts.lr, lr_final=ts.lr_final, clip=ts.grad_clip, seed=config.seed)
    ckpt = Checkpoint(stage=Stage.MEANFLOW, params=params,
                      config={"velocity": parent.config["velocity"],
                              "restrict": asdict(config.restrict)},
                      parent_stage=Stage.CFG_DISTILLED,
                      parent_digest=parent.digest)
    save_checkpoint(out_path, ckpt)
    return Path(out_path)


def run_train_predictor(config: ExperimentConfig, meanflow_path,
                        out_pred, out_disc) -> tuple[Path, Path]:
    parent = load_checkpoint(meanflow_path)
    if parent.stage is not Stage.MEANFLOW:
        raise LineageError(f"{meanflow_path}: expected a MEANFLOW checkpoint, "
                           f"found {parent.stage.name}")
    backbone = _model_from_snapshot(parent.config)
    predictor = Predictor(config.predictor, backbone)
    restrict = distill.RestrictConfig(**parent.config["restrict"])
    from .nets import default_taps
    disc_cfg = DiscriminatorConfig(
        scales=tuple(default_taps(backbone.config.depth)),
        hidden_dim=config.disc_hidden_dim,
        spectral_norm=config.spectral_norm)
    params, disc, _, _ = predictor_train.train_predictor(
        backbone, parent.params, predictor, config.distribution,
        restrict=restrict, cfg=config.predictor_train, seed=config.seed,
        adversarial=True, disc_config=disc_cfg)
    snapshot = {"velocity": parent.config["velocity"],
                "predictor": asdict(config.predictor),
                "delta_max": config.predictor_train.delta_max}
    save_checkpoint(out_pred, Checkpoint(
        stage=Stage.PREDICTOR, params=params, config=snapshot,
        parent_stage=Stage.MEANFLOW, parent_digest=parent.digest))
    disc_entries = dict(disc.params.entries)
    for name, u in disc.u_state.items():
        disc_entries[f"aux.u.{name}"] = u
    save_checkpoint(out_disc, Checkpoint(
        stage=Stage.DISCRIMINATOR, params=ParameterSet(disc_entries),
        config={"velocity": parent.config["velocity"],
                "scales": list(disc_cfg.scales),
                "hidden_dim": disc_cfg.hidden_dim,
                "spectral_norm": disc_cfg.spectral_norm},
        parent_stage=Stage.MEANFLOW, parent_digest=parent.digest))
    return Path(out_pred), Path(out_disc)


def load_sampler(meanflow_path, predictor_path=None):
    """Rebuild (model, params, predictor, predictor_params, delta_max) from
    checkpoints, verifying the lineage chain when both are given."""
    mf = load_checkpoint(meanflow_path)
    if mf.stage is not Stage.MEANFLOW:
        raise LineageError(f"{meanflow_path}: expected a MEANFLOW checkpoint, "
                           f"found {mf.stage.name}")
    model = _model_from_snapshot(mf.config)
    predictor = pparams = delta_max = None
    if predictor_path is not None:
        pc = load_checkpoint(predictor_path)
        if pc.stage is not Stage.PREDICTOR:
            raise LineageError(f"{predictor_path}: expected a PREDICTOR "
                               f"checkpoint, found {pc.stage.name}")
        verify_parent(pc, mf, child_path=str(predictor_path))
        predictor = Predictor(PredictorConfig(**pc.config["predictor"]), model)
        pparams = pc.params
        delta_max = pc.config.get("delta_max")
    return model, mf.params, predictor, pparams, delta_max


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

def build_schedule(config: ExperimentConfig):
    sc = config.schedule
    if sc.explicit is not None:
        return plan_schedule(sc.total_steps, sc.max_interval,
                             warmup_full=sc.warmup_full, explicit=list(sc.explicit))
    if sc.fixture:
        return fixture_schedule(sc.max_interval, sc.total_steps)
    return plan_schedule(sc.total_steps, sc.max_interval,
                         warmup_full=sc.warmup_full)


def _class_quotas(n: int, n_classes: int) -> list[int]:
    base, extra = divmod(n, n_classes)
    return [base + (1 if k < extra else 0) for k in range(n_classes)]


def _session_keys(config: ExperimentConfig):
    keys = []
    for class_id, quota in enumerate(
            _class_quotas(config.metric_samples, config.distribution.n_classes)):
        offset = 0
        while offset < quota:
            keys.append((class_id, offset, min(_SESSION_CHUNK, quota - offset)))
            offset += _SESSION_CHUNK
    return keys


def _run_session(strategy_name, key, model, params, predictor, pparams,
                 delta_max, schedule, config):
    class_id, offset, count = key
    seq = np.random.SeedSequence([config.seed, config.metric_seed,
                                  class_id, offset])
    rng = np.random.default_rng(seq)
    x1 = rng.standard_normal((count, config.distribution.dim))
    g = config.sample_cfg_scale if model.config.accepts_cfg else None
    cond = Condition(class_id, g)
    if strategy_name == "none":
        out = mean_velocity_sample(model, params.entries,
                                   [s.pair for s in schedule.steps], x1, cond)
        counts = (schedule.total_steps, 0, 0)
    else:
        out, rep = cached_sample(model, params, schedule,
                                 Strategy(strategy_name), x1, cond,
                                 predictor=predictor, predictor_params=pparams,
                                 taylor_order=config.taylor_order,
                                 delta_max=delta_max)
        counts = (rep.full_evals, rep.predictor_evals, rep.cache_bytes_peak)
    return out, counts


def run_experiment(config: ExperimentConfig, meanflow_path,
                   predictor_path=None, out_dir=None,
                   run_tag: str | None = None) -> list[MetricsRecord]:
    """Benchmark every configured strategy; appends rows to metrics.csv in
    out_dir (when given) and returns the records."""
    model, params, predictor, pparams, delta_max = load_sampler(
        meanflow_path, predictor_path)
    for name in config.strategies:
        if name == "learned" and predictor is None:
            raise ConfigError("strategy 'learned' needs a predictor checkpoint")
    schedule = build_schedule(config)
    reference = sample_data(config.distribution, config.metric_samples,
                            config.metric_seed)
    keys = _session_keys(config)
    sched_tag = f"s{schedule.total_steps}n{schedule.max_interval}"
    tag = run_tag or f"{config.seed}:{config.distribution.kind}:{sched_tag}"

    records = []
    sample_dumps = {}
    for name in config.strategies:
        t0 = time.perf_counter()
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(pool.map(
                    lambda key: _run_session(name, key, model, params,
                                             predictor, pparams, delta_max,
                                             schedule, config), keys))
        else:
            results = [_run_session(name, key, model, params, predictor,
                                    pparams, delta_max, schedule, config)
                       for key in keys]
        wall_ms = (time.perf_counter() - t0) * 1e3
        samples = np.concatenate([out for out, _ in results], axis=0)
        full_evals, predictor_evals, peak = results[0][1]
        for _, counts in results:
            assert counts[:2] == (full_evals, predictor_evals)
            peak = max(peak, counts[2])
        records.append(MetricsRecord(
            run_id=f"{tag}:{name}", strategy=name, full_evals=full_evals,
            predictor_evals=predictor_evals,
            w2=w2_distance(samples, reference),
            energy_distance=energy_distance(samples, reference),
            wall_clock_ms=wall_ms, cache_bytes_peak=peak))
        sample_dumps[name] = samples

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        append_metrics(out_dir / "metrics.csv", records)
        if config.emit_samples:
            for name, samples in sample_dumps.items():
                dump_samples(out_dir / f"samples-{tag.replace(':', '-')}-{name}.csv",
                             samples)
    return records


def append_metrics(path, records: list[MetricsRecord]):
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRICS_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def dump_samples(path, samples: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(samples.shape[1])])
        for row in samples:
            writer.writerow([repr(v) for v in row])


def run_full_pipeline(config: ExperimentConfig, out_dir) -> dict[str, Path]:
    """Train every stage in order and benchmark; returns checkpoint paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = run_train_base(config, out_dir / "base.fck")
    cfgd = run_distill_cfg(config, base, out_dir / "cfg.fck")
    mf = run_distill_meanflow(config, cfgd, out_dir / "meanflow.fck")
    pred, disc = run_train_predictor(config, mf, out_dir / "predictor.fck",
                                     out_dir / "discriminator.fck")
    run_experiment(config, mf, pred, out_dir=out_dir)
    return {"base": base, "cfg": cfgd, "meanflow": mf, "predictor": pred,
            "discriminator": disc}
