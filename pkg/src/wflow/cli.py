"""Config-driven experiment runner: train, evaluate, sample, transport tasks.

Configs are flat INI files ([section] headers, key = value); every field
that affects a result is echoed into report.json, and replaying the echoed
config reproduces the run. Timing ends up in separate files (run_meta.json,
timing.csv) so the metric artifacts stay byte-identical across reruns.

Exit codes: 0 success, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time

import numpy as np

from wflow import chain as flowchain
from wflow import datasets as ds
from wflow import metrics
from wflow import numcore as nc
from wflow import objectives as obj
from wflow import odeint
from wflow import svgplot
from wflow import transport as tp
from wflow.velocity import default_estimator

TASKS = ("train-cnf", "train-jko", "train-fm", "train-lfm", "ot", "dre", "dro",
         "eval", "sample")

METRIC_NAMES = ("nll", "kl_moment", "gauss_fid", "mmd", "w2", "kl_mc")

# kernel matrices are quadratic in the sample count; cap what mmd sees
MMD_MAX_SAMPLES = 2048


class ConfigError(Exception):
    pass


_SCHEMA = {
    "experiment": {"task", "seed", "out"},
    "dataset": {"source", "target", "dim", "count", "holdout", "shift"},
    "model": {"blocks", "width", "depth", "steps_per_block", "scheme", "t_total",
              "checkpoint"},
    "train": {"learn_rate", "batch_size", "iterations", "gamma", "optimizer",
              "time_draws"},
    "metrics": {"names"},
    "ot": {"penalty"},
    "dre": {"bridges", "bridge_kind", "grid", "classifier_iterations"},
    "dro": {"risk", "risk_c", "gamma"},
}

_DEFAULTS = {
    "experiment": {"task": "", "seed": "0", "out": ""},
    "dataset": {"source": "standard-gaussian", "target": "standard-gaussian",
                "dim": "2", "count": "4096", "holdout": "2048", "shift": ""},
    "model": {"blocks": "1", "width": "64", "depth": "2", "steps_per_block": "32",
              "scheme": "rk4", "t_total": "", "checkpoint": ""},
    "train": {"learn_rate": "0.01", "batch_size": "192", "iterations": "400",
              "gamma": "1.0", "optimizer": "adam", "time_draws": "1"},
    "metrics": {"names": ""},
    "ot": {"penalty": "30.0"},
    "dre": {"bridges": "4", "bridge_kind": "ou", "grid": "24",
            "classifier_iterations": "1200"},
    "dro": {"risk": "linear", "risk_c": "1.0,0.0", "gamma": "1.0"},
}


def parse_config(path) -> dict:
    """Strictly validated flat config; unknown sections/keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        read = parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = {section: dict(defaults) for section, defaults in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            cfg[section][key] = value
    return cfg


def _as_int(cfg, section, key):
    try:
        return int(cfg[section][key])
    except ValueError as err:
        raise ConfigError(f"[{section}] {key} must be an integer, "
                          f"got {cfg[section][key]!r}") from err


def _as_float(cfg, section, key):
    try:
        return float(cfg[section][key])
    except ValueError as err:
        raise ConfigError(f"[{section}] {key} must be a number, "
                          f"got {cfg[section][key]!r}") from err


def _as_floats(cfg, section, key):
    raw = cfg[section][key].strip()
    if not raw:
        return ()
    try:
        return tuple(float(v) for v in raw.split(","))
    except ValueError as err:
        raise ConfigError(f"[{section}] {key} must be comma-separated numbers") from err


class ArtifactWriter:
    """Tracks files written by one run so failures can clean up after themselves."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.written = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.out_dir, name)
        self.written.append(p)
        return p

    def json(self, name, payload):
        with open(self.path(name), "w", encoding="ascii") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")

    def rollback(self):
        for p in self.written:
            if os.path.exists(p):
                os.unlink(p)


def _write_loss_csv(writer, result_losses, wall_ms, stem="loss"):
    # deterministic trace and a timing side-channel with the same rows
    with open(writer.path(f"{stem}.csv"), "w", encoding="ascii") as fh:
        fh.write("iteration,loss\n")
        for i, value in enumerate(result_losses):
            fh.write(f"{i},{value!r}\n")
    with open(writer.path("timing.csv"), "w", encoding="ascii") as fh:
        fh.write("iteration,loss,wall_ms\n")
        for i, (value, wall) in enumerate(zip(result_losses, wall_ms)):
            fh.write(f"{i},{value!r},{wall:.3f}\n")


def _dataset_pools(cfg, seed):
    d = _as_int(cfg, "dataset", "dim")
    count = _as_int(cfg, "dataset", "count")
    holdout = _as_int(cfg, "dataset", "holdout")
    shift = _as_floats(cfg, "dataset", "shift")
    source = ds.preset_density(cfg["dataset"]["source"], d, shift)
    target = ds.preset_density(cfg["dataset"]["target"], d)
    train = ds.ParticleEnsemble(source.sample(count, np.random.default_rng([seed, 101])))
    hold = ds.ParticleEnsemble(source.sample(holdout, np.random.default_rng([seed, 202])))
    return source, target, train, hold


def _train_config(cfg, seed) -> obj.TrainConfig:
    return obj.TrainConfig(
        learn_rate=_as_float(cfg, "train", "learn_rate"),
        batch_size=_as_int(cfg, "train", "batch_size"),
        iterations=_as_int(cfg, "train", "iterations"),
        seed=seed,
        gamma=_as_float(cfg, "train", "gamma"),
        optimizer=cfg["train"]["optimizer"],
    )


def _build_chain(cfg, d, base, seed):
    blocks = _as_int(cfg, "model", "blocks")
    width = _as_int(cfg, "model", "width")
    depth = _as_int(cfg, "model", "depth")
    steps = _as_int(cfg, "model", "steps_per_block")
    scheme = cfg["model"]["scheme"]
    t_total = cfg["model"]["t_total"]
    t_total = float(t_total) if t_total else float(blocks)
    return flowchain.identity_chain(d, blocks, base=base, widths=(width,) * depth,
                                    steps=steps, scheme=scheme, t_total=t_total,
                                    seed=seed)


def _metric_list(cfg):
    raw = cfg["metrics"]["names"].strip()
    if not raw:
        return []
    names = [n.strip() for n in raw.split(",") if n.strip()]
    for n in names:
        if n not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {n!r}; known: {', '.join(METRIC_NAMES)}")
    return names


def _chain_metrics(names, chn, target, holdout, seed):
    reports = []
    rng = np.random.default_rng([seed, 303])
    generated = flowchain.sample(chn, holdout.m, rng)
    sizes = {"holdout": holdout.m, "generated": generated.m}
    for name in names:
        extra = {}
        if name == "nll":
            value = metrics.nll_eval(chn, holdout)
            extra = {"holdout_disjoint_from_training": True}  # by pool construction
        elif name == "kl_moment":
            pushed = flowchain.forward_map(chn, holdout)
            value = metrics.moment_fit_kl(pushed, target)
        elif name == "gauss_fid":
            value = metrics.gauss_fid(generated, holdout)
        elif name == "mmd":
            k = min(MMD_MAX_SAMPLES, holdout.m, generated.m)
            value = metrics.mmd_rbf(generated.positions[:k], holdout.positions[:k]).value
        elif name == "w2":
            k = min(512, holdout.m, generated.m)
            value = metrics.w2_exact(generated.positions[:k], holdout.positions[:k])
        else:
            raise ConfigError("metric kl_mc applies to the eval task only")
        reports.append(metrics.MetricReport(name, float(value), sizes, seed, extra).__dict__)
    return reports, generated


def _scatter(writer, name, groups):
    svgplot.scatter_svg(writer.path(name), groups)


def _trajectory_plot(writer, chn, data, seed):
    rng = np.random.default_rng([seed, 404])
    take = data.positions[rng.choice(data.m, size=min(8, data.m), replace=False)]
    trajs = []
    for x0 in take:
        # trajectory sampled at block boundaries; enough for a path plot
        pts = [x0]
        x = x0[None, :]
        for block in chn.blocks:
            x = odeint.integrate(block.field, x, block.integrator)
            pts.append(x[0])
        trajs.append(np.asarray(pts))
    if trajs and trajs[0].shape[1] == 2:
        svgplot.trajectories_svg(writer.path("trajectories.svg"), trajs,
                                 points=data.positions[:512])


def _report(writer, cfg, task, seed, payload):
    # the output directory is provenance-neutral: it never affects values,
    # and keeping it out of report.json keeps reruns byte-comparable
    echo = {section: dict(values) for section, values in cfg.items()}
    echo["experiment"]["task"] = task
    echo["experiment"]["seed"] = str(seed)
    echo["experiment"]["out"] = ""
    payload = {"task": task, "seed": seed, "config": echo, **payload}
    writer.json("report.json", payload)
    parser = configparser.ConfigParser()
    parser.read_dict(echo)
    with open(writer.path("config_echo.ini"), "w", encoding="ascii") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# tasks

def _task_train(task, cfg, seed, writer):
    source, target, train_pool, holdout = _dataset_pools(cfg, seed)
    d = train_pool.d
    if not isinstance(target, (ds.Gaussian, ds.GaussianMixture)):
        raise ConfigError("training targets must be analytic densities")
    chn = _build_chain(cfg, d, target, seed)
    tcfg = _train_config(cfg, seed)
    est = default_estimator(d)
    losses, walls = [], []
    block_summary = []

    if task == "train-cnf":
        result = obj.train_block("nll", chn, train_pool, tcfg, est=est)
        losses, walls = result.losses, result.wall_ms
    elif task == "train-fm":
        if len(chn.blocks) != 1:
            raise ConfigError("train-fm uses a single block; set [model] blocks = 1")
        noise = ds.ParticleEnsemble(target.sample(train_pool.m,
                                                  np.random.default_rng([seed, 77])))
        result = obj.train_block("fm", chn.blocks[0], (train_pool, noise), tcfg,
                                 time_draws=_as_int(cfg, "train", "time_draws"))
        losses, walls = result.losses, result.wall_ms
    else:  # progressive: train-jko / train-lfm
        kind = "jko" if task == "train-jko" else "local_fm"
        particles = train_pool
        for n, block in enumerate(chn.blocks):
            step_cfg = obj.TrainConfig(**{**tcfg.__dict__, "seed": seed + 1000 * n})
            potential = target if kind == "jko" else None
            result = obj.train_block(kind, block, particles, step_cfg, est=est,
                                     potential=potential)
            particles = obj.push_particles(block, particles)
            losses.extend(result.losses)
            walls.extend(result.wall_ms)
            summary = {"block": n, "final_loss": float(result.losses[-1])}
            if isinstance(target, ds.Gaussian):
                summary["kl_moment"] = metrics.moment_fit_kl(particles, target)
            block_summary.append(summary)

    flowchain.save_checkpoint(chn, writer.path("chain.wflw"))
    _write_loss_csv(writer, np.asarray(losses), np.asarray(walls))
    names = _metric_list(cfg)
    reports, generated = _chain_metrics(names, chn, target, holdout, seed)
    ds.save_particles_csv(writer.path("samples.csv"), generated)
    if d == 2:
        _scatter(writer, "samples.svg",
                 [(holdout.positions, "data"), (generated.positions, "model")])
        _trajectory_plot(writer, chn, holdout, seed)
    payload = {"metrics": reports, "final_loss": float(losses[-1]) if len(losses) else None,
               "blocks": block_summary, "parameters": chn.parameter_count()}
    _report(writer, cfg, task, seed, payload)


def _task_ot(cfg, seed, writer):
    source, target, train_pool, holdout = _dataset_pools(cfg, seed)
    q_pool = ds.ParticleEnsemble(target.sample(train_pool.m,
                                               np.random.default_rng([seed, 88])))
    chn = _build_chain(cfg, train_pool.d, target if isinstance(target, ds.Gaussian)
                       else ds.standard_gaussian(train_pool.d), seed)
    tcfg = _train_config(cfg, seed)
    p_density = source if isinstance(source, ds.Gaussian) else None
    q_density = target if isinstance(target, ds.Gaussian) else None
    res = tp.ot_train(train_pool, q_pool, chn, _as_float(cfg, "ot", "penalty"), tcfg,
                      p_density=p_density, q_density=q_density)
    flowchain.save_checkpoint(chn, writer.path("chain.wflw"))
    _write_loss_csv(writer, res.losses, res.wall_ms)
    mapped = flowchain.forward_map(chn, holdout)
    ds.save_particles_csv(writer.path("samples.csv"), mapped)
    if train_pool.d == 2:
        _scatter(writer, "samples.svg",
                 [(holdout.positions, "p"), (mapped.positions, "F(p)"),
                  (q_pool.positions[: holdout.m], "q")])
    payload = {"transport_cost": res.transport_cost, "kl_p": res.kl_p, "kl_q": res.kl_q,
               "penalty": _as_float(cfg, "ot", "penalty")}
    _report(writer, cfg, "ot", seed, payload)


def _task_dre(cfg, seed, writer):
    source, target, train_pool, _ = _dataset_pools(cfg, seed)
    rng = np.random.default_rng([seed, 99])
    q_pool = ds.ParticleEnsemble(target.sample(train_pool.m, rng))
    bridges = _as_int(cfg, "dre", "bridges")
    fit_cfg = obj.TrainConfig(learn_rate=0.006, batch_size=256,
                              iterations=_as_int(cfg, "dre", "classifier_iterations"),
                              seed=seed)
    bridge_kind = cfg["dre"]["bridge_kind"]
    if bridge_kind == "ou":
        path = ou_bridge_path(train_pool, q_pool, bridges, rng)
    elif bridge_kind == "flow":
        checkpoint = cfg["model"]["checkpoint"]
        if not checkpoint:
            raise ConfigError("[dre] bridge_kind = flow needs [model] checkpoint")
        path = flow_bridge_path(flowchain.load_checkpoint(checkpoint),
                                train_pool, q_pool, bridges)
    else:
        raise ConfigError(f"[dre] bridge_kind must be ou or flow, got {bridge_kind!r}")

    grid = support_grid(source, target, train_pool, q_pool,
                        _as_int(cfg, "dre", "grid"))
    direct = tp.fit_logistic_ratio(train_pool, q_pool, fit_cfg).log_ratio(grid)
    tele = tp.telescopic_log_ratio(path, grid, fit_cfg)
    analytic = None
    try:
        analytic = target.log_pdf(grid) - source.log_pdf(grid)
    except NotImplementedError:
        pass

    with open(writer.path("dre.csv"), "w", encoding="ascii") as fh:
        coord_names = ",".join(f"x{k}" for k in range(train_pool.d))
        fh.write(f"{coord_names},analytic,direct,telescopic\n")
        for i in range(len(grid)):
            coords = ",".join(repr(float(v)) for v in grid[i])
            ana = repr(float(analytic[i])) if analytic is not None else ""
            fh.write(f"{coords},{ana},{float(direct[i])!r},{float(tele[i])!r}\n")
    payload = {"bridges": bridges, "bridge_kind": bridge_kind, "grid_points": len(grid)}
    if analytic is not None:
        payload["mse_direct"] = float(np.mean((direct - analytic) ** 2))
        payload["mse_telescopic"] = float(np.mean((tele - analytic) ** 2))
    if train_pool.d == 2:
        _scatter(writer, "samples.svg",
                 [(train_pool.positions, "p"), (q_pool.positions, "q")])
    _report(writer, cfg, "dre", seed, payload)


def _task_dro(cfg, seed, writer):
    source, _, train_pool, holdout = _dataset_pools(cfg, seed)
    kind = cfg["dro"]["risk"]
    if kind == "linear":
        c = np.asarray(_as_floats(cfg, "dro", "risk_c"))
        if len(c) != train_pool.d:
            raise ConfigError(f"[dro] risk_c needs {train_pool.d} components")
        risk = tp.RiskFunction.linear(c)
    else:
        raise ConfigError(f"config-driven dro supports only the linear risk, got {kind!r}")
    tcfg = _train_config(cfg, seed)
    res = tp.dro_train(risk, train_pool, _as_float(cfg, "dro", "gamma"), tcfg)
    _write_loss_csv(writer, res.losses, res.wall_ms)
    ds.save_particles_csv(writer.path("samples.csv"), res.ensemble)
    if train_pool.d == 2:
        _scatter(writer, "samples.svg",
                 [(train_pool.positions, "p"), (res.ensemble.positions, "worst-case")])
    payload = {"risk": res.risk, "movement": res.movement,
               "gamma": _as_float(cfg, "dro", "gamma")}
    _report(writer, cfg, "dro", seed, payload)


def _task_eval(cfg, seed, writer):
    source, target, train_pool, _ = _dataset_pools(cfg, seed)
    rng = np.random.default_rng([seed, 55])
    q_pool = ds.ParticleEnsemble(target.sample(train_pool.m, rng))
    reports = []
    sizes = {"p": train_pool.m, "q": q_pool.m}
    for name in _metric_list(cfg):
        if name == "kl_mc":
            res = metrics.kl_mc(source.log_pdf, target.log_pdf, train_pool)
            reports.append(metrics.MetricReport(
                name, res.value, sizes, seed,
                {"std_err": res.std_err, "n_nonfinite": res.n_nonfinite}).__dict__)
            continue
        if name == "gauss_fid":
            value = metrics.gauss_fid(train_pool, q_pool)
        elif name == "mmd":
            k = min(MMD_MAX_SAMPLES, train_pool.m, q_pool.m)
            value = metrics.mmd_rbf(train_pool.positions[:k], q_pool.positions[:k]).value
        elif name == "w2":
            k = min(512, train_pool.m, q_pool.m)
            value = metrics.w2_exact(train_pool.positions[:k], q_pool.positions[:k])
        else:
            raise ConfigError(f"metric {name!r} needs a trained chain; use a train task")
        reports.append(metrics.MetricReport(name, float(value), sizes, seed).__dict__)
    if train_pool.d == 2:
        _scatter(writer, "samples.svg",
                 [(train_pool.positions, "p"), (q_pool.positions, "q")])
    _report(writer, cfg, "eval", seed, {"metrics": reports})


def _task_sample(cfg, seed, writer):
    checkpoint = cfg["model"]["checkpoint"]
    count = _as_int(cfg, "dataset", "count")
    if checkpoint:
        chn = flowchain.load_checkpoint(checkpoint)
    else:
        target = ds.preset_density(cfg["dataset"]["target"],
                                   _as_int(cfg, "dataset", "dim"))
        if not isinstance(target, (ds.Gaussian, ds.GaussianMixture)):
            raise ConfigError("sampling without a checkpoint needs an analytic target")
        chn = _build_chain(cfg, target.d, target, seed)
    generated = flowchain.sample(chn, count, np.random.default_rng([seed, 1]))
    ds.save_particles_csv(writer.path("samples.csv"), generated)
    if generated.d == 2:
        _scatter(writer, "samples.svg", [(generated.positions, "samples")])
    _report(writer, cfg, "sample", seed, {"count": count,
                                          "checkpoint": checkpoint or None})


def support_grid(source, target, p_pool, q_pool, n_grid, min_log_density=-5.5):
    """Product grid over the joint bounding box, kept where either density lives.

    Log-ratio targets are meaningless where both densities vanish, so grid
    points below the density floor under both p and q are dropped.
    """
    joint = np.concatenate([p_pool.positions, q_pool.positions])
    lo, hi = joint.min(axis=0), joint.max(axis=0)
    axes = [np.linspace(lo[k], hi[k], n_grid) for k in range(p_pool.d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    try:
        keep = np.maximum(source.log_pdf(grid), target.log_pdf(grid)) >= min_log_density
        grid = grid[keep]
    except NotImplementedError:
        pass
    return grid


def ou_bridge_path(p_pool, q_pool, bridges, rng):
    """Interpolating ensembles: p, OU-shrunk copies of p, then q.

    The mean-reverting step pulls the p cloud toward the standard normal,
    which typically sits between distant p and q supports; the final hop
    lands on the q samples themselves.
    """
    stream = int(rng.integers(2**31))
    path = [p_pool]
    for k in range(1, bridges):
        frac = k / bridges
        gamma_k = -np.log(max(1e-9, 1.0 - 0.85 * frac))
        _, x_r = obj.make_local_fm_targets(p_pool, gamma_k,
                                           np.random.default_rng([stream, k]))
        path.append(x_r)
    path.append(q_pool)
    return path


def flow_bridge_path(chn, p_pool, q_pool, bridges):
    """Intermediates from pushing p part way through a trained transport chain."""
    times = np.linspace(0.0, chn.t_total, bridges + 1)[1:-1]
    path = [p_pool]
    for s in times:
        x = p_pool.positions
        for block in chn.blocks:
            t_a, t_b = block.integrator.interval
            if s <= t_a + 1e-12:
                break
            stop = min(s, t_b)
            frac = (stop - t_a) / (t_b - t_a)
            steps = max(1, int(round(block.integrator.steps * frac)))
            sub = odeint.IntegratorConfig(block.integrator.scheme, steps, (t_a, stop))
            x = odeint.integrate(block.field, x, sub)
        path.append(ds.ParticleEnsemble(x))
    path.append(q_pool)
    return path


def run_experiment(config_path, task=None, seed=None, out=None) -> int:
    """Run one experiment; returns the process exit code."""
    try:
        cfg = parse_config(config_path)
        task = task or cfg["experiment"]["task"]
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; known: {', '.join(TASKS)}")
        seed = seed if seed is not None else int(cfg["experiment"]["seed"])
        out_dir = out or cfg["experiment"]["out"] or os.path.join("runs", task)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    writer = ArtifactWriter(out_dir)
    t0 = time.time()
    try:
        if task in ("train-cnf", "train-jko", "train-fm", "train-lfm"):
            _task_train(task, cfg, seed, writer)
        elif task == "ot":
            _task_ot(cfg, seed, writer)
        elif task == "dre":
            _task_dre(cfg, seed, writer)
        elif task == "dro":
            _task_dro(cfg, seed, writer)
        elif task == "eval":
            _task_eval(cfg, seed, writer)
        else:
            _task_sample(cfg, seed, writer)
    except ConfigError as err:
        writer.rollback()
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (nc.NumericError, obj.TrainingDiverged, tp.UnboundedRiskError,
            flowchain.CheckpointError) as err:
        writer.rollback()
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    # wall-clock and timestamps live outside the deterministic artifacts
    with open(os.path.join(out_dir, "run_meta.json"), "w", encoding="ascii") as fh:
        json.dump({"started_unix": t0, "elapsed_s": time.time() - t0}, fh, indent=2)
        fh.write("\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="wflow",
        description="desk-scale flow-model laboratory: train, evaluate, sample, transport",
    )
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True, help="INI experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
    parser.add_argument("--out", default=None, help="override output directory")
    args = parser.parse_args(argv)
    return run_experiment(args.config, task=args.task, seed=args.seed, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
