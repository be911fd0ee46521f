"""Command-line front end: ``ekfrnn {gen,train,eval,sweep-l1,mpc}``.

Every command reads one TOML config, validates it completely and only then
computes and writes its outputs into ``--out``. Exit codes: 0 success,
2 configuration or input error, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from typing import Literal, Optional, Union

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import data as data_mod
from .data import load_csv, save_csv, save_log_csv, score, split_train_test, standardize
from .ekf import EkfConfig, train, zero_fraction
from .errors import ConfigError, DimensionMismatch, EkfRnnError, ParseError
from .gd import train_gd
from .init_state import PswarmConfig, open_loop_predict
from .models import LstmSpec, RnnSpec, init_params, load_model, save_model
from .mpc import (
    DisturbanceModel,
    MpcConfig,
    NmpcController,
    OffsetFreeEstimator,
    CSTR_CAF_RANGE,
    closed_loop_sim,
    collect_plant_data,
    cstr_plant,
    save_trajectory_csv,
    steady_state_offset,
)
from .numerics import make_rng
from .objectives import CrossEntropyLoss, L1Reg, L2Reg, MSELoss

logger = logging.getLogger("ekfrnn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    generator: Optional[Literal["binary_linear", "nonlinear_benchmark", "cstr"]] = None
    path: Optional[str] = None
    test_path: Optional[str] = None
    n_u: Optional[int] = None
    n_y: Optional[int] = None
    sigma: float = 0.0
    N_total: int = Field(2000, ge=2)
    n_train: Optional[int] = Field(None, ge=1)
    standardize: bool = True

    @model_validator(mode="after")
    def _source(self):
        if (self.generator is None) == (self.path is None):
            raise ValueError("data needs exactly one of 'generator' or 'path'")
        if self.path is not None and (self.n_u is None or self.n_y is None):
            raise ValueError("data from a file needs n_u and n_y")
        return self


class ModelSection(_Section):
    kind: Literal["rnn", "lstm"] = "rnn"
    n_x: int = Field(4, ge=0)
    n_h: int = Field(4, ge=1)
    hidden_x: list[int] = []
    hidden_y: list[int] = []
    act_x: Union[str, list[str]] = "atan"
    act_y: Union[str, list[str]] = "atan"
    out_act: str = "identity"
    strictly_causal: bool = False
    init_scale: float = Field(1.0, gt=0)


class LossSection(_Section):
    kind: Literal["mse", "ce"] = "mse"
    eps: float = Field(0.005, gt=0)
    W: Optional[list[list[float]]] = None


class RegSection(_Section):
    rho_theta: float = Field(1e-3, ge=0)
    rho_x: float = Field(1e-3, ge=0)
    l1: float = Field(0.0, ge=0)


class TrainerSection(_Section):
    kind: Literal["ekf", "gd"] = "ekf"
    epochs: int = Field(10, ge=1)
    Qx: float = Field(1e-10, ge=0)
    Qtheta: float = Field(1e-10, ge=0)
    P0: Optional[float] = Field(None, gt=0)
    l1_mode: Literal["batch", "sequential"] = "batch"
    n_bar: int = Field(100, ge=1)
    mode: Literal["condensed", "partial", "relaxed"] = "condensed"
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: Optional[float] = Field(None, gt=0)
    gamma: float = Field(1e-4, gt=0)
    M: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _lr(self):
        if self.kind == "gd" and self.lr is None:
            raise ValueError("the gd trainer needs an explicit learning rate 'lr'")
        return self


class InitStateSection(_Section):
    pop_size: Optional[int] = Field(None, ge=2)
    lower: float = -3.0
    upper: float = 3.0
    max_iter: Optional[int] = Field(None, ge=0)
    seed: int = 0


class SweepSection(_Section):
    lambdas: list[float] = Field(min_length=1)
    seeds: list[int] = [0]

    @model_validator(mode="after")
    def _nonneg(self):
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError("lambdas must be nonnegative")
        return self


class MpcSection(_Section):
    model: str
    plant: Literal["cstr"] = "cstr"
    mismatch: dict[str, float] = {}
    steps: int = Field(200, ge=1)
    reference: list[tuple[int, float]] = [(0, 312.0)]
    measured_disturbance: list[tuple[int, float]] = [(0, 1.0)]
    p: int = Field(10, ge=1)
    W_du: float = Field(0.1, ge=0)
    W_y: float = Field(10.0, ge=0)
    u_min: float = 280.0
    u_max: float = 298.0
    strict_causal_skip: Optional[bool] = None
    disturbance: Literal["output", "none"] = "output"
    Qd: float = Field(1.0, gt=0)
    Qx: float = Field(0.01, ge=0)
    R: float = Field(0.01, gt=0)
    P0: float = Field(1.0, gt=0)
    noise_std: float = Field(0.0, ge=0)
    max_iter: int = Field(200, ge=1)
    tol: float = Field(1e-6, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be below u_max")
        for name in ("reference", "measured_disturbance"):
            points = getattr(self, name)
            if not points or min(step for step, _ in points) != 0:
                raise ValueError(f"{name} must start at step 0")
        return self


class RunConfig(_Section):
    seed: int = 0
    out: Optional[str] = None
    data: Optional[DataSection] = None
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    regularizers: RegSection = RegSection()
    trainer: TrainerSection = TrainerSection()
    init_state: InitStateSection = InitStateSection()
    sweep: Optional[SweepSection] = None
    mpc: Optional[MpcSection] = None


def load_config(path):
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: invalid configuration\n{exc}") from exc


def _require(cfg, *sections):
    for name in sections:
        if getattr(cfg, name) is None:
            raise ConfigError(f"config has no [{name}] section")


def build_spec(section, n_u, n_y):
    if section.kind == "lstm":
        return LstmSpec(n_u=n_u, n_y=n_y, n_h=section.n_h, hidden_y=tuple(section.hidden_y),
                        act_y=section.act_y, out_act=section.out_act,
                        strictly_causal=section.strictly_causal)
    return RnnSpec(n_u=n_u, n_y=n_y, n_x=section.n_x, hidden_x=tuple(section.hidden_x),
                   hidden_y=tuple(section.hidden_y), act_x=section.act_x, act_y=section.act_y,
                   out_act=section.out_act, strictly_causal=section.strictly_causal)


def build_loss(section):
    if section.kind == "ce":
        return CrossEntropyLoss(section.eps)
    return MSELoss(section.W)


def build_regs(section):
    regs = [L2Reg(rho_theta=section.rho_theta, rho_x=section.rho_x)]
    if section.l1 > 0:
        regs.append(L1Reg(section.l1))
    return tuple(regs)


def build_pswarm(section):
    return PswarmConfig(pop_size=section.pop_size, lower=section.lower, upper=section.upper,
                        max_iter=section.max_iter, seed=section.seed)


def generate(section, seed):
    if section.generator == "binary_linear":
        return data_mod.gen_binary_linear(sigma=section.sigma, N_total=section.N_total, seed=seed)
    if section.generator == "nonlinear_benchmark":
        return data_mod.gen_nonlinear_benchmark(seed=seed, N_total=section.N_total)
    ds = collect_plant_data(cstr_plant(), section.N_total, make_rng(seed),
                            v_range=CSTR_CAF_RANGE, noise_std=section.sigma)
    meta = {"generator": "cstr", "seed": seed, "sigma": section.sigma,
            "N_total": section.N_total, "n_train": section.N_total // 2}
    return data_mod.Dataset(ds.experiments, Ts=ds.Ts, meta=meta)


def prepare_data(cfg):
    """Training and test datasets in model units, plus the scaling used."""
    sec = cfg.data
    if sec.generator is not None:
        full = generate(sec, cfg.seed)
        train_ds, test_ds = split_train_test(full, sec.n_train)
    else:
        full = load_csv(sec.path, sec.n_u, sec.n_y)
        if sec.test_path is not None:
            train_ds, test_ds = full, load_csv(sec.test_path, sec.n_u, sec.n_y)
        elif full.n_experiments == 1:
            train_ds, test_ds = split_train_test(full, sec.n_train)
        else:
            train_ds, test_ds = full, None
    scaling = None
    if sec.standardize:
        train_ds, scaling = standardize(train_ds)
        if test_ds is not None:
            test_ds, _ = standardize(test_ds, scaling)
    return train_ds, test_ds, scaling


def run_training(cfg, train_ds, seed, l1=None):
    """Train per the config; returns ``(spec, theta, log)``."""
    spec = build_spec(cfg.model, train_ds.n_u, train_ds.n_y)
    rng = make_rng(seed)
    theta0 = init_params(spec, rng, cfg.model.init_scale)
    loss = build_loss(cfg.loss)
    reg_sec = cfg.regularizers if l1 is None else cfg.regularizers.model_copy(update={"l1": l1})
    regs = build_regs(reg_sec)
    tr = cfg.trainer
    if tr.kind == "ekf":
        ekf_cfg = EkfConfig(loss=loss, regs=regs, Qx=tr.Qx, Qtheta=tr.Qtheta, P0=tr.P0,
                            l1_mode=tr.l1_mode, epochs=tr.epochs, n_bar=tr.n_bar,
                            pswarm=build_pswarm(cfg.init_state))
        res = train(train_ds, spec, ekf_cfg, rng=rng, theta0=theta0)
    else:
        res = train_gd(train_ds, spec, mode=tr.mode, optimizer=tr.optimizer, epochs=tr.epochs,
                       rng=rng, lr=tr.lr, loss=loss, regs=regs, gamma=tr.gamma, M=tr.M,
                       theta0=theta0)
    return spec, res.theta, res.log


def evaluate(n_bar, spec, theta, ds, loss=None, pswarm=None):
    """Open-loop score after reconstructing each experiment's initial state."""
    _, Yhats = open_loop_predict(spec, theta, ds, loss, 0.0, n_bar, pswarm)
    return score(ds, Yhats), Yhats


def _fit_report(name, metric):
    kind, value = metric
    return f"{name} {kind}: {value:.4f}" if kind == "accuracy" else f"{name} {kind}: {value:.2f}"


def cmd_gen(cfg, out):
    _require(cfg, "data")
    if cfg.data.generator is None:
        raise ConfigError("gen needs data.generator")
    ds = generate(cfg.data, cfg.seed)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "data.csv")
    save_csv(ds, path)
    print(f"wrote {path} ({ds.n_samples} rows)")


def cmd_train(cfg, out):
    _require(cfg, "data")
    train_ds, test_ds, scaling = prepare_data(cfg)
    spec, theta, log = run_training(cfg, train_ds, cfg.seed)
    loss = build_loss(cfg.loss)
    pswarm = build_pswarm(cfg.init_state)
    train_metric, _ = evaluate(cfg.trainer.n_bar, spec, theta, train_ds, loss, pswarm)
    lines = [_fit_report("train", train_metric)]
    report = {"train": {train_metric[0]: float(train_metric[1])}}
    if test_ds is not None:
        test_metric, _ = evaluate(cfg.trainer.n_bar, spec, theta, test_ds, loss, pswarm)
        lines.append(_fit_report("test", test_metric))
        report["test"] = {test_metric[0]: float(test_metric[1])}
    os.makedirs(out, exist_ok=True)
    save_model(os.path.join(out, "model.json"), spec, theta,
               scaling.to_dict() if scaling is not None else None,
               {"trainer": cfg.trainer.kind, "seed": cfg.seed,
                "binary": list(train_ds.binary), "Ts": train_ds.Ts})
    save_log_csv(log, os.path.join(out, "log.csv"))
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print("\n".join(lines))


def cmd_eval(model_path, data_path, n_bar, out):
    spec, theta, scaling_dict, meta = load_model(model_path)
    ds = load_csv(data_path, spec.n_u, spec.n_y)
    if scaling_dict is not None:
        ds = data_mod.Scaling.from_dict(scaling_dict).apply(ds)
    rows = []
    for i, exp in enumerate(ds.experiments):
        sub = data_mod.Dataset((exp,), Ts=ds.Ts, binary=ds.binary)
        (kind, value), _ = evaluate(n_bar, spec, theta, sub)
        rows.append({"experiment": i, kind: float(value)})
        print(_fit_report(f"experiment {i}", (kind, value)))
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "eval.json"), "w") as fh:
            json.dump(rows, fh, indent=1, sort_keys=True)
            fh.write("\n")


def cmd_sweep_l1(cfg, out):
    _require(cfg, "data", "sweep")
    if cfg.trainer.kind != "ekf":
        raise ConfigError("sweep-l1 needs the ekf trainer")
    loss = build_loss(cfg.loss)
    pswarm = build_pswarm(cfg.init_state)
    prepared = {}
    rows = []
    for lam in cfg.sweep.lambdas:
        fits, zfs = [], []
        for seed in cfg.sweep.seeds:
            run_cfg = cfg.model_copy(update={"seed": seed})
            if seed not in prepared:
                prepared[seed] = prepare_data(run_cfg)
            train_ds, test_ds, _ = prepared[seed]
            spec, theta, _ = run_training(run_cfg, train_ds, seed, l1=lam)
            (_, fit), _ = evaluate(cfg.trainer.n_bar, spec, theta,
                                   test_ds if test_ds is not None else train_ds, loss, pswarm)
            fits.append(fit)
            zfs.append(zero_fraction(theta))
        rows.append((lam, float(np.mean(fits)), float(np.mean(zfs))))
        print(f"lambda {lam:g}: fit {rows[-1][1]:.4g} zero fraction {rows[-1][2]:.4f}")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write("lambda,fit,zero_fraction\n")
        for lam, fit, zf in rows:
            fh.write(f"{lam:.17g},{fit:.17g},{zf:.17g}\n")


def _piecewise(points):
    """Piecewise-constant signal from ``(step, value)`` breakpoints."""
    points = sorted(points)

    def r(k):
        val = points[0][1]
        for step, level in points:
            if k >= step:
                val = level
        return val
    return r


def cmd_mpc(cfg, out):
    _require(cfg, "mpc")
    sec = cfg.mpc
    spec, theta, scaling_dict, _ = load_model(sec.model)
    if spec.n_u not in (1, 2) or spec.n_y != 1:
        raise DimensionMismatch("the CSTR scenario needs a model with inputs [T_c] or [T_c, C_Af] "
                                "and one output")
    scaling = data_mod.Scaling.from_dict(scaling_dict) if scaling_dict is not None else None
    skip = spec.strictly_causal if sec.strict_causal_skip is None else sec.strict_causal_skip
    mpc_cfg = MpcConfig(p=sec.p, W_du=sec.W_du, W_y=sec.W_y, u_min=sec.u_min, u_max=sec.u_max,
                        strict_causal_skip=skip, max_iter=sec.max_iter, tol=sec.tol)
    if sec.disturbance == "output":
        dist = DisturbanceModel.output(spec.n_x, spec.n_y, sec.Qd)
    else:
        dist = DisturbanceModel.none(spec.n_x, spec.n_y)
    try:
        plant = cstr_plant(**sec.mismatch)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    controller = NmpcController(spec, theta, mpc_cfg, dist, scaling, n_mv=1)
    estimator = OffsetFreeEstimator(spec, theta, dist, Qx=sec.Qx, R=sec.R, P0=sec.P0)
    v = _piecewise(sec.measured_disturbance) if spec.n_u == 2 else None
    log = closed_loop_sim(plant, controller, estimator, _piecewise(sec.reference), sec.steps,
                          v=v, noise_std=sec.noise_std, rng=make_rng(cfg.seed))
    os.makedirs(out, exist_ok=True)
    save_trajectory_csv(log, os.path.join(out, "trajectory.csv"))
    ms = log.column("solve_ms") if log.rows else np.zeros(1)
    summary = {
        "steps": len(log.rows),
        "steady_state_error": steady_state_offset(log) if log.rows else None,
        "solve_ms_min": float(ms.min()), "solve_ms_mean": float(ms.mean()),
        "solve_ms_max": float(ms.max()),
        "solver_iters_max": int(log.column("solver_iters").max()) if log.rows else 0,
        "error": log.error,
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"steady-state |y - r|: {summary['steady_state_error']:.3g}; solve time "
          f"{summary['solve_ms_min']:.2f} to {summary['solve_ms_max']:.2f} ms "
          f"({summary['solve_ms_mean']:.2f} ms mean)")
    if log.error:
        raise ArithmeticError(log.error)


def build_parser():
    parser = argparse.ArgumentParser(prog="ekfrnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "sweep-l1", "mpc"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
    p = sub.add_parser("eval")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-bar", type=int, default=100)
    p.add_argument("--config", help="ignored except for validation")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            if args.config is not None:
                load_config(args.config)
            cmd_eval(args.model, args.data, args.n_bar, args.out)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        out = args.out or cfg.out or "out"
        commands = {"gen": cmd_gen, "train": cmd_train, "sweep-l1": cmd_sweep_l1, "mpc": cmd_mpc}
        commands[args.command](cfg, out)
    except (ConfigError, ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EkfRnnError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
