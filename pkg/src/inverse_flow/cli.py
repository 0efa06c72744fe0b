"""Command-line front end.

Every subcommand resolves a flat ``key=value`` configuration (defaults, then
``--config`` file, then flags and ``--set key=value``), writes the resolved
snapshot next to its outputs and exits with

* 0 on success,
* 2 on configuration errors (unknown key, bad value),
* 3 on data or file errors,
* 4 on numerical failures (non-finite state, CFL violation).

Outputs go to ``--out``; when absent, to ``$IF_OUT/<subcommand>`` or
``if_out/<subcommand>``.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Mapping, Sequence

import numpy as np

from .data import (CENTERS_8, NS_FAMILIES, LabeledPoints, gen_8gaussians, gen_gaussian_toy, gen_ns_pairs,
                   load_points, save_points)
from .evaluate import energy_distance, nearest_center_distance, nn_accuracy, psnr
from .flows import make_time_grid
from .nets import ConsistencyNet, load_net
from .noise import DomainError, fit_poisson_gaussian, noise_from_config
from .rng import substream
from .solvers import CFLError
from .tensorio import TensorFormatError, format_value, load_tensor, read_kv, save_tensor, write_kv
from .train import TrainConfig, denoise, train_gct, train_icm, train_ifm

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
NN_RESAMPLES = 10


class ConfigError(Exception):
    pass


def _train_defaults() -> dict:
    return {f"train.{k}": v for k, v in TrainConfig().to_dict().items()}


DEFAULTS: dict[str, dict] = {
    "grid": {"eps": 0.002, "T": 1.0, "rho": 7.0, "n": 11},
    "gen-data": {"dataset": "8gaussians", "seed": 0, "n_train": 8000, "n_test": 1600, "sigma": 0.15,
                 "tau": 1.0},
    "simulate-ns": {"seed": 0, "family": "stream", "count": 4, "M": 64, "nu": 1e-3, "t_end": 0.1, "dt": 1e-3,
                    "cfl": 0.45, "n_modes": 20},
    "train": {"seed": 0, "method": "icm", "data": "", "noise.kind": "gaussian", **_train_defaults()},
    "denoise": {"seed": 0, "checkpoint": "", "input": "", "ode_n": "none"},
    "fit-noise": {"seed": 0, "input": ""},
    "eval": {"seed": 0, "pred": "", "ref": "", "centers": "none", "max_val": "auto"},
}


def resolve_config(command: str, file_path: str | None, overrides: Mapping[str, object]) -> dict[str, str]:
    """Merge defaults < file < overrides; every value is returned as a string."""
    cfg = {k: format_value(v) for k, v in DEFAULTS[command].items()}
    layers = []
    if file_path:
        try:
            layers.append(read_kv(file_path))
        except OSError as e:
            raise FileNotFoundError(f"config file {file_path}: {e.strerror}") from None
        except ValueError as e:
            raise ConfigError(f"{file_path}: {e}") from None
    layers.append({k: format_value(v) for k, v in overrides.items() if v is not None})
    for layer in layers:
        for k, v in layer.items():
            if k not in cfg and not (command == "train" and k.startswith("noise.")):
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = v
    return cfg


def _get(cfg, key, typ):
    try:
        v = cfg[key]
        if typ is None:
            return None if v.lower() == "none" else v
        return typ(v)
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for {key!r}: {cfg[key]!r}") from None


def _opt_int(v: str):
    return None if v.lower() == "none" else int(v)


def _outdir(args, command: str) -> str:
    if args.out:
        out = args.out
    else:
        out = os.path.join(os.environ.get("IF_OUT", "if_out"), command)
    os.makedirs(out, exist_ok=True)
    return out


def _write_config(out: str, command: str, cfg: Mapping[str, str]) -> str:
    path = os.path.join(out, f"{command}.config")
    write_kv(path, dict(sorted(cfg.items())))
    return path


def _parse_sets(items: Sequence[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# subcommands

def cmd_grid(args) -> int:
    cfg = resolve_config("grid", args.config, {"eps": args.eps, "T": args.T, "rho": args.rho, "n": args.n,
                                               **_parse_sets(args.set)})
    try:
        grid = make_time_grid(_get(cfg, "eps", float), _get(cfg, "T", float), _get(cfg, "rho", float),
                              _get(cfg, "n", int))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    lines = ["index,t"] + [f"{i},{format_value(float(t))}" for i, t in enumerate(grid.values, 1)]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = _outdir(args, "grid")
        with open(os.path.join(out, "grid.csv"), "w") as f:
            f.write(text)
        _write_config(out, "grid", cfg)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    over = {"dataset": args.dataset, "seed": args.seed, "n_train": args.n_train, "n_test": args.n_test,
            "sigma": args.sigma, **_parse_sets(args.set)}
    cfg = resolve_config("gen-data", args.config, over)
    out = _outdir(args, "gen-data")
    seed = _get(cfg, "seed", int)
    n_train, n_test = _get(cfg, "n_train", int), _get(cfg, "n_test", int)
    sigma = _get(cfg, "sigma", float)
    rng = substream(seed, "gen-data", cfg["dataset"])
    if cfg["dataset"] == "8gaussians":
        train, test = gen_8gaussians(n_train, n_test, sigma, rng)
        for name, lp in (("train", train), ("test", test)):
            save_points(os.path.join(out, f"{name}_noisy.iftn"), lp)
            clean = CENTERS_8[np.asarray(lp.labels)].astype(np.float32)
            save_points(os.path.join(out, f"{name}_clean.iftn"), LabeledPoints(clean, lp.labels))
    elif cfg["dataset"] == "gaussian-toy":
        tau = _get(cfg, "tau", float)
        for name, n in (("train", n_train), ("test", n_test)):
            x0, x1 = gen_gaussian_toy(n, tau, sigma, rng)
            save_tensor(os.path.join(out, f"{name}_clean.iftn"), x0)
            save_tensor(os.path.join(out, f"{name}_noisy.iftn"), x1)
    else:
        raise ConfigError(f"unknown dataset {cfg['dataset']!r} (choose 8gaussians or gaussian-toy)")
    _write_config(out, "gen-data", cfg)
    print(f"wrote {cfg['dataset']} to {out}")
    return EXIT_OK


def cmd_simulate_ns(args) -> int:
    over = {"family": args.family, "seed": args.seed, "count": args.count, "M": args.M, **_parse_sets(args.set)}
    cfg = resolve_config("simulate-ns", args.config, over)
    out = _outdir(args, "simulate-ns")
    M, count = _get(cfg, "M", int), _get(cfg, "count", int)
    nu, t_end, dt = _get(cfg, "nu", float), _get(cfg, "t_end", float), _get(cfg, "dt", float)
    cfl = _get(cfg, "cfl", float)
    if cfg["family"] not in NS_FAMILIES:
        raise ConfigError(f"unknown family {cfg['family']!r} (choose {' or '.join(NS_FAMILIES)})")
    rng = substream(_get(cfg, "seed", int), "simulate-ns", cfg["family"])
    x0, x1 = gen_ns_pairs(count, cfg["family"], rng, M, nu, t_end, dt, cfl, _get(cfg, "n_modes", int))
    save_tensor(os.path.join(out, "initial.iftn"), x0)
    save_tensor(os.path.join(out, "final.iftn"), x1)
    write_kv(os.path.join(out, "fields.meta"), {"M": M, "t": t_end, "nu": nu, "count": count})
    _write_config(out, "simulate-ns", cfg)
    print(f"wrote {count} {cfg['family']} simulations to {out}")
    return EXIT_OK


TRAINERS = {"ifm": train_ifm, "icm": train_icm, "gct": train_gct}


def cmd_train(args) -> int:
    over = {"method": args.method, "seed": args.seed, "data": args.data, **_parse_sets(args.set)}
    if args.epochs is not None:
        over["train.epochs"] = args.epochs
    cfg = resolve_config("train", args.config, over)
    out = _outdir(args, "train")
    method = cfg["method"]
    if method not in TRAINERS:
        raise ConfigError(f"unknown method {method!r}")
    tkeys = {k[len("train."):]: v for k, v in cfg.items() if k.startswith("train.")}
    tkeys["seed"] = cfg["seed"]
    try:
        tcfg = TrainConfig.from_dict(tkeys)
        proc = noise_from_config(cfg)
    except KeyError as e:
        raise ConfigError(f"unknown config key {e.args[0]!r}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not cfg["data"]:
        raise ConfigError("missing required key 'data'")
    data = load_points(cfg["data"]).points
    net, report = TRAINERS[method](data, proc, tcfg)
    ckpt = os.path.join(out, "model.ckpt")
    meta = {"method": method, "grid.eps": tcfg.eps, "grid.T": tcfg.horizon, "grid.rho": tcfg.rho,
            "grid.n": tcfg.n_grid, "grid.ode_n": tcfg.ode_n or tcfg.n_grid}
    meta.update(proc.to_config())
    net.save(ckpt, meta)
    report.checkpoint = "model.ckpt"
    summary = report.summary()
    summary.pop("wall_clock_s")
    write_kv(os.path.join(out, "train_summary.txt"), summary)
    report.write_losses(os.path.join(out, "train_loss.csv"))
    _write_config(out, "train", cfg)
    print(f"{method}: {len(report.losses)} epochs, final loss {report.losses[-1]:.6g}, "
          f"{report.wall_clock:.1f}s; checkpoint {ckpt}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    over = {"checkpoint": args.checkpoint, "input": args.input, "seed": args.seed, **_parse_sets(args.set)}
    cfg = resolve_config("denoise", args.config, over)
    out = _outdir(args, "denoise")
    if not cfg["checkpoint"] or not cfg["input"]:
        raise ConfigError("denoise needs 'checkpoint' and 'input'")
    net, meta = load_net(cfg["checkpoint"])
    lp = load_points(cfg["input"])
    grid = None
    if not isinstance(net, ConsistencyNet):
        ode_n = _opt_int(cfg["ode_n"]) or int(meta.get("grid.ode_n", 11))
        grid = make_time_grid(float(meta.get("grid.eps", 0.002)), float(meta.get("grid.T", 1.0)),
                              float(meta.get("grid.rho", 7.0)), ode_n)
    x0 = denoise(net, lp.points, grid)
    path = os.path.join(out, "denoised.iftn")
    save_points(path, LabeledPoints(x0, lp.labels))
    _write_config(out, "denoise", cfg)
    print(f"denoised {len(lp)} rows -> {path}")
    return EXIT_OK


def cmd_fit_noise(args) -> int:
    cfg = resolve_config("fit-noise", args.config, {"input": args.input, "seed": args.seed,
                                                   **_parse_sets(args.set)})
    out = _outdir(args, "fit-noise")
    img = load_tensor(cfg["input"])
    if img.ndim != 2:
        raise ValueError(f"fit-noise expects a 2-D image tensor, got shape {img.shape}")
    fit = fit_poisson_gaussian(img)
    write_kv(os.path.join(out, "noise_fit.txt"), fit.to_dict())
    _write_config(out, "fit-noise", cfg)
    print(f"gamma={fit.gamma:.4f} sigma_u={fit.sigma_u:.6g} sigma_w={fit.sigma_w:.6g}")
    return EXIT_OK


def _resampled_nn_accuracy(points, labels, seed: int, reps: int = NN_RESAMPLES, frac: float = 0.8):
    """Mean and standard error of nn_accuracy over seeded random subsets."""
    labels = np.asarray(labels)
    n = points.shape[0]
    k = max(2, int(round(frac * n)))
    vals = []
    for r in range(reps):
        idx = substream(seed, "eval", "nn", str(r)).choice(n, k, replace=False)
        vals.append(nn_accuracy(points[idx], labels[idx]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(reps))


def cmd_eval(args) -> int:
    over = {"pred": args.pred, "ref": args.ref, "centers": args.centers, "seed": args.seed,
            **_parse_sets(args.set)}
    cfg = resolve_config("eval", args.config, over)
    out = _outdir(args, "eval")
    if not cfg["pred"] or not cfg["ref"]:
        raise ConfigError("eval needs 'pred' and 'ref'")
    pred, ref = load_points(cfg["pred"]), load_points(cfg["ref"])
    if pred.points.shape != ref.points.shape:
        raise ValueError(f"pred and ref shapes differ: {pred.points.shape} vs {ref.points.shape}")
    ctx = os.path.basename(cfg["pred"])
    P, R = pred.points.astype(np.float64), ref.points.astype(np.float64)
    if cfg["max_val"] == "auto":
        max_val = float(R.max() - R.min()) or 1.0
    else:
        max_val = _get(cfg, "max_val", float)
    rows = [("energy_distance", energy_distance(P, R)),
            ("mse", float(np.mean((P - R) ** 2))),
            ("psnr", psnr(P, R, max_val))]
    if pred.labels is not None and P.shape[0] >= 4:
        mean, se = _resampled_nn_accuracy(P, pred.labels, _get(cfg, "seed", int))
        rows += [("nn_accuracy", mean), ("nn_accuracy_se", se)]
    if cfg["centers"] == "8gaussians":
        rows.append(("mean_center_distance", float(nearest_center_distance(P, CENTERS_8).mean())))
    elif cfg["centers"] != "none":
        raise ConfigError(f"unknown centers {cfg['centers']!r}")
    path = os.path.join(out, "metrics.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value", "context"])
        for name, value in rows:
            w.writerow([name, format_value(float(value)), ctx])
    _write_config(out, "eval", cfg)
    for name, value in rows:
        print(f"{name},{value:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inverse-flow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        return sp

    g = common(sub.add_parser("grid", help="print the time grid as CSV"))
    g.add_argument("--eps", type=float)
    g.add_argument("--T", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--n", type=int)
    g.set_defaults(func=cmd_grid)

    g = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    g.add_argument("dataset", nargs="?", choices=["8gaussians", "gaussian-toy"])
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--sigma", type=float)
    g.set_defaults(func=cmd_gen_data)

    g = common(sub.add_parser("simulate-ns", help="simulate Navier-Stokes initial/final field pairs"))
    g.add_argument("--family", choices=["stream", "shear"])
    g.add_argument("--count", type=int)
    g.add_argument("--M", type=int)
    g.set_defaults(func=cmd_simulate_ns)

    g = common(sub.add_parser("train", help="train an inverse flow model"))
    g.add_argument("method", choices=sorted(TRAINERS))
    g.add_argument("--data")
    g.add_argument("--epochs", type=int)
    g.set_defaults(func=cmd_train)

    g = common(sub.add_parser("denoise", help="apply a trained model"))
    g.add_argument("--checkpoint")
    g.add_argument("--input")
    g.set_defaults(func=cmd_denoise)

    g = common(sub.add_parser("fit-noise", help="fit a Poisson-Gaussian noise model to an image"))
    g.add_argument("--input")
    g.set_defaults(func=cmd_fit_noise)

    g = common(sub.add_parser("eval", help="compare predictions with a reference"))
    g.add_argument("--pred")
    g.add_argument("--ref")
    g.add_argument("--centers", choices=["none", "8gaussians"])
    g.set_defaults(func=cmd_eval)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TensorFormatError, FileNotFoundError, IsADirectoryError, PermissionError, DomainError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, CFLError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
