"""Command-line driver: make-data, train, sample, eval and sweep.

Exit codes: 0 success, 2 usage or input error, 3 training divergence,
4 incompatible configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets
from .config import ExperimentConfig, load_config
from .denoisers import ExactPosterior, MLPDenoiser, train
from .errors import DFMError, IncompatibleConfigError, NotAvailableError, TrainingDivergedError
from .evaluation import EvalReport, jump_stats, masking_elbo, sample_entropy, tv_distance
from .flows import TabularDistribution, make_flow
from .multimodal import JointDataset, JointMLP, JointSamplerConfig, JointTrainConfig, joint_generate, train_joint
from .rates import RatePlan
from .sampler import check_compatible, generate

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4
DISCRETE_FAMILIES = ("point_mass", "iid_uniform", "markov_chain", "banded_chain", "parity")


# -- loading ----------------------------------------------------------------------------


def load_dataset(path):
    obj = json.loads(Path(path).read_text())
    return JointDataset.from_dict(obj) if "coords" in obj else TabularDistribution.from_dict(obj)


def build_dataset(cfg: ExperimentConfig):
    if cfg.data.path is not None:
        data = load_dataset(cfg.data.path)
    else:
        params = dict(cfg.data.params)
        if cfg.data.family in DISCRETE_FAMILIES:
            params.setdefault("S", cfg.S)
            params.setdefault("D", cfg.D)
        if cfg.data.family in ("point_mass", "markov_chain", "gaussian_mixture_labeled"):
            params.setdefault("seed", cfg.seed)
        data = datasets.make_dataset(cfg.data.family, **params)
    if isinstance(data, TabularDistribution) and (data.S, data.D) != (cfg.S, cfg.D):
        raise ValueError(f"dataset has S={data.S}, D={data.D} but the config says S={cfg.S}, D={cfg.D}")
    return data


def build_denoiser(cfg: ExperimentConfig, data, flow):
    kind = cfg.denoiser.kind
    if kind == "exact":
        if not isinstance(data, TabularDistribution):
            raise NotAvailableError("the exact posterior needs a tabular dataset")
        return ExactPosterior(data, flow)
    if kind == "mixture":
        return datasets.mixture_heads(data)
    if cfg.denoiser.checkpoint is None:
        raise ValueError(f"denoiser kind {kind!r} needs a checkpoint")
    obj = json.loads(Path(cfg.denoiser.checkpoint).read_text())
    return MLPDenoiser.from_dict(obj) if kind == "mlp" else JointMLP.from_dict(obj)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.config_hash()}


# -- commands ----------------------------------------------------------------------------


def cmd_make_data(family: str, params: dict, out: str) -> Path:
    data = datasets.make_dataset(family, **params)
    data.save(out)
    return Path(out)


def cmd_train(cfg: ExperimentConfig):
    """Writes checkpoint.json and losses.csv into the output directory."""
    out = _out_dir(cfg)
    data = build_dataset(cfg)
    tc = cfg.train
    if isinstance(data, JointDataset):
        model = JointMLP(data.coords.shape[1], data.tokens.shape[1], data.S, cfg.denoiser.hidden, tc.seed)
        jc = JointTrainConfig(tc.learning_rate, tc.batch_size, tc.steps, tc.seed, tc.optimizer, tc.momentum,
                              tc.eps, tc.lr_decay, tc.divergence_threshold)
        model, losses = train_joint(model, data, jc)
    else:
        flow = make_flow(cfg.flow, cfg.S)
        model = MLPDenoiser(cfg.S, cfg.D, flow.n_states, cfg.denoiser.hidden, tc.seed)
        losses = train(model, data, flow, tc).losses
    (out / "checkpoint.json").write_text(json.dumps({**model.to_dict(), **_stamp(cfg)}))
    with (out / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(float(loss))])
    return out


def _parse_condition(text, width, dtype):
    if text is None:
        return None
    arr = np.asarray(json.loads(text), dtype=dtype).reshape(-1)
    if arr.size != width:
        raise ValueError(f"expected {width} conditioning values, got {arr.size}")
    return arr


def cmd_sample(cfg: ExperimentConfig, n: int, coords=None, tokens=None) -> Path:
    """Writes samples.json and, for token-only runs, trajectories.jsonl (one jump event per line)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    out = _out_dir(cfg)
    data = build_dataset(cfg)
    flow = make_flow(cfg.flow, cfg.S) if not isinstance(data, JointDataset) else make_flow("masking", data.S)
    plan = RatePlan(flow, cfg.sampler.eta)
    check_compatible(plan, cfg.sampler.scheme)
    den = build_denoiser(cfg, data, flow)
    if isinstance(data, JointDataset):
        sc = cfg.sampler
        jcfg = JointSamplerConfig(sc.dt, sc.eta, sc.scheme, sc.temperature, sc.eps, None, sc.seed)
        Dc, Da = data.coords.shape[1], data.tokens.shape[1]
        res = joint_generate(den, cfg.mode, n, Dc, Da, jcfg,
                             _parse_condition(coords, Dc, float), _parse_condition(tokens, Da, np.int64))
        body = {"coords": res.coords.tolist(), "tokens": res.tokens.tolist(), "S": data.S, "mode": cfg.mode}
    else:
        if cfg.mode != "cogenerate":
            raise IncompatibleConfigError(f"mode {cfg.mode!r} needs a joint dataset")
        res = generate(plan, den, n, cfg.D, cfg.sampler, record_events=True)
        res.trajectories.dump_jsonl(out / "trajectories.jsonl")
        body = {"samples": res.samples.tolist(), "S": cfg.S, "D": cfg.D}
    body.update(n=n, sampler=cfg.sampler.to_dict(), **_stamp(cfg))
    (out / "samples.json").write_text(json.dumps(body))
    return out


def jump_counts_from_jsonl(path, n: int) -> np.ndarray:
    """Total jumps per trajectory from a trajectories.jsonl file."""
    counts = np.zeros(n, dtype=np.int64)
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                counts[json.loads(line)["traj"]] += 1
    return counts


def cmd_eval(cfg: ExperimentConfig, samples_path: str, trajectories_path=None) -> EvalReport:
    """Writes report.json and report.csv with the configured metrics."""
    out = _out_dir(cfg)
    data = build_dataset(cfg)
    body = json.loads(Path(samples_path).read_text())
    report = EvalReport(cfg.seed, cfg.config_hash(), meta={"samples": str(samples_path), "n": body["n"]})
    joint = "coords" in body
    tokens = np.asarray(body["tokens"] if joint else body["samples"], dtype=np.int64)
    n = body["n"]
    for metric in cfg.eval.metrics:
        if metric == "tv":
            if joint or not isinstance(data, TabularDistribution):
                raise NotAvailableError("tv needs a tabular reference distribution")
            if n == 0:
                raise ValueError("tv needs at least one sample")
            report.add("tv", tv_distance(tokens, data), n=n)
        elif metric == "entropy":
            report.add("entropy_bits", sample_entropy(tokens), n=n)
        elif metric == "jumps":
            if trajectories_path is None:
                raise NotAvailableError("jump statistics need a trajectories file")
            js = jump_stats(jump_counts_from_jsonl(trajectories_path, n)[:, None])
            report.add("jumps_mean", js.mean, js.stderr, js.n)
            report.add("jumps_variance", js.variance, n=js.n)
        elif metric == "elbo":
            flow = make_flow(cfg.flow, cfg.S)
            den = build_denoiser(cfg, data, flow)
            est = masking_elbo(den, data, flow, cfg.eval.mc_samples, np.random.default_rng(cfg.seed))
            report.add("masking_elbo_bits_per_token", est.bits_per_token, est.stderr, est.n)
        elif metric == "label_freq":
            weights = (data.meta or {}).get("weights") if isinstance(data, JointDataset) else None
            if weights is None:
                raise NotAvailableError("label frequencies need a labelled mixture dataset")
            w = np.asarray(weights) / np.sum(weights)
            freq = np.bincount(tokens[:, 0], minlength=len(w)) / max(n, 1)
            report.add("label_freq_max_abs_error", float(np.max(np.abs(freq - w))), n=n)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    return report


SWEEP_COLUMNS = ("eta", "temperature", "tv", "entropy_bits", "jumps_mean", "jumps_stderr", "n", "seed",
                 "config_hash")


def cmd_sweep(cfg: ExperimentConfig) -> list:
    """One row per (eta, temperature) pair, written to sweep.csv and sweep.json."""
    out = _out_dir(cfg)
    data = build_dataset(cfg)
    if not isinstance(data, TabularDistribution):
        raise NotAvailableError("sweeps run on token-only datasets")
    flow = make_flow(cfg.flow, cfg.S)
    den = build_denoiser(cfg, data, flow)
    rows = []
    for eta in cfg.eval.sweep_eta:
        for temp in cfg.eval.sweep_temperature:
            sc = replace(cfg.sampler, eta=float(eta), temperature=float(temp))
            res = generate(RatePlan(flow, float(eta)), den, cfg.eval.n, cfg.D, sc)
            js = jump_stats(res.trajectories)
            rows.append({"eta": float(eta), "temperature": float(temp),
                         "tv": tv_distance(res.samples, data), "entropy_bits": sample_entropy(res.samples),
                         "jumps_mean": js.mean, "jumps_stderr": js.stderr, "n": cfg.eval.n, **_stamp(cfg)})
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    return rows


# -- argument parsing --------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. sampler.eta=5 (repeatable; wins over the file)")
    p.add_argument("--out", help="output directory (same as --set output_dir=...)")
    p.add_argument("--seed", type=int)


def _config_from(args, extra=()):
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"sampler.seed={args.seed}", f"train.seed={args.seed}"]
    overrides += list(extra)
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfm", description="Discrete flow model experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic dataset")
    p.add_argument("--family", required=True, choices=datasets.FAMILIES)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="family parameter, JSON-parsed when possible (repeatable)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train an MLP denoiser")
    _add_config_args(p)

    p = sub.add_parser("sample", help="generate samples and jump records")
    _add_config_args(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--eta", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--scheme")
    p.add_argument("--mode")
    p.add_argument("--coords", help="JSON list of conditioning coordinates (fix-coords)")
    p.add_argument("--tokens", help="JSON list of conditioning tokens (fix-tokens)")

    p = sub.add_parser("eval", help="compute metrics for a samples file")
    _add_config_args(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--trajectories")

    p = sub.add_parser("sweep", help="eta x temperature grid of sampling metrics")
    _add_config_args(p)
    return parser


def _sample_overrides(args):
    out = []
    for flag, key in (("eta", "sampler.eta"), ("dt", "sampler.dt"), ("temperature", "sampler.temperature")):
        if getattr(args, flag) is not None:
            out.append(f"{key}={getattr(args, flag)}")
    if args.scheme is not None:
        out.append(f"sampler.scheme={json.dumps(args.scheme)}")
    if args.mode is not None:
        out.append(f"mode={json.dumps(args.mode)}")
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "make-data":
            params = {}
            for item in args.param:
                key, _, raw = item.partition("=")
                try:
                    params[key] = json.loads(raw)
                except json.JSONDecodeError:
                    params[key] = raw
            print(cmd_make_data(args.family, params, args.out))
        elif args.command == "train":
            print(cmd_train(_config_from(args)))
        elif args.command == "sample":
            print(cmd_sample(_config_from(args, _sample_overrides(args)), args.n, args.coords, args.tokens))
        elif args.command == "eval":
            report = cmd_eval(_config_from(args), args.samples, args.trajectories)
            print(json.dumps(report.to_dict()["metrics"], indent=2))
        elif args.command == "sweep":
            for row in cmd_sweep(_config_from(args)):
                print(json.dumps(row))
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IncompatibleConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (DFMError, ValueError, TypeError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
