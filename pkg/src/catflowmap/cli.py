"""Command-line entry point.

Exit codes: 0 success, 2 bad config or arguments, 3 training aborted,
4 checkpoint mismatch or unreadable checkpoint, 5 selfcheck failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .data import DATASETS, evaluate_states
from .evaluate import SAMPLER_KINDS, draw_states, nfe_sweep, sweep_table
from .guidance import LogisticReward, SMCConfig, ZeroReward, fit_logistic, guided_sample
from .predictor import Predictor, PredictorConfig
from .records import write_json, write_states
from .sampler import SAMPLERS, TimeGrid, default_sigma
from .selfcheck import run_selfcheck
from .trainer import run_training

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_CHECKPOINT, EXIT_SELFCHECK = 0, 2, 3, 4, 5

log = logging.getLogger("catflowmap")


class UsageError(Exception):
    pass


class CheckpointProblem(Exception):
    pass


def _fail(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.yaml", cfg.to_yaml())
    try:
        ckpt = run_training(cfg.model, cfg.train, cfg.loss, cfg.make_dataset(), cfg.to_dict(),
                            metrics_path=out / "metrics.jsonl", out_dir=out)
    except ad.NonFiniteLoss as exc:
        _fail(f"training aborted: {exc}")
        return EXIT_ABORT
    save_checkpoint(ckpt, out / "model.cfm")
    print(f"wrote {out / 'model.cfm'} (step {ckpt.step})")
    return EXIT_OK


def _load_model(args):
    expected = None
    if getattr(args, "config", None):
        expected = load_config(args.config).model.to_dict()
    try:
        ckpt = load_checkpoint(args.checkpoint, expected)
    except (OSError, CheckpointError) as exc:
        raise CheckpointProblem(str(exc)) from exc
    if ckpt.kind != "predictor":
        raise CheckpointProblem(f"expected a predictor checkpoint, got {ckpt.kind!r}")
    try:
        pcfg = PredictorConfig(**ckpt.config["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointProblem(f"unusable model config: {exc}") from exc
    params = ckpt.params if args.raw or ckpt.ema is None else ckpt.ema
    return ckpt, Predictor(pcfg, params)


def _dataset_from(ckpt_config: dict | None, args):
    if args.dataset:
        name, *pairs = args.dataset.split(":")
        if name not in DATASETS:
            raise UsageError(f"unknown dataset {name!r}")
        try:
            kw = {k: int(v) for k, _, v in (p.partition("=") for p in ",".join(pairs).split(",") if p)}
            return DATASETS[name](**kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad --dataset {args.dataset!r}: {exc}") from exc
    if ckpt_config and "dataset" in ckpt_config:
        spec = dict(ckpt_config["dataset"])
        return DATASETS[spec.pop("name")](**spec)
    raise UsageError("no dataset: pass --dataset name:key=value,...")


def _positive_nfe(values):
    for n in values:
        if n < 1:
            raise UsageError(f"nfe must be >= 1, got {n}")


def cmd_sample(args) -> int:
    _positive_nfe([args.nfe])
    ckpt, model = _load_model(args)
    D, K = model.cfg.D, model.cfg.K
    grid = TimeGrid.uniform(args.nfe)
    kw = {"sigma": default_sigma(args.sigma0)} if args.sampler == "sde" else {}
    res = SAMPLERS[args.sampler](model, args.seed, grid, args.n, D, K, mode=args.mode, **kw)
    write_states(args.out, res.states, K, {"sampler": args.sampler, "nfe": args.nfe,
                                           "seed": args.seed, "mode": args.mode,
                                           "step": ckpt.step})
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    samplers = args.sampler.split(",")
    for s in samplers:
        if s not in SAMPLER_KINDS:
            raise UsageError(f"unknown sampler {s!r}")
    nfes = [int(v) for v in args.nfe.split(",")]
    if samplers == ["truth"]:
        ckpt, model = None, None
        if args.checkpoint:
            ckpt, model = _load_model(args)
        ds = _dataset_from(ckpt.config if ckpt else None, args)
        rows = [evaluate_states(draw_states(None, ds, "truth", 0, args.n, args.seed), ds,
                                "truth", 0)]
    else:
        _positive_nfe(nfes)
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for model samplers")
        ckpt, model = _load_model(args)
        ds = _dataset_from(ckpt.config, args)
        if (ds.D, ds.K) != (model.cfg.D, model.cfg.K):
            raise CheckpointProblem("dataset shape does not match the checkpoint model")
        rows = nfe_sweep(model, ds, samplers, nfes, args.n, args.seed, args.mode)
    report = {"dataset": ds.name, "rows": [r.to_dict() for r in rows]}
    write_json(args.out, report)
    if args.table:
        atomic_write(args.table, sweep_table(rows))
    for r in rows:
        d = r.to_dict()
        print(f"{d['sampler']:8s} nfe={d['nfe']:<3} tv={d['tv']:.4f} validity={d['validity']:.4f}")
    return EXIT_OK


def cmd_guide(args) -> int:
    _positive_nfe([args.steps])
    ckpt, model = _load_model(args)
    ds = _dataset_from(ckpt.config, args)
    if args.zero_reward:
        reward = ZeroReward()
    elif args.reward:
        try:
            reward = LogisticReward.from_checkpoint(load_checkpoint(args.reward))
        except (OSError, CheckpointError, ValueError) as exc:
            raise CheckpointProblem(str(exc)) from exc
        reward.target, reward.scale = args.target, args.scale
    else:
        if ds.label is None:
            raise UsageError(f"dataset {ds.name} has no labels; pass --reward")
        rng = np.random.default_rng(args.seed)
        states = ds.sample_states(rng, 20000)
        reward = fit_logistic(np.eye(ds.K)[states], ds.label(states), target=args.target)
        reward.scale = args.scale
        if args.save_reward:
            save_checkpoint(reward.to_checkpoint(), args.save_reward)
    cfg = SMCConfig(sigma0=args.sigma0, lookahead=args.lookahead, ste=not args.no_ste,
                    mode=args.mode)
    res = guided_sample(model, reward, TimeGrid.uniform(args.steps), args.particles, args.n,
                        ds.D, ds.K, cfg, seed=args.seed)
    write_states(args.out, res.states, ds.K,
                 {"sampler": "smc", "steps": args.steps, "particles": args.particles,
                  "lookahead": args.lookahead, "seed": args.seed,
                  "resamples": int(res.n_resamples)}, rewards=res.rewards)
    rep = evaluate_states(res.states, ds, "smc", args.steps)
    print(f"wrote {args.n} guided samples to {args.out}; mean reward "
          f"{float(np.mean(res.rewards)):.4f}, validity {rep.validity:.4f}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(args.seed, echo=print)
    failed = [k for k, (ok, _) in results.items() if not ok]
    if failed:
        _fail("failed invariants: " + ", ".join(failed))
        return EXIT_SELFCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catflowmap", description="Categorical flow maps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a predictor from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    def model_args(q, need_checkpoint=True):
        q.add_argument("--checkpoint", required=need_checkpoint)
        q.add_argument("--config", help="verify the checkpoint against this config's model")
        q.add_argument("--raw", action="store_true", help="use raw params instead of EMA")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--n", type=int, default=10000)
        q.add_argument("--mode", choices=("argmax", "categorical"), default="argmax")
        q.add_argument("--dataset", help="override, e.g. parity:D=4,K=3")

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    model_args(s)
    s.add_argument("--sampler", choices=("flowmap", "euler", "sde"), default="flowmap")
    s.add_argument("--nfe", type=int, default=4)
    s.add_argument("--sigma0", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate samplers; comma lists sweep sampler x NFE")
    model_args(e, need_checkpoint=False)
    e.add_argument("--sampler", default="flowmap", help="flowmap,euler,sde or truth")
    e.add_argument("--nfe", default="1,2,4,8")
    e.add_argument("--out", required=True, help="JSON report path")
    e.add_argument("--table", help="tab-separated sweep table path")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("guide", help="reward-guided SMC sampling")
    model_args(g)
    g.add_argument("--reward", help="reward checkpoint; default fits a logistic model")
    g.add_argument("--save-reward", help="write the fitted reward checkpoint here")
    g.add_argument("--zero-reward", action="store_true")
    g.add_argument("--target", type=int, default=0)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--particles", type=int, default=16)
    g.add_argument("--steps", type=int, default=16)
    g.add_argument("--sigma0", type=float, default=1.0)
    g.add_argument("--lookahead", choices=("flowmap", "denoiser", "none"), default="flowmap")
    g.add_argument("--no-ste", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_guide)

    c = sub.add_parser("selfcheck", help="run the invariant suites")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        _fail(str(exc))
        return EXIT_CONFIG
    except CheckpointProblem as exc:
        _fail(str(exc))
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
