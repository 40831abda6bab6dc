"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
failure, 3 a verification check failed.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from . import persist
from .analytics import gaussian_oracle_suite, identity_suite
from .baselines import FinetuneConfig, EditPolicyConfig, finetune, residual_model, train_noise_cond_cost
from .exceptions import CoordiffError, NumericDivergenceError, PersistenceError, ValidationError
from .harness import (
    METHODS,
    RunConfig,
    closed_loop_episode,
    compute_metrics,
    cost_function,
    evaluate_method,
    generate_demos,
    generate_joint_demos,
    joint_features,
    make_sampler,
    record_costs,
    sample_initial_state,
    state_from_features,
)
from .score_net import ScoreMLP, TrainConfig

logger = logging.getLogger("coordiff")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
FINETUNE_METHODS = ("dpmd", "sdac", "expo")

# sections of the JSON config that are not RunConfig fields
_DEFAULT_SECTIONS = {
    "demos": {"episodes": 1000, "role_mix": 0.5, "joint_episodes": 200, "max_steps": 200},
    "train": {"hidden_sizes": [256, 256, 256], "batch_size": 256, "step_count": 20000, "learning_rate": 1e-3},
    "cost_model": {"hidden_sizes": [128, 128], "batch_size": 256, "step_count": 3000, "learning_rate": 1e-3},
    "finetune": {"iterations": 3, "rollouts_per_state": 32, "lam": 1.0, "states_per_step": 16,
                 "step_count": 500, "sample_steps": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path, overrides=None):
    """``(RunConfig, sections)`` from a JSON file; missing keys take defaults."""
    raw = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    sections = {}
    for name, default in _DEFAULT_SECTIONS.items():
        given = raw.pop(name, {}) or {}
        unknown = set(given) - set(default)
        if unknown:
            raise UsageError(f"unknown keys in [{name}]: {sorted(unknown)}")
        sections[name] = {**default, **given}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        run = RunConfig.from_dict(raw)
    except (TypeError, ValidationError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    return run, sections


def _load_models(paths):
    """Map each checkpoint to its role (``policy``, ``joint_policy``, ``cost_model``, ``dpmd``...)."""
    models = {}
    for path in paths or []:
        kind, header = persist.read_header(path)
        if kind == persist.KIND_COST_MODEL:
            models["cost_model"] = persist.load_cost_model(path)
        elif kind == persist.KIND_MODEL:
            model, tag = persist.load_model(path, return_method=True)
            models[tag] = model
        else:
            raise UsageError(f"{path} is not a model checkpoint")
    return models


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if path in (None, "-"):
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_gen_demos(args, run, sec):
    d = sec["demos"]
    rng = np.random.default_rng(run.seed)
    if args.joint:
        ds = generate_joint_demos(d["joint_episodes"], run.env, rng)
    else:
        ds = generate_demos(d["role_mix"], d["episodes"], run.env, rng, max_steps=d["max_steps"])
    persist.save_dataset(ds, args.out)
    logger.info("wrote %d records to %s", len(ds), args.out)
    print(json.dumps({"records": len(ds), **ds.meta}))
    return EXIT_OK


def cmd_train(args, run, sec):
    ds = persist.load_dataset(args.data)
    if args.target == "cost":
        c = sec["cost_model"]
        costs = record_costs(ds, run.cost, run.env)
        cfg = TrainConfig(batch_size=c["batch_size"], step_count=c["step_count"],
                          learning_rate=c["learning_rate"], seed=run.seed)
        model = train_noise_cond_cost(ds, costs, config=cfg, hidden_sizes=tuple(c["hidden_sizes"]))
        persist.save_cost_model(model, args.out)
        print(json.dumps({"records": len(ds), "final_loss": float(model.loss_trace_[-100:].mean())}))
        return EXIT_OK
    t = sec["train"]
    model = ScoreMLP(hidden_sizes=tuple(t["hidden_sizes"]), batch_size=t["batch_size"],
                     step_count=t["step_count"], learning_rate=t["learning_rate"], random_state=run.seed)
    model.fit(ds.actions, ds.states)
    tag = "joint_policy" if ds.meta.get("layout") == "agent-major" else "policy"
    persist.save_model(model, args.out, method=tag)
    print(json.dumps({"records": len(ds), "role": tag, "final_loss": float(model.loss_trace_[-100:].mean())}))
    return EXIT_OK


def cmd_finetune(args, run, sec):
    method = args.method or run.method
    if method not in FINETUNE_METHODS:
        raise UsageError(f"finetune needs --method in {FINETUNE_METHODS}")
    models = _load_models([args.model])
    base = models.get("joint_policy")
    if base is None:
        raise UsageError("finetune needs a joint policy checkpoint (train on joint demos)")
    ds = persist.load_dataset(args.data)
    f = sec["finetune"]
    rng = np.random.default_rng(run.seed)
    idx = rng.choice(len(ds), size=min(len(ds), 512), replace=False)
    states = [state_from_features(ds.states[i], run.env) for i in idx]
    cfg = FinetuneConfig(iterations=f["iterations"], rollouts_per_state=f["rollouts_per_state"], lam=f["lam"],
                         states_per_step=f["states_per_step"], sample_steps=f["sample_steps"],
                         train=TrainConfig(step_count=f["step_count"], seed=run.seed))
    start = residual_model(base, base.n_features_in_, base.cond_dim_, base.sigma_data_,
                           hidden_sizes=base.hidden_sizes, random_state=run.seed)
    model = finetune(method, start, states, cost_function(run.cost, run.env), cfg, rng, joint_features,
                     edit_cfg=EditPolicyConfig(lam=f["lam"]))
    persist.save_model(model, args.out, method=method)
    print(json.dumps({"method": method, "iterations": cfg.iterations}))
    return EXIT_OK


def cmd_rollout(args, run, sec):
    sampler = make_sampler(run, _load_models(args.model))
    rng = np.random.default_rng(run.seed)
    init = sample_initial_state(run.env, rng)
    res = closed_loop_episode(sampler, init, run, rng, keep_trace=True)
    if args.out:
        persist.save_trace(res.trace, args.out)
    summary = {"method": run.method, "success": res.success, "steps": res.steps,
               "completion_time": res.completion_time, "min_goal_distance": res.min_goal_distance,
               "collision_violations": res.collision_violations, "error": res.error}
    print(json.dumps(summary, default=float))
    return EXIT_RUNTIME if res.error else EXIT_OK


def cmd_eval(args, run, sec):
    models = _load_models(args.model)
    methods = args.method.split(",") if args.method else [run.method]
    tables = []
    for m in methods:
        r = replace(run, method=m)
        results = evaluate_method(make_sampler(r, models), r)
        tables.append(compute_metrics(results, m))
        print(json.dumps(tables[-1].to_dict(), default=float))
    if args.out:
        persist.save_metrics(tables, args.out)
    return EXIT_OK


def cmd_verify(args, run, sec):
    checks = identity_suite(run.seed) + gaussian_oracle_suite()
    failed = 0
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} value={c.value:.3e} tol={c.tolerance:.0e}")
        failed += not c.passed
    return EXIT_CHECK if failed else EXIT_OK


def cmd_inspect(args, run, sec):
    path = args.path
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == persist.MAGIC:
        kind, header = persist.read_header(path)
        _write_json({"kind": {1: "model", 2: "dataset", 3: "cost_model"}.get(kind, kind), **header}, None)
    else:
        tables = persist.load_metrics(path)
        _write_json([t.to_dict() for t in tables], None)
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--method", help="method name (eval accepts a comma-separated list)")
    common.add_argument("--out", help="output file")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded linear algebra for bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="coordiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen-demos", parents=[common], help="generate expert demonstrations")
    g.add_argument("--joint", action="store_true", help="two-agent oracle demos for joint baselines")
    t = sub.add_parser("train", parents=[common], help="train a score model or a cost model")
    t.add_argument("--data", required=True)
    t.add_argument("--target", choices=("policy", "cost"), default="policy")
    f = sub.add_parser("finetune", parents=[common], help="fine-tune a joint policy (dpmd, sdac, expo)")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True, help="joint demos providing the fine-tuning states")
    for name, helptext in (("rollout", "run one closed-loop episode"), ("eval", "evaluate methods")):
        r = sub.add_parser(name, parents=[common], help=helptext)
        r.add_argument("--model", action="append", default=[], help="checkpoint (repeatable)")
    sub.add_parser("verify", parents=[common], help="exact identity and oracle checks")
    i = sub.add_parser("inspect", parents=[common], help="print a checkpoint, dataset or metrics header")
    i.add_argument("path")
    return p


COMMANDS = {"gen-demos": cmd_gen_demos, "train": cmd_train, "finetune": cmd_finetune, "rollout": cmd_rollout,
            "eval": cmd_eval, "verify": cmd_verify, "inspect": cmd_inspect}


def _needs_out(args):
    return args.command in ("gen-demos", "train", "finetune") and not args.out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if _needs_out(args):
        parser.error(f"{args.command} requires --out")
    if args.method and args.command != "eval" and args.method not in METHODS:
        parser.error(f"unknown method {args.method!r}; expected one of {', '.join(METHODS)}")
    if args.command == "eval" and args.method:
        bad = [m for m in args.method.split(",") if m not in METHODS]
        if bad:
            parser.error(f"unknown method(s) {bad}; expected one of {', '.join(METHODS)}")
    overrides = {"seed": args.seed}
    if args.method and args.command != "eval":
        overrides["method"] = args.method
    limiter = None
    try:
        run, sections = load_config(args.config, overrides)
        if args.deterministic:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(1)
        return COMMANDS[args.command](args, run, sections)
    except UsageError as exc:
        print(f"coordiff: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"coordiff: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"coordiff: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PersistenceError, NumericDivergenceError, ArithmeticError, CoordiffError) as exc:
        print(f"coordiff: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
