"""Command-line front end.

Every subcommand writes a resolved-config echo next to its output. Passing
that file back through ``--config`` reruns the command with identical
options, so outputs can be regenerated bit for bit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from .errors import (
    DivergenceError,
    IqlLabError,
    ParameterError,
    UnsupportedLayoutError,
    UsageError,
)
from .expectile import fit_conditional_expectile, scalar_expectile
from . import approx
from .learner import (
    IqlConfig,
    finetune_online,
    load_checkpoint,
    maze_config,
    normalized,
    reference_returns,
    save_checkpoint,
    sweep_tau,
    train_offline,
    train_onestep_baseline,
)
from .mdp import TabularMdp, TabularPolicy, make_random_mdp, make_umaze, rollout
from .oracle import (
    expectile_fixed_point,
    greedy_policy,
    policy_evaluation,
    policy_return,
    support_value_iteration,
    value_iteration,
)

PROG = "iql-lab"
SEED_ENV = "IQL_LAB_SEED"

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _seed_list(text):
    """``0-9`` or ``1,4,7``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected seeds like 0-9 or 1,2,3, got {text!r}")


# -- environment options ---------------------------------------------------------------------

def _add_env_args(p):
    g = p.add_argument_group("environment")
    g.add_argument("--env", choices=("umaze", "random"), default="umaze")
    g.add_argument("--noise", type=float, default=0.25, help="umaze noise probability")
    g.add_argument("--noise-mode", choices=("random_action", "random_state"),
                   default="random_action")
    g.add_argument("--goal-reward", type=float, default=10.0)
    g.add_argument("--discount", type=float, default=0.9)
    g.add_argument("--n-states", type=int, default=10, help="random MDP size")
    g.add_argument("--n-actions", type=int, default=4, help="random MDP action count")
    g.add_argument("--mdp-seed", type=int, default=0, help="random MDP seed")
    g.add_argument("--mdp-file", default=None, help="JSON MDP document (overrides --env)")


def build_mdp(opts: dict) -> TabularMdp:
    if opts.get("mdp_file"):
        return TabularMdp.from_json(Path(opts["mdp_file"]).read_text(encoding="utf-8"))
    if opts["env"] == "umaze":
        return make_umaze(opts["noise"], opts["goal_reward"], opts["discount"],
                          opts["noise_mode"])
    return make_random_mdp(opts["n_states"], opts["n_actions"], opts["mdp_seed"])


def _named_policy(mdp: TabularMdp, name: str) -> TabularPolicy:
    if name == "uniform":
        return TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    if name == "optimal":
        _, q = value_iteration(mdp)
        return greedy_policy(q)
    raise UsageError(f"unknown mixture policy {name!r} (use optimal or uniform)")


def _parse_mix(text: str):
    out = []
    for part in text.split(","):
        try:
            name, count = part.split(":")
            out.append((name.strip(), int(count)))
        except ValueError:
            raise UsageError(f"bad --mix entry {part!r}; expected name:count") from None
    return out


# -- learner options -------------------------------------------------------------------------

_CONFIG_FLAGS = {
    "tau": float, "beta": float, "lr_v": float, "lr_q": float, "lr_pi": float,
    "polyak_rate": float, "td_steps": int, "policy_steps": int, "batch_size": int,
    "adv_clip": float, "max_episode_steps": int, "log_every": int,
}


def _add_learner_args(p):
    g = p.add_argument_group("learner (defaults: tabular maze preset)")
    for name, typ in _CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), type=typ, default=None)
    g.add_argument("--kind", choices=approx.KINDS, default=None)
    g.add_argument("--hidden", type=lambda t: [int(x) for x in t.split(",")], default=None)
    g.add_argument("--double-q", choices=("auto", "on", "off"), default="auto")
    g.add_argument("--loss-variant", choices=("expectile", "quantile"), default=None)
    g.add_argument("--critic-schedule", choices=approx.SCHEDULES, default=None)
    g.add_argument("--preset", choices=("maze", "paper"), default="maze",
                   help="maze: tabular preset; paper: large-scale defaults (lr 3e-4, polyak 0.005)")


def config_from_opts(opts: dict) -> IqlConfig:
    overrides = {k: opts[k] for k in _CONFIG_FLAGS if opts.get(k) is not None}
    for k in ("kind", "loss_variant", "critic_schedule"):
        if opts.get(k) is not None:
            overrides[k] = opts[k]
    if opts.get("hidden") is not None:
        overrides["hidden"] = tuple(opts["hidden"])
    dq = opts.get("double_q", "auto")
    if dq != "auto":
        overrides["double_q"] = dq == "on"
    overrides["seed"] = opts["seed"]
    if opts.get("preset", "maze") == "paper":
        return IqlConfig(**overrides)
    return maze_config(**overrides)


# -- output helpers --------------------------------------------------------------------------

def _fill_learner_opts(opts: dict) -> None:
    """Replace unset learner flags with the values the preset resolves to,
    so the echo file spells out the full configuration."""
    try:
        config = config_from_opts(opts)
    except (ParameterError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    for key in _CONFIG_FLAGS:
        opts[key] = getattr(config, key)
    opts["kind"] = config.kind
    opts["hidden"] = list(config.hidden)
    opts["loss_variant"] = config.loss_variant
    opts["critic_schedule"] = config.critic_schedule
    opts["double_q"] = "on" if config.use_double_q else "off"


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _echo(opts: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(opts, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(opts) -> Path:
    d = Path(opts["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def emit_heatmap(values, mdp: TabularMdp, path) -> None:
    """CSV ``state,row,col,value``; ``row`` is the cell's y and ``col`` its x."""
    if mdp.cells is None:
        raise UnsupportedLayoutError("heatmaps need an MDP with grid cells")
    values = np.asarray(values, dtype=float)
    if values.shape != (mdp.n_states,):
        raise ParameterError(f"expected {mdp.n_states} values, got shape {values.shape}")
    rows = [(s, y, x, _fmt(values[s])) for s, (x, y) in enumerate(mdp.cells)]
    _write_csv(path, ["state", "row", "col", "value"], rows)


def read_heatmap(path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["value"]) for r in sorted(rows, key=lambda r: int(r["state"]))])


# -- subcommands -----------------------------------------------------------------------------

def cmd_gen_data(opts):
    mdp = build_mdp(opts)
    mix = _parse_mix(opts["mix"])
    mixture = [(_named_policy(mdp, name), count) for name, count in mix]
    ds = data_mod.generate_dataset(mdp, mixture, opts["max_steps"], opts["seed"],
                                   names=[n for n, _ in mix])
    data_mod.save(ds, opts["out"])
    _echo(opts, Path(opts["out"] + ".config.json"))
    print(f"wrote {len(ds)} transitions in {len(ds.episode_starts)} episodes to {opts['out']}")


def cmd_train(opts):
    mdp = build_mdp(opts)
    ds = data_mod.load(opts["data"])
    config = config_from_opts(opts)
    trainer = train_onestep_baseline if opts["algo"] == "onestep" else train_offline
    learner, metrics = trainer(config, ds, mdp)
    out = _out_dir(opts)
    save_checkpoint(learner, config, out / "checkpoint.json")
    (out / "metrics.jsonl").write_text(metrics.to_jsonl(), encoding="utf-8")
    _echo(opts, out / "resolved_config.json")
    j = policy_return(mdp, learner.greedy_policy())
    print(json.dumps({"exact_return": j, "checkpoint": str(out / "checkpoint.json")}))


def _summary(mdp, learner, ds, episodes, seed):
    j = policy_return(mdp, learner.greedy_policy())
    out = {"exact_return": j}
    if ds is not None:
        refs = reference_returns(mdp, ds)
        out["normalized_return"] = normalized(j, refs)
        out["support_optimal_return"] = refs["j_support_opt"]
        out["uniform_return"] = refs["j_uniform"]
    if episodes > 0:
        rng = np.random.default_rng(seed)
        pol = learner.greedy_policy()
        rets = [rollout(mdp, pol, rng, 1000).discounted_return(mdp.discount)
                for _ in range(episodes)]
        out["mc_return"] = float(np.mean(rets))
        out["mc_stderr"] = float(np.std(rets, ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
        out["mc_episodes"] = episodes
    return out


def cmd_eval(opts):
    mdp = build_mdp(opts)
    learner, _ = load_checkpoint(opts["checkpoint"])
    ds = data_mod.load(opts["data"]) if opts.get("data") else None
    result = _summary(mdp, learner, ds, opts["episodes"], opts["seed"])
    text = json.dumps(result, sort_keys=True)
    if opts.get("out"):
        Path(opts["out"]).write_text(text + "\n", encoding="utf-8")
        _echo(opts, Path(opts["out"] + ".config.json"))
    print(text)


def cmd_sweep_tau(opts):
    mdp = build_mdp(opts)
    ds = data_mod.load(opts["data"])
    template = config_from_opts(opts)
    rows = sweep_tau(template, opts["taus"], ds, mdp, opts["seeds"])
    header = list(rows[0])
    _write_csv(opts["out"], header,
               [[r[k] if k == "n_seeds" else _fmt(r[k]) for k in header] for r in rows])
    _echo(opts, Path(opts["out"] + ".config.json"))
    for r in rows:
        print(f"tau={r['tau']:.3f} mean_return={r['mean_return']:.4f} "
              f"normalized={r['mean_normalized']:.4f}")


def cmd_heatmap(opts):
    mdp = build_mdp(opts)
    source = opts["source"]
    if source == "checkpoint":
        if not opts.get("checkpoint"):
            raise UsageError("--source checkpoint needs --checkpoint")
        learner, _ = load_checkpoint(opts["checkpoint"])
        values = learner.value_table()
    elif source == "optimal":
        values, _ = value_iteration(mdp)
    else:
        if not opts.get("data"):
            raise UsageError(f"--source {source} needs --data")
        ds = data_mod.load(opts["data"])
        mu = data_mod.empirical_behavior(ds, mdp.n_states, mdp.n_actions)
        if source == "support":
            support = data_mod.empirical_support(ds, mdp.n_states, mdp.n_actions)
            values, _ = support_value_iteration(mdp, support)
        elif source == "behavior":
            values, _ = policy_evaluation(mdp, mu)
        else:
            values, _ = expectile_fixed_point(mdp, mu, opts["tau"] or 0.95)
    emit_heatmap(values, mdp, opts["out"])
    _echo(opts, Path(opts["out"] + ".config.json"))
    print(f"wrote {mdp.n_states} cells to {opts['out']}")


def demo_expectile_rows(taus, seed, n_x=8, n_per_x=400, steps=4000, lr=0.01):
    """Fit conditional expectiles of ``y | x`` with a table over ``x`` bins.

    Each ``x`` carries a bimodal ``y``: a narrow mode near 0 and a wider one
    whose location grows with ``x``. Rows are ``(x, tau, fitted, exact)``
    where ``exact`` is the weighted expectile of that slice.
    """
    rng = np.random.default_rng(seed)
    xs = np.repeat(np.arange(n_x), n_per_x)
    high = rng.random(xs.size) < 0.3
    ys = np.where(high, 1.0 + 0.5 * xs + 0.3 * rng.standard_normal(xs.size),
                  0.1 * rng.standard_normal(xs.size))
    pairs = list(zip(xs.tolist(), ys.tolist()))
    rows = []
    for tau in taus:
        model = approx.init("table", n_x, 1)
        fit_rng = np.random.default_rng([seed, int(round(tau * 1e6))])
        model = fit_conditional_expectile(pairs, tau, model, steps, lr, fit_rng, batch_size=256)
        fitted = approx.evaluate(model, np.arange(n_x))[:, 0]
        for x in range(n_x):
            exact = scalar_expectile(ys[xs == x].tolist(), tau)
            rows.append((x, tau, float(fitted[x]), exact))
    return rows


def cmd_demo_expectile(opts):
    rows = demo_expectile_rows(opts["taus"], opts["seed"], steps=opts["steps"], lr=opts["lr"])
    _write_csv(opts["out"], ["x", "tau", "fitted", "exact"],
               [(x, _fmt(t), _fmt(f), _fmt(e)) for x, t, f, e in rows])
    _echo(opts, Path(opts["out"] + ".config.json"))
    worst = max(abs(f - e) for _, _, f, e in rows)
    print(f"wrote {len(rows)} rows to {opts['out']}; max |fitted - exact| = {worst:.4f}")


def cmd_finetune(opts):
    mdp = build_mdp(opts)
    learner, config = load_checkpoint(opts["checkpoint"])
    ds = data_mod.load(opts["data"])
    rng = np.random.default_rng([opts["seed"], 3])
    learner, metrics, buffer = finetune_online(
        learner, config, mdp, ds, opts["env_steps"], opts["eps"], rng,
        log_every=opts["log_every"] or 0,
    )
    out = _out_dir(opts)
    save_checkpoint(learner, config, out / "checkpoint.json")
    data_mod.save(buffer.to_dataset(), out / "buffer.jsonl")
    metrics.records.append({"phase": "summary", **{
        k: metrics.meta[k] for k in ("return_before", "return_after", "env_steps", "buffer_size")
    }})
    (out / "metrics.jsonl").write_text(metrics.to_jsonl(), encoding="utf-8")
    _echo(opts, out / "resolved_config.json")
    print(json.dumps({"return_before": metrics.meta["return_before"],
                      "return_after": metrics.meta["return_after"]}))


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Implicit Q-learning on tabular MDPs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None,
                       help="resolved-config echo to rerun; explicit flags still override")
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (default: ${SEED_ENV} or 0)")
        return p

    p = add("gen-data", cmd_gen_data, "Generate an offline dataset (JSON-Lines).")
    _add_env_args(p)
    p.add_argument("--mix", default="optimal:1,uniform:99")
    p.add_argument("--max-steps", type=int, default=100)
    p.add_argument("--out", default="dataset.jsonl")

    p = add("train", cmd_train, "Train IQL (or the one-step baseline) on a dataset.")
    _add_env_args(p)
    _add_learner_args(p)
    p.add_argument("--data", required=False, default=None)
    p.add_argument("--algo", choices=("iql", "onestep"), default="iql")
    p.add_argument("--out", default="run")

    p = add("eval", cmd_eval, "Exact and Monte-Carlo return of a checkpoint's policy.")
    _add_env_args(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="dataset for the normalized return")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--out", default=None)

    p = add("sweep-tau", cmd_sweep_tau, "Train across taus and seeds; write a CSV table.")
    _add_env_args(p)
    _add_learner_args(p)
    p.add_argument("--data", default=None)
    p.add_argument("--taus", type=_float_list, default=[0.5, 0.7, 0.9, 0.95])
    p.add_argument("--seeds", type=_seed_list, default=list(range(10)))
    p.add_argument("--out", default="sweep.csv")

    p = add("heatmap", cmd_heatmap, "Per-cell state values as CSV.")
    _add_env_args(p)
    p.add_argument("--source", choices=("checkpoint", "optimal", "support", "behavior", "expectile"),
                   default="checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", default="heatmap.csv")

    p = add("demo-expectile", cmd_demo_expectile, "Conditional expectile regression demo (CSV).")
    p.add_argument("--taus", type=_float_list, default=[0.1, 0.5, 0.9, 0.99])
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", default="expectiles.csv")

    p = add("finetune", cmd_finetune, "Online finetuning from a checkpoint.")
    _add_env_args(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="offline dataset that seeds the replay buffer")
    p.add_argument("--env-steps", type=int, default=5000)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", default="finetune")
    return parser


_REQUIRED = {
    "train": ("data",),
    "eval": ("checkpoint",),
    "sweep-tau": ("data",),
    "finetune": ("checkpoint", "data"),
}


def resolve(argv) -> dict:
    """Parse ``argv`` into a complete option dict, merging a ``--config`` echo."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing subcommand (try --help)")
    opts = vars(args)
    func = opts.pop("func")
    if opts.get("config"):
        try:
            saved = json.loads(Path(opts["config"]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {opts['config']}: {exc}") from None
        if saved.get("command") != opts["command"]:
            raise UsageError(f"config is for {saved.get('command')!r}, not {opts['command']!r}")
        unknown = set(saved) - set(opts)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        defaults = vars(parser.parse_args([opts["command"]]))
        defaults.pop("func")
        for key, value in saved.items():
            # Flags given explicitly on the command line win over the echo.
            if opts[key] == defaults[key]:
                opts[key] = value
    opts["config"] = None
    if opts.get("seed") is None:
        opts["seed"] = _default_seed()
    if "preset" in opts:
        _fill_learner_opts(opts)
    for key in _REQUIRED.get(opts["command"], ()):
        if not opts.get(key):
            raise UsageError(f"{opts['command']} requires --{key}")
    return func, opts


def _fail(kind: str, exc: BaseException) -> None:
    reason = " ".join(str(exc).split())
    print(f"{PROG}: error: kind={kind} reason={json.dumps(reason)}", file=sys.stderr)


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        func, opts = resolve(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except IqlLabError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    try:
        func(opts)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except DivergenceError as exc:
        _fail("divergence", exc)
        return EXIT_RUNTIME
    except (IqlLabError, OSError, ValueError) as exc:
        _fail("runtime", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
