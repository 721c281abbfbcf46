"""Acceptance criteria C1-C10.

Each test records one ``C<n> PASS|FAIL`` line with the measured numbers;
the lines are printed in pytest's terminal summary (see conftest) and when
this file is run as a script.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from iql_lab import approx
from iql_lab.cli import dispatch
from iql_lab.data import (
    Dataset,
    Transition,
    dumps,
    empirical_behavior,
    empirical_support,
    generate_dataset,
    load,
    save,
)
from iql_lab.expectile import asym_l2_grad, asym_l2_loss, scalar_expectile
from iql_lab.learner import (
    finetune_online,
    init_learner,
    load_checkpoint,
    maze_config,
    normalized,
    policy_loss_and_grad,
    q_loss_and_grad,
    reference_returns,
    save_checkpoint,
    td_target,
    train_offline,
    train_onestep_baseline,
    value_loss_and_grad,
)
from iql_lab.mdp import TabularPolicy, make_random_mdp, make_umaze
from iql_lab.oracle import (
    SupportMask,
    expectile_fixed_point,
    policy_evaluation,
    policy_return,
    support_value_iteration,
)

from conftest import maze_mixture, random_full_support_dataset, value_range

RESULTS = []
SEEDS = range(10)


def report(name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def norm_rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="module")
def maze():
    return make_umaze(0.25, 10.0, 0.9)


@pytest.fixture(scope="module")
def random_instances():
    """Ten random MDPs with full-support datasets of 10^4 transitions."""
    out = []
    for seed in SEEDS:
        mdp = make_random_mdp(10, 4, seed)
        ds = random_full_support_dataset(mdp, seed)
        out.append((mdp, ds, empirical_behavior(ds, 10, 4)))
    return out


def test_c1_toy_maze(maze):
    start = time.perf_counter()
    good_return = smaller_error = 0
    scores = []
    for seed in SEEDS:
        ds = maze_mixture(maze, seed)
        refs = reference_returns(maze, ds)
        cfg = maze_config(tau=0.95, seed=seed)
        iql, _ = train_offline(cfg, ds, maze)
        base, _ = train_onestep_baseline(cfg, ds, maze)
        score = normalized(policy_return(maze, iql.greedy_policy()), refs)
        scores.append(score)
        good_return += score >= 0.9
        v_star = refs["v_support_opt"]
        err_iql = np.max(np.abs(iql.value_table() - v_star))
        err_base = np.max(np.abs(base.value_table() - v_star))
        smaller_error += err_iql < err_base
    elapsed = time.perf_counter() - start
    ok = good_return >= 8 and smaller_error >= 8 and elapsed < 120
    report("C1", ok, f"normalized>=0.9 on {good_return}/10 (min {min(scores):.3f}); "
                     f"V error below one-step on {smaller_error}/10; {elapsed:.1f}s")
    assert ok


def test_c2_scalar_expectile_limit():
    rng = np.random.default_rng(2)
    taus = [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999]
    monotone = near_max = 0
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 20))
        samples = list(zip(rng.normal(size=n) * rng.uniform(0.1, 10), rng.uniform(0.01, 1.0, size=n)))
        m = [scalar_expectile(samples, t) for t in taus]
        monotone += all(b >= a for a, b in zip(m, m[1:]))
        values = [v for v, _ in samples]
        gap = (max(values) - m[-1]) / (max(values) - min(values))
        worst = max(worst, gap)
        near_max += gap <= 0.05
    ok = monotone == 50 and near_max == 50
    report("C2", ok, f"monotone {monotone}/50; |m_0.999 - max| <= 5% range {near_max}/50 "
                     f"(worst {100 * worst:.2f}%)")
    assert ok


def test_c3_expectile_oracle_properties():
    start = time.perf_counter()
    taus = [0.5, 0.7, 0.9, 0.99, 0.999]
    fails = []
    worst_gap = 0.0
    for seed in range(20):
        mdp = make_random_mdp(10, 4, seed)
        mu = TabularPolicy.uniform(10, 4)
        v_max, _ = support_value_iteration(mdp, SupportMask.full(10, 4))
        vs = [expectile_fixed_point(mdp, mu, t)[0] for t in taus]
        if not all(np.all(a <= b + 1e-6) for a, b in zip(vs, vs[1:])):
            fails.append((seed, "monotonicity"))
        if not all(np.all(v <= v_max + 1e-6) for v in vs):
            fails.append((seed, "upper bound"))
        gaps = [np.max(np.abs(v - v_max)) for v in vs]
        if not all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:])):
            fails.append((seed, "gap not shrinking"))
        rel = gaps[-1] / value_range(mdp)
        worst_gap = max(worst_gap, rel)
        if rel >= 0.01:
            fails.append((seed, "gap"))
    elapsed = time.perf_counter() - start
    ok = not fails and elapsed < 60
    report("C3", ok, f"20 MDPs, violations {fails or 'none'}; worst tau=0.999 gap "
                     f"{100 * worst_gap:.3f}% of value range; {elapsed:.1f}s")
    assert ok


def test_c4_half_tau_is_sarsa(random_instances):
    worst_iql = worst_base = 0.0
    passed = 0
    for seed, (mdp, ds, mu) in zip(SEEDS, random_instances):
        v_mu, q_mu = policy_evaluation(mdp, mu)
        iql, _ = train_offline(maze_config(tau=0.5, seed=seed), ds, mdp)
        base, _ = train_onestep_baseline(maze_config(seed=seed), ds, mdp)
        scale = value_range(mdp)
        e_iql = np.max(np.abs(iql.value_table() - v_mu)) / scale
        e_base = max(np.max(np.abs(base.value_table() - v_mu)),
                     np.max(np.abs(base.q_table() - q_mu))) / scale
        worst_iql, worst_base = max(worst_iql, e_iql), max(worst_base, e_base)
        passed += e_iql < 0.05 and e_base < 0.05
    ok = passed == 10
    report("C4", ok, f"{passed}/10 instances within 0.05 range; worst IQL {worst_iql:.4f}, "
                     f"one-step {worst_base:.4f} (fraction of value range)")
    assert ok


def test_c5_learned_matches_expectile_fixed_point(random_instances):
    worst = {0.7: 0.0, 0.9: 0.0}
    passed = 0
    for seed, (mdp, ds, mu) in zip(SEEDS, random_instances):
        for tau in (0.7, 0.9):
            v_tau, _ = expectile_fixed_point(mdp, mu, tau)
            learner, _ = train_offline(maze_config(tau=tau, seed=seed), ds, mdp)
            err = np.max(np.abs(learner.value_table() - v_tau)) / value_range(mdp)
            worst[tau] = max(worst[tau], err)
            passed += err < 0.05
    ok = passed == 20
    report("C5", ok, f"{passed}/20 (instance, tau) runs within 0.05 range; worst "
                     f"tau=0.7 {worst[0.7]:.4f}, tau=0.9 {worst[0.9]:.4f}")
    assert ok


def _fd(f, params, eps):
    g = np.zeros_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += eps
        up = f(p)
        p[i] -= 2 * eps
        g[i] = (up - f(p)) / (2 * eps)
    return g


def _random_learner(rng, kind):
    cfg = maze_config(kind=kind, hidden=(6, 5), tau=float(rng.uniform(0.1, 0.9)),
                      beta=float(rng.uniform(0.0, 3.0)))
    learner = init_learner(cfg, 5, 3, 0.9)
    learner = replace(
        learner,
        **{name: getattr(learner, name).with_params(rng.normal(size=getattr(learner, name).params.size))
           for name in ("v", "q1", "q1_target", "pi")},
    )
    n = 12
    batch = Dataset.from_transitions(
        [Transition(int(s), int(a), float(r), int(ns), None, bool(d))
         for s, a, r, ns, d in zip(rng.integers(0, 5, n), rng.integers(0, 3, n), rng.normal(size=n),
                                   rng.integers(0, 5, n), rng.random(n) < 0.3)],
        episode_starts=range(n),
    ).columns
    return cfg, learner, batch


def test_c6_gradients():
    rng = np.random.default_rng(6)
    kinds = approx.KINDS
    worst = {}

    def probe(name, analytic, numeric):
        worst[name] = max(worst.get(name, 0.0), norm_rel_err(analytic, numeric))

    for i in range(100):
        u = float(rng.normal() * 5)
        if abs(u) < 1e-3:
            u = 1.0
        tau = float(rng.uniform(0.01, 0.99))
        eps = 1e-6
        probe("asym_l2_loss", asym_l2_grad(u, tau),
              (asym_l2_loss(u + eps, tau) - asym_l2_loss(u - eps, tau)) / (2 * eps))

        kind = kinds[i % 3]
        cfg, learner, batch = _random_learner(rng, kind)
        eps = 1e-5
        _, g = value_loss_and_grad(learner, batch, cfg)
        probe("L_V", g, _fd(lambda p: value_loss_and_grad(
            replace(learner, v=learner.v.with_params(p)), batch, cfg)[0], learner.v.params, eps))
        targets = td_target(batch.next_state, batch.reward, batch.done, learner, 0.9)
        _, g = q_loss_and_grad(learner, learner.q1, batch, targets)
        probe("L_Q", g, _fd(lambda p: q_loss_and_grad(
            learner, learner.q1.with_params(p), batch, targets)[0], learner.q1.params, eps))
        _, g, _, _ = policy_loss_and_grad(learner, batch, cfg)
        probe("L_pi", g, _fd(lambda p: policy_loss_and_grad(
            replace(learner, pi=learner.pi.with_params(p)), batch, cfg)[0], learner.pi.params, eps))

        for k in kinds:
            model = approx.init(k, 4, 3, hidden=(5, 4), seed=i)
            model = model.with_params(rng.normal(size=model.params.size))
            x = rng.integers(0, 4, size=3) if k == "table" else rng.normal(size=(3, 4))
            ct = rng.normal(size=(3, 3))
            probe(f"approx:{k}", approx.grad(model, x, ct), _fd(
                lambda p: float(np.sum(ct * approx.evaluate(model.with_params(p), x))),
                model.params, eps))
    ok = all(v < 1e-4 for v in worst.values())
    report("C6", ok, "100 probes each, worst relative error " +
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_c7_no_out_of_sample_queries(maze):
    ds = maze_mixture(maze, 0)
    log = set()
    train_offline(maze_config(seed=0), ds, maze, query_log=log)
    pairs = set(zip(ds.columns.state.tolist(), ds.columns.action.tolist()))
    outside = log - pairs
    ok = bool(log) and not outside
    report("C7", ok, f"{len(log)} distinct (s,a) queried, {len(pairs)} in data, "
                     f"{len(outside)} out of sample")
    assert ok


def test_c8_tau_sweep(maze):
    scores = {0.5: [], 0.95: []}
    for seed in SEEDS:
        ds = maze_mixture(maze, seed)
        refs = reference_returns(maze, ds)
        for tau in scores:
            learner, _ = train_offline(maze_config(tau=tau, seed=seed), ds, maze)
            scores[tau].append(normalized(policy_return(maze, learner.greedy_policy()), refs))
    diff = np.array(scores[0.95]) - np.array(scores[0.5])
    se = diff.std(ddof=1) / np.sqrt(diff.size)
    margin = diff.mean()
    ok = margin > 2 * se
    report("C8", ok, f"mean normalized tau=0.95 {np.mean(scores[0.95]):.4f} vs tau=0.5 "
                     f"{np.mean(scores[0.5]):.4f}; margin {margin:.4f}, 2*SE {2 * se:.4f}")
    assert ok


def test_c9_finetuning(maze):
    uniform = TabularPolicy.uniform(7, 4)
    improved = identity = 0
    details = []
    for seed in SEEDS:
        ds = generate_dataset(maze, [(uniform, 10)], 10, seed, names=["uniform"])
        cfg = maze_config(seed=seed)
        offline, _ = train_offline(cfg, ds, maze)
        tuned, metrics, buffer = finetune_online(offline, cfg, maze, ds, 5000, 0.1)
        before, after = metrics.meta["return_before"], metrics.meta["return_after"]
        improved += after > before
        identity += (tuned.td_updates - offline.td_updates == 5000
                     and tuned.policy_updates - offline.policy_updates == 5000
                     and len(buffer) - len(ds) == 5000)
        details.append(f"{before:.2f}->{after:.2f}")
    ok = improved >= 8 and identity == 10
    report("C9", ok, f"strict improvement on {improved}/10, step identity on {identity}/10 "
                     f"[{', '.join(details)}]")
    assert ok


def test_c10_serialization(tmp_path, monkeypatch, maze):
    ds = maze_mixture(maze, 0)
    save(ds, tmp_path / "a.jsonl")
    save(load(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
    data_ok = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    data_ok &= dumps(load(tmp_path / "a.jsonl")) == dumps(ds)

    cfg = maze_config(td_steps=200, policy_steps=50, double_q=True)
    learner, _ = train_offline(cfg, ds, maze)
    save_checkpoint(learner, cfg, tmp_path / "c1.json")
    again, cfg2 = load_checkpoint(tmp_path / "c1.json")
    save_checkpoint(again, cfg2, tmp_path / "c2.json")
    ckpt_ok = (tmp_path / "c1.json").read_bytes() == (tmp_path / "c2.json").read_bytes()

    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("IQL_LAB_SEED", raising=False)
    small = ["--td-steps", "300", "--policy-steps", "100", "--log-every", "50"]
    commands = [
        (["gen-data", "--seed", "7", "--out", "d.jsonl"], "d.jsonl.config.json", ["d.jsonl"]),
        (["train", "--data", "d.jsonl", *small, "--out", "run"], "run/resolved_config.json",
         ["run/metrics.jsonl", "run/checkpoint.json"]),
        (["eval", "--checkpoint", "run/checkpoint.json", "--data", "d.jsonl", "--episodes", "300",
          "--out", "eval.json"], "eval.json.config.json", ["eval.json"]),
        (["sweep-tau", "--data", "d.jsonl", "--taus", "0.5,0.9", "--seeds", "0-1", *small,
          "--out", "sweep.csv"], "sweep.csv.config.json", ["sweep.csv"]),
        (["heatmap", "--source", "checkpoint", "--checkpoint", "run/checkpoint.json", "--out", "h.csv"],
         "h.csv.config.json", ["h.csv"]),
        (["demo-expectile", "--steps", "500", "--out", "e.csv"], "e.csv.config.json", ["e.csv"]),
        (["finetune", "--checkpoint", "run/checkpoint.json", "--data", "d.jsonl", "--env-steps", "200",
          "--log-every", "50", "--out", "ft"], "ft/resolved_config.json",
         ["ft/metrics.jsonl", "ft/checkpoint.json", "ft/buffer.jsonl"]),
    ]
    reproduced = []
    for argv, echo, outputs in commands:
        assert dispatch(argv) == 0, argv
        first = [(tmp_path / o).read_bytes() for o in outputs]
        echo_copy = tmp_path / (argv[0] + ".echo.json")
        echo_copy.write_bytes((tmp_path / echo).read_bytes())
        for o in outputs:
            (tmp_path / o).unlink()
        assert dispatch([argv[0], "--config", str(echo_copy)]) == 0, argv
        second = [(tmp_path / o).read_bytes() for o in outputs]
        if first == second and json.loads(echo_copy.read_text()) == json.loads((tmp_path / echo).read_text()):
            reproduced.append(argv[0])
    cli_ok = len(reproduced) == len(commands)
    ok = data_ok and ckpt_ok and cli_ok
    report("C10", ok, f"dataset round-trip {'exact' if data_ok else 'DIFFERS'}, checkpoint "
                      f"{'exact' if ckpt_ok else 'DIFFERS'}, echo reruns identical for "
                      f"{len(reproduced)}/{len(commands)} commands")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
