"""Analytic forgetting/scaling claims, memory contract, no-gradient guarantee."""

import subprocess
import sys
import tracemalloc

import numpy as np
import pytest

from tvmerge import (
    ConfigError,
    MergeConfig,
    ParameterSet,
    QuadraticTask,
    WorkbenchConfig,
    World,
    extract,
    merge,
    run_forgetting,
    run_scaling,
    synthesize,
)
from tvmerge.workbench import forgetting_csv_lines, scaling_csv_lines

from helpers import ulp_diff


def make_world(general, targets):
    general = np.asarray(general, dtype=np.float32)
    base = ParameterSet.from_arrays({"theta": general})
    tasks = [
        QuadraticTask(label=f"task-{i:02d}", target=np.asarray(t, dtype=np.float32))
        for i, t in enumerate(targets)
    ]
    tuned = [ParameterSet.from_arrays({"theta": task.target}) for task in tasks]
    world = World(base=base, tasks=tasks, tuned=tuned)
    world.vectors = [extract(base, m, t.label) for t, m in zip(tasks, tuned)]
    return world


class TestSynthesize:
    def test_closed_form_optimum(self):
        # the fine-tune of a quadratic task is its target: theta_1 = t_1
        world = make_world([0.0, 0.0], [[1.0, 0.0]])
        assert np.array_equal(world.tuned[0].values("theta"), [1.0, 0.0])
        assert np.array_equal(world.vectors[0].values("theta"), [1.0, 0.0])
        assert world.tasks[0].loss(world.tuned[0].values("theta")) == 0.0

    def test_k_zero_rejected(self):
        with pytest.raises(ConfigError):
            WorkbenchConfig(dim=2, k=0)

    def test_dim_zero_rejected(self):
        with pytest.raises(ConfigError):
            WorkbenchConfig(dim=0, k=1)

    def test_same_seed_same_targets(self):
        a = synthesize(WorkbenchConfig(dim=8, k=3, seed=5))
        b = synthesize(WorkbenchConfig(dim=8, k=3, seed=5))
        for ta, tb in zip(a.tasks, b.tasks):
            assert np.array_equal(ta.target, tb.target)

    def test_targets_on_radius_sphere(self):
        world = synthesize(WorkbenchConfig(dim=16, k=4, radius=2.5, seed=1))
        for task in world.tasks:
            assert np.linalg.norm(task.target.astype(np.float64)) == pytest.approx(
                2.5, rel=1e-5
            )


class TestForgetting:
    def test_analytic_cancellation_instance(self):
        # g=0, t1=(1,0), t2=(-1,0): equal-weight TA lands exactly on g, so
        # epsilon is 0 while each fine-tuned model degrades the general loss by 1
        world = make_world([0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]])
        cfg = WorkbenchConfig(dim=2, k=2, strategies=("ta",))
        report = run_forgetting(cfg, world=world)[0]
        assert report.epsilon == 0.0
        assert report.general_loss_base == 0.0
        assert report.general_loss_ft == 1.0
        assert report.general_loss_merged == 0.0
        assert report.closed_form_epsilon == 0.0
        for before in report.per_task_loss_base:
            assert before == 1.0

    def test_k1_recovers_task_exactly(self):
        # one vector at alpha=1: epsilon equals the full fine-tune shift
        world = make_world([0.0, 0.0], [[0.6, 0.8]])
        cfg = WorkbenchConfig(dim=2, k=1, strategies=("ta",))
        report = run_forgetting(cfg, world=world)[0]
        assert report.epsilon == pytest.approx(1.0, rel=1e-6)  # ||t1 - g||^2
        assert report.per_task_loss_merged[0] == 0.0

    def test_single_task_full_recovery_all_strategies(self):
        # TIES needs p=1 and DARE needs p=0 to keep the whole vector at K=1
        world = make_world([0.0, 0.0, 0.0], [[0.3, -0.4, 0.5]])
        for strategy, p in (("ta", 0.5), ("average", 0.5), ("ties", 1.0), ("dare", 0.0)):
            cfg = MergeConfig(strategy=strategy, p=p, seed=0)
            merged, _ = merge(world.base, world.vectors, cfg)
            if strategy == "average":
                # mean of {base, tuned} sits halfway, not at the target
                assert world.task_loss(merged, 0) == pytest.approx(0.25 * 0.5, rel=1e-5)
            else:
                assert world.task_loss(merged, 0) == 0.0, strategy

    def test_ta_matches_straight_line_closed_form(self):
        cfg = WorkbenchConfig(dim=16, k=6, seed=3, strategies=("ta",))
        world = synthesize(cfg)
        merged, _ = merge(world.base, world.vectors, MergeConfig(strategy="ta"))
        g = world.base.values("theta")
        a32 = np.float32(1.0 / 6)
        phi = None
        for task in world.tasks:
            term = a32 * (task.target - g)
            phi = term if phi is None else phi + term
        closed_form = g + phi
        assert ulp_diff(merged.values("theta"), closed_form).max() <= 2

    def test_reports_cover_all_strategies(self):
        cfg = WorkbenchConfig(dim=4, k=2, seed=0)
        reports = run_forgetting(cfg)
        assert [r.strategy for r in reports] == ["average", "ta", "ties", "dare"]

    def test_dare_mean_epsilon_matches_analytic_expectation(self):
        # E[theta_hat] is the TA point, but epsilon is quadratic, so its mean
        # carries the drop variance: E[eps] = eps_TA + p/(1-p) * sum a_i^2 tau_ij^2
        world = make_world([0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]])
        p = 0.5
        alphas = [0.5, 0.5]
        seeds = 500
        eps = np.empty(seeds)
        theta_acc = np.zeros(2)
        for seed in range(seeds):
            cfg = MergeConfig(strategy="dare", p=p, seed=seed)
            merged, _ = merge(world.base, world.vectors, cfg)
            eps[seed] = world.general_loss(merged)
            theta_acc += merged.values("theta")
        variance_term = (p / (1 - p)) * sum(
            a * a * float(np.dot(tv.values("theta").astype(np.float64),
                                 tv.values("theta").astype(np.float64)))
            for a, tv in zip(alphas, world.vectors)
        )
        expected = 0.0 + variance_term  # eps_TA is exactly 0 on this instance
        bound = 4.0 * eps.std() / np.sqrt(seeds)
        assert abs(eps.mean() - expected) <= bound
        # and the merged parameters themselves are unbiased around the TA point
        assert np.all(np.abs(theta_acc / seeds) <= 0.2)


class TestScaling:
    def test_k1_ta_loss_is_zero(self):
        cfg = WorkbenchConfig(dim=8, k=1, seed=2, strategies=("ta",))
        rows = run_scaling(cfg)
        assert rows[0].mean_task_loss == 0.0

    def test_two_orthogonal_tasks_closed_form(self):
        # t1 and t2 orthogonal with norm r: merged point g + (t1+t2-2g)/2 sits
        # r^2/2 away from each target
        r = 2.0
        world = make_world([0.0, 0.0], [[r, 0.0], [0.0, r]])
        cfg = WorkbenchConfig(dim=2, k=2, strategies=("ta",))
        rows = run_scaling(cfg, world=world)
        k2 = [row for row in rows if row.k == 2][0]
        assert k2.mean_task_loss == pytest.approx(r * r / 2, rel=1e-6)

    def test_table_is_complete(self):
        cfg = WorkbenchConfig(dim=8, k=3, seed=0)
        rows = run_scaling(cfg)
        assert {(r.k, r.strategy) for r in rows} == {
            (k, s) for k in (1, 2, 3) for s in ("average", "ta", "ties", "dare")
        }

    def test_ta_mean_task_loss_non_decreasing(self):
        # with orthogonal-ish equal-norm targets the closed form is
        # r^2 (1 - 1/K), non-decreasing in K for any seed
        for seed in range(5):
            cfg = WorkbenchConfig(
                dim=64, k=8, seed=seed, strategies=("ta",), orthogonal_targets=True
            )
            rows = run_scaling(cfg)
            losses = [r.mean_task_loss for r in sorted(rows, key=lambda r: r.k)]
            assert all(b >= a - 1e-9 for a, b in zip(losses, losses[1:])), seed
            assert losses[-1] == pytest.approx(1.0 - 1.0 / 8, rel=1e-3)

    def test_csv_shapes(self):
        cfg = WorkbenchConfig(dim=4, k=2, seed=0)
        world = synthesize(cfg)
        lines = scaling_csv_lines(run_scaling(cfg, world=world))
        assert lines[0] == "K,strategy,mean_task_loss,general_loss,epsilon"
        assert len(lines) == 1 + 2 * 4
        flines = forgetting_csv_lines(run_forgetting(cfg, world=world))
        assert flines[0].startswith("strategy,p,")
        assert len(flines) == 1 + 4


class TestResourceContracts:
    def test_merge_memory_is_constant_in_k(self):
        # 8 vectors x 8 tensors x 1 MB: streaming per-tensor keeps the peak at
        # one output model plus a handful of working buffers, nowhere near the
        # K-model stack a naive implementation would hold
        tensors, n, k = 8, 250_000, 8
        rng = np.random.default_rng(0)
        base = ParameterSet.from_arrays(
            {f"t{i:02d}": rng.standard_normal(n, dtype=np.float32) for i in range(tensors)}
        )
        tuned = [
            ParameterSet.from_arrays(
                {
                    name: base.values(name)
                    + (0.1 * rng.standard_normal(n)).astype(np.float32)
                    for name in base.names()
                }
            )
            for _ in range(k)
        ]
        vectors = [extract(base, t, f"v{i}") for i, t in enumerate(tuned)]
        tensor_bytes = n * 4
        model_bytes = tensors * tensor_bytes
        naive_bytes = k * model_bytes
        for strategy, kwargs in (("ta", {}), ("ties", {"p": 0.5}), ("dare", {"p": 0.5, "seed": 1})):
            tracemalloc.start()
            merged, report = merge(
                base, vectors, MergeConfig(strategy=strategy, **kwargs), workers=1
            )
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            budget = model_bytes + 8 * tensor_bytes + 2_000_000
            assert peak <= budget, f"{strategy}: {peak} > {budget}"
            assert peak < 0.3 * naive_bytes
            del merged, report

    def test_workbench_never_imports_gradient_frameworks(self):
        # run in a clean interpreter so other tests cannot pollute sys.modules
        code = (
            "import sys\n"
            "from tvmerge.workbench import WorkbenchConfig, run_forgetting, run_scaling\n"
            "cfg = WorkbenchConfig(dim=4, k=2, seed=0)\n"
            "run_forgetting(cfg)\n"
            "run_scaling(cfg)\n"
            "banned = [m for m in sys.modules\n"
            "          if m.split('.')[0] in ('torch', 'tensorflow', 'jax', 'autograd')]\n"
            "assert not banned, banned\n"
            "print('clean')\n"
        )
        result = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, timeout=120
        )
        assert result.returncode == 0, result.stderr
        assert "clean" in result.stdout
