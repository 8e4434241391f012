import numpy as np
import pytest

from ml.gradcheck import finite_diff_check
from ml.regularizers import expected_l0
from ml.tensor import backward
from ml.transformer import build_supernetwork, lm_loss
from services.oracles import tiny_model, tiny_tokens
from services.strategies import (
    alpha_prime_ranking,
    dnas_baseline_allocate,
    dnas_split,
    l0_baseline_allocate,
    prune_below_threshold,
    run_alora,
    run_strategy,
)
from services.trainer import Trainer
from tasks.synthetic import gen_task

from conftest import tiny_run_config


def _setup(config):
    data = gen_task(config.task)
    model = build_supernetwork(
        config.model, config.allocator.initial_ranks, np.random.default_rng([config.seed, 0]),
        config.optimizer.adapter_init, config.optimizer.adapter_init_std,
    )
    return model, data


def _assert_budget(history, R_target):
    for rnd in history.rounds:
        total = sum(rnd.rank_map.values())
        assert total <= R_target
        if rnd.delta.grown_module is not None:
            assert total == R_target


class TestAblation:
    def test_rounds_respect_budget(self, float64):
        config = tiny_run_config()
        model, data = _setup(config)
        model, history = run_alora(model, data, config)
        assert [r.round for r in history.rounds] == [1, 2]
        assert all(r.report is not None and len(r.delta.pruned) == 1 for r in history.rounds)
        _assert_budget(history, config.allocator.R_target)
        assert model.total_active() <= config.allocator.R_target
        assert history.snapshots()[0] == {m: 2 for m in range(6)}

    def test_gate_logits_stay_frozen(self, float64):
        config = tiny_run_config()
        model, data = _setup(config)
        model, _ = run_alora(model, data, config)
        for adapter in model.adapters.values():
            np.testing.assert_array_equal(adapter.gate_logits.data, 0.0)
            assert not adapter.gate_logits.requires_grad

    def test_no_rounds_is_plain_lora(self, float64):
        config = tiny_run_config(allocator={"N_A": 0})
        model, data = _setup(config)
        trainer = Trainer(model, config, data)
        model, history = run_alora(model, data, config, trainer)
        assert history.rounds == []
        assert model.active_rank_map() == {m: 2 for m in range(6)}
        assert trainer.step == trainer.steps_per_epoch(data.train) * config.allocator.K1

    def test_step_budget_and_round_tags(self, float64):
        config = tiny_run_config()
        model, data = _setup(config)
        trainer = Trainer(model, config, data)
        run_alora(model, data, config, trainer)
        a = config.allocator
        assert trainer.step == trainer.steps_per_epoch(data.train) * (a.K1 + a.N_A * a.K2)
        frame = trainer.metrics.frame()
        assert frame.loc[frame.phase == "warmup", "round"].isna().all()
        assert set(frame.loc[frame.phase == "recover", "round"]) == {1, 2}

    def test_pruning_setting_shrinks_to_target(self, float64):
        config = tiny_run_config(allocator={"R_target": 10, "initial_ranks": 12, "N_A": 2, "r1": 1})
        model, data = _setup(config)
        model, history = run_alora(model, data, config)
        assert all(r.delta.grown_module is None for r in history.rounds)
        assert model.total_active() == 10

    def test_seeded_runs_are_identical(self, float64):
        config = tiny_run_config()
        results = []
        for _ in range(2):
            model, data = _setup(config)
            model, history = run_alora(model, data, config)
            results.append((history.model_dump(), model.adapters[0].W_B.data.copy()))
        assert results[0][0] == results[1][0]
        np.testing.assert_array_equal(results[0][1], results[1][1])


class TestDnasBaseline:
    def test_split_partitions_training_set(self):
        config = tiny_run_config()
        data = gen_task(config.task)
        d1, d2 = dnas_split(data, config)
        assert len(d1) + len(d2) == len(data.train)
        rows1, rows2 = set(map(tuple, d1.tokens)), set(map(tuple, d2.tokens))
        assert not rows1 & rows2

    def test_prunes_smallest_alpha_prime(self, float64):
        config = tiny_run_config(allocator={"strategy": "dnas_baseline"})
        model, data = _setup(config)
        model, history = dnas_baseline_allocate(model, data, config)
        first = history.rounds[0]
        candidates = sorted(
            (value, m, i)
            for m, values in first.alpha_prime.items()
            for i, value in enumerate(values) if value > 0
        )
        assert [tuple(p) for p in first.delta.pruned] == [(m, i) for _, m, i in candidates[:1]]
        assert isinstance(first.ranking_agreement, bool)
        assert first.report is not None
        _assert_budget(history, config.allocator.R_target)

    def test_gate_logits_are_learned(self, float64):
        config = tiny_run_config(allocator={"strategy": "dnas_baseline"})
        model, data = _setup(config)
        model, _ = dnas_baseline_allocate(model, data, config)
        assert any(np.any(a.gate_logits.data != 0.0) for a in model.adapters.values())
        assert not any(a.gate_logits.requires_grad for a in model.adapters.values())

    def test_frozen_gates_keep_unit_alpha(self, float64):
        config = tiny_run_config(allocator={"strategy": "dnas_baseline", "record_importance": False})
        model, data = _setup(config)
        model, history = dnas_baseline_allocate(model, data, config, freeze_gates=True)
        assert all(r.report is None and r.ranking_agreement is None for r in history.rounds)
        assert all(v == 1.0 for v, _, _ in alpha_prime_ranking(model))

    def test_frozen_gates_train_like_ablation_warmup(self, float64):
        plain = tiny_run_config(allocator={"N_A": 0, "K1": 1})
        frozen = tiny_run_config(allocator={"strategy": "dnas_baseline", "N_A": 0, "K1": 1})
        model_a, data = _setup(plain)
        model_a, _ = run_alora(model_a, data, plain)
        model_b, data = _setup(frozen)
        model_b, _ = dnas_baseline_allocate(model_b, data, frozen, freeze_gates=True)
        for m in model_a.module_ids:
            np.testing.assert_array_equal(model_a.adapters[m].W_A.data, model_b.adapters[m].W_A.data)
            np.testing.assert_array_equal(model_a.adapters[m].W_B.data, model_b.adapters[m].W_B.data)

    def test_gate_logit_gradients_match_central_differences(self, float64):
        model = tiny_model(seed=2)
        for adapter in model.adapters.values():
            adapter.gate_logits.data[:] = np.random.default_rng(adapter.module_id).normal(size=adapter.rank)
        model.set_gate_training(True)
        tokens = tiny_tokens(model, n=3)
        gates = model.gate_parameters()
        grads = backward(lm_loss(model, tokens), gates)
        assert np.any(grads.flatten() != 0.0)
        assert finite_diff_check(lambda: lm_loss(model, tokens), gates) < 1e-4


class TestL0Baseline:
    def test_threshold_pruning(self, float64):
        model, _ = _setup(tiny_run_config())
        for adapter in model.adapters.values():
            adapter.install_hard_concrete(log_theta_init=2.0)
        model.adapters[3].hard_concrete.log_theta.data[1] = -4.0
        assert prune_below_threshold(model, -1.0) == [(3, 1)]
        assert prune_below_threshold(model, -1.0) == []

    def test_prune_events_become_rounds(self, float64):
        config = tiny_run_config(allocator={"strategy": "l0_baseline", "prune_every": 1})
        model, data = _setup(config)
        for adapter in model.adapters.values():
            adapter.install_hard_concrete(log_theta_init=2.0)
        model.adapters[4].hard_concrete.log_theta.data[0] = -6.0
        trainer = Trainer(model, config, data)
        model, history = l0_baseline_allocate(model, data, config, trainer)
        assert len(history.rounds) == 1
        rnd = history.rounds[0]
        assert rnd.report is None and rnd.delta.grown_module is None
        assert [tuple(p) for p in rnd.delta.pruned] == [(4, 0)]
        assert rnd.step == 1
        assert model.total_active() == 11
        assert trainer.metrics.frame()["l0"].notna().all()

    def test_no_sparsity_pressure_prunes_nothing(self, float64):
        config = tiny_run_config(
            allocator={"strategy": "l0_baseline", "prune_every": 1},
            regularizers={"l0_weight": 0.0, "log_theta_init": 2.0},
        )
        model, data = _setup(config)
        model, history = l0_baseline_allocate(model, data, config)
        assert history.rounds == []
        assert model.total_active() == config.allocator.R_target

    def test_expected_l0_falls_without_gradient_alignment(self, float64):
        config = tiny_run_config(
            allocator={"strategy": "l0_baseline", "prune_every": 1000},
            regularizers={"orthogonal_weight": 0.0, "l0_weight": 10.0},
            ga={"mode": "off"},
        )
        model, data = _setup(config)
        for adapter in model.adapters.values():
            adapter.install_hard_concrete(log_theta_init=2.0)
        before = sum(expected_l0(a.hard_concrete).item() for a in model.adapters.values())
        model, _ = l0_baseline_allocate(model, data, config)
        after = sum(expected_l0(a.hard_concrete).item() for a in model.adapters.values())
        assert after < before

    def test_installs_gates_when_missing(self, float64):
        config = tiny_run_config(allocator={"strategy": "l0_baseline", "K1": 1, "N_A": 0})
        model, data = _setup(config)
        model, _ = run_strategy(model, data, config)
        assert all(a.hard_concrete is not None for a in model.adapters.values())


@pytest.mark.parametrize("strategy", ["ablation", "dnas_baseline", "l0_baseline"])
def test_every_strategy_dispatches(strategy, float64):
    config = tiny_run_config(allocator={"strategy": strategy, "N_A": 1})
    model, data = _setup(config)
    model, history = run_strategy(model, data, config)
    assert history.strategy == strategy
    assert model.total_active() <= config.allocator.R_target
