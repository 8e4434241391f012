import numpy as np
import pytest

from core.errors import ContractError
from ml.gated_lora import GateOverride, prune_rank
from ml.tensor import backward, param_key
from ml.transformer import lm_loss
from schemas.reports import ImportanceReport, RankScore
from services.allocator import (
    active_ranks,
    apply_reallocation,
    best_module,
    highest_ranks,
    importance_scores,
    lowest_ranks,
    metric_S,
    pruning_damage,
    reallocate_step,
)
from services.oracles import exhaustive_importance, tiny_model, tiny_tokens


def _report(scores, round_index=1) -> ImportanceReport:
    per_rank = [RankScore(module_id=m, rank_index=i, S_without=0.0, S_alone=v, IS=v) for m, i, v in scores]
    by_module = {}
    for s in per_rank:
        by_module.setdefault(s.module_id, []).append(s.IS)
    return ImportanceReport(
        round=round_index, per_rank=per_rank,
        per_module_mean={m: float(np.mean(v)) for m, v in by_module.items()},
        val_batch_id="test", S_full=0.0,
    )


class TestImportanceScores:
    def test_matches_exhaustive_masks_bitwise(self, float64):
        model = tiny_model(seed=3)
        tokens = tiny_tokens(model, n=5)
        report = importance_scores(model, tokens)
        expected = exhaustive_importance(model, tokens)
        assert len(report.per_rank) == model.total_active()
        for s in report.per_rank:
            s_without, s_alone = expected[(s.module_id, s.rank_index)]
            assert s.S_without == s_without
            assert s.S_alone == s_alone
            assert s.IS == -s_without + s_alone

    def test_thread_pool_gives_identical_scores(self, float64):
        model = tiny_model(seed=4)
        tokens = tiny_tokens(model, n=4)
        serial = importance_scores(model, tokens, n_jobs=1)
        threaded = importance_scores(model, tokens, n_jobs=4)
        assert [s.IS for s in serial.per_rank] == [s.IS for s in threaded.per_rank]

    def test_scoring_is_read_only(self, float64):
        model = tiny_model(seed=5)
        tokens = tiny_tokens(model)
        before = metric_S(model, tokens)
        importance_scores(model, tokens)
        assert metric_S(model, tokens) == before
        assert model.total_active() == 12

    def test_skips_pruned_ranks_and_records_full_score(self, float64):
        model = tiny_model()
        prune_rank(model.adapters[2], 0)
        tokens = tiny_tokens(model)
        report = importance_scores(model, tokens, round_index=3)
        assert (2, 0) not in {(s.module_id, s.rank_index) for s in report.per_rank}
        assert report.round == 3
        assert report.S_full == metric_S(model, tokens)
        assert report.per_module_mean[2] == report.scores_for(2)[0].IS

    def test_needs_an_active_rank(self):
        model = tiny_model(rank=1)
        for m in model.module_ids:
            prune_rank(model.adapters[m], 0)
        with pytest.raises(ContractError):
            importance_scores(model, tiny_tokens(model))

    def test_dominating_rank_scores_higher(self, float64):
        model = tiny_model(seed=7)
        tokens = tiny_tokens(model)
        for adapter in model.adapters.values():
            adapter.W_B.data[:] = 0.0
        target = model.adapters[1]
        grads = backward(lm_loss(model, tokens), [target.W_B])
        step = grads.array(param_key(target.W_B))[0]
        target.W_B.data[0] = -0.05 * step / np.linalg.norm(step)

        report = importance_scores(model, tokens)
        helpful, idle = report.scores_for(1)
        assert helpful.S_without < idle.S_without and helpful.S_alone > idle.S_alone
        assert helpful.IS > idle.IS
        assert helpful.IS > 0.0 > idle.IS

    def test_loss_scale(self, float64):
        model = tiny_model()
        tokens = tiny_tokens(model)
        np.testing.assert_allclose(metric_S(model, tokens, loss_scale=2.0), 2.0 * metric_S(model, tokens))


class TestRanking:
    def test_lowest_breaks_ties_on_lower_key(self):
        report = _report([(1, 0, 0.5), (0, 1, 0.1), (0, 0, 0.1), (2, 0, -1.0)])
        assert lowest_ranks(report, 2) == [(2, 0), (0, 0)]
        assert highest_ranks(report, 1) == [(1, 0)]

    def test_best_module_tie(self):
        assert best_module({3: 1.0, 1: 1.0, 0: 0.5}) == 1
        assert best_module({}) is None


class TestReallocation:
    def test_prune_lowest_grow_best(self, rng):
        model = tiny_model()
        report = _report([(m, i, float(m) + 0.1 * i) for m in range(6) for i in range(2)])
        delta = reallocate_step(model, report, 2, rng)
        assert delta.pruned == [(0, 0), (0, 1)]
        assert delta.grown_module == 5
        assert delta.added == 2
        assert model.adapters[5].n_active == 4
        assert model.adapters[0].n_active == 0
        assert delta.active_before == delta.active_after == 12

    def test_no_growth_when_best_module_lost_a_rank(self, rng):
        model = tiny_model()
        scores = [(m, i, 0.0 + m) for m in range(6) for i in range(2)]
        scores[10] = (5, 0, -5.0)
        scores[11] = (5, 1, 100.0)
        delta = reallocate_step(model, _report(scores), 1, rng)
        assert delta.pruned == [(5, 0)]
        assert delta.grown_module is None
        assert model.total_active() == 11

    def test_budget_caps_growth(self, rng):
        model = tiny_model(rank=3)
        report = _report([(m, i, float(m)) for m in range(6) for i in range(3)])
        delta = reallocate_step(model, report, 1, rng, budget=12)
        assert delta.grown_module is None
        assert model.total_active() == 17
        delta = apply_reallocation(model, [(0, 1)], 4, 1, 2, rng, budget=17)
        assert delta.grown_module == 4 and model.total_active() == 17

    def test_too_few_ranks_to_prune(self, rng):
        model = tiny_model()
        with pytest.raises(ContractError):
            reallocate_step(model, _report([(0, 0, 1.0)]), 2, rng)

    def test_active_ranks(self):
        model = tiny_model()
        prune_rank(model.adapters[0], 1)
        keys = active_ranks(model)
        assert (0, 1) not in keys and len(keys) == 11


class TestPruningDamage:
    def test_masks_chosen_ranks(self, float64):
        model = tiny_model()
        tokens = tiny_tokens(model)
        report = importance_scores(model, tokens)
        bottom = pruning_damage(model, report, tokens, 1, "bottom")
        worst = lowest_ranks(report, 1)[0]
        rank = model.adapters[worst[0]].rank
        mask = np.ones(rank)
        mask[worst[1]] = 0.0
        assert bottom == -metric_S(model, tokens, GateOverride({worst[0]: mask}))
        assert model.total_active() == 12
