import numpy as np
import pytest

from core.errors import TrainingAborted
from ml.gated_lora import prune_rank
from ml.transformer import build_supernetwork
from services.trainer import Trainer, evaluate_ce, exact_match
from tasks.synthetic import gen_task
from utils.artifacts import MetricsLog

from conftest import tiny_run_config


def _trainer(config, metrics=None):
    data = gen_task(config.task)
    model = build_supernetwork(
        config.model, config.allocator.initial_ranks, np.random.default_rng([config.seed, 0]),
        config.optimizer.adapter_init, config.optimizer.adapter_init_std,
    )
    return Trainer(model, config, data, metrics), data


class TestTrainStep:
    def test_loss_decreases_on_a_fixed_batch(self, float64):
        config = tiny_run_config(ga={"mode": "off"}, regularizers={"orthogonal_weight": 0.0})
        trainer, data = _trainer(config)
        batch = data.train.full()
        first = trainer.train_step(batch)
        for _ in range(40):
            last = trainer.train_step(batch)
        assert last < first
        assert trainer.step == 41

    def test_aligned_update_stays_on_main_gradient(self, float64):
        # W_B starts at zero, so the CE gradient on W_A is exactly zero while
        # the orthogonality gradient on W_A is not
        config = tiny_run_config(ga={"mode": "hard", "alpha": 0.5})
        trainer, data = _trainer(config)
        w_a = trainer.model.adapters[0].W_A.data.copy()
        trainer.train_step(data.train.full())
        np.testing.assert_array_equal(trainer.model.adapters[0].W_A.data, w_a)
        row = trainer.metrics.rows[0]
        assert row["ga_degrees"] == pytest.approx(90.0)
        assert row["ga_coefficient"] == pytest.approx(0.5)

    def test_without_alignment_aux_gradient_is_added(self, float64):
        config = tiny_run_config(ga={"mode": "off"})
        trainer, data = _trainer(config)
        w_a = trainer.model.adapters[0].W_A.data.copy()
        trainer.train_step(data.train.full())
        assert not np.array_equal(trainer.model.adapters[0].W_A.data, w_a)
        assert trainer.metrics.rows[0]["ga_degrees"] == pytest.approx(90.0)

    def test_metrics_row(self, float64):
        trainer, data = _trainer(tiny_run_config())
        trainer.round = 2
        trainer.train_step(data.train.full(), phase="recover")
        row = trainer.metrics.rows[0]
        assert row["phase"] == "recover" and row["round"] == 2 and row["step"] == 0
        assert row["active_total"] == 12
        assert row["orthogonal"] is not None and row["l0"] is None

    def test_non_finite_loss_aborts_with_context(self, float64):
        trainer, data = _trainer(tiny_run_config())
        trainer.model.adapters[0].W_A.data[0, 0] = np.nan
        with pytest.raises(TrainingAborted) as err:
            trainer.train_step(data.train.full(), phase="warmup")
        assert err.value.phase == "warmup" and err.value.step == 0


class TestEpochs:
    def test_early_stop_on_flat_validation(self, float64):
        config = tiny_run_config(optimizer={"lr": 1e-300})
        trainer, data = _trainer(config)
        history = trainer.train_epochs(data.train, 5, "warmup", val_split=data.val, patience=1)
        assert len(history) == 2
        assert trainer.step == 2 * trainer.steps_per_epoch(data.train)

    def test_metrics_flushed_each_epoch(self, float64, tmp_path):
        log = MetricsLog(tmp_path / "metrics.csv")
        trainer, data = _trainer(tiny_run_config(), log)
        trainer.train_epochs(data.train, 2, "warmup")
        assert len(log.frame()) == 8
        assert (tmp_path / "metrics.csv").is_file()


class TestCompaction:
    def test_optimizer_state_follows_compaction(self, float64):
        trainer, data = _trainer(tiny_run_config())
        trainer.train_step(data.train.full())
        adapter = trainer.model.adapters[0]
        m_before = trainer.optimizer.state["L0.q.W_A"]["m"][:, 1].copy()
        prune_rank(adapter, 0)
        trainer.compact()
        assert adapter.rank == 1
        assert trainer.optimizer.state["L0.q.W_A"]["m"].shape == (16, 1)
        np.testing.assert_array_equal(trainer.optimizer.state["L0.q.W_A"]["m"][:, 0], m_before)
        assert trainer.optimizer.params["L0.q.W_A"] is adapter.W_A
        trainer.train_step(data.train.full())


class TestEvaluation:
    def test_metrics_in_range(self, float64):
        trainer, data = _trainer(tiny_run_config())
        ce = evaluate_ce(trainer.model, data.val)
        assert np.isfinite(ce) and ce > 0
        assert 0.0 <= exact_match(trainer.model, data, data.test) <= 1.0
