import numpy as np
import pytest
from pydantic import ValidationError

from core.errors import ConfigurationError
from schemas.config import TaskSpec
from tasks.background import BatchPrefetcher
from tasks.synthetic import PAD, gen_task, sep_token, target_for


def _spec(**kw) -> TaskSpec:
    base = {"vocab": 8, "seq_len": 9, "train_size": 64, "val_size": 16, "test_size": 16}
    return TaskSpec(**{**base, **kw})


class TestTargets:
    def test_copy(self):
        np.testing.assert_array_equal(target_for("copy", np.array([3, 1, 2]), 8), [3, 1, 2])

    def test_reverse(self):
        np.testing.assert_array_equal(target_for("reverse", np.array([3, 1, 2]), 8), [2, 1, 3])

    def test_modular_add_carries_and_wraps(self):
        # base 6, two digits: 15 + 23 = 38 → 38 mod 36 = 2 → digits (0, 2)
        a = [2 + 1, 3 + 1]
        b = [3 + 1, 5 + 1]
        np.testing.assert_array_equal(target_for("modular_add", np.array(a + b), 8), [0 + 1, 2 + 1])


class TestLayout:
    @pytest.mark.parametrize("kind", ["copy", "reverse", "modular_add"])
    def test_mask_covers_exactly_the_targets(self, kind):
        data = gen_task(_spec(kind=kind))
        tokens, mask = data.train.tokens, data.train.loss_mask
        assert tokens.shape == (64, 9)
        assert np.all(mask.sum(axis=1) == data.target_len)
        np.testing.assert_array_equal(data.targets(data.train), tokens[mask].reshape(64, -1))
        assert np.all(tokens[:, data.prompt_len - 1] == sep_token(8))

    def test_copy_layout(self):
        data = gen_task(_spec(kind="copy"))
        row = data.train.tokens[0]
        k = data.target_len
        np.testing.assert_array_equal(row[:k], row[k + 1:2 * k + 1])
        assert np.all(row[2 * k + 1:] == PAD)

    def test_targets_follow_rule(self):
        data = gen_task(_spec(kind="modular_add", seq_len=11))
        prompts = data.prompts(data.test)
        k = data.target_len
        operands = np.concatenate([prompts[:, :k], prompts[:, k + 1:2 * k + 1]], axis=1)
        np.testing.assert_array_equal(data.targets(data.test), target_for("modular_add", operands, 8))


class TestGeneration:
    def test_same_seed_same_data(self):
        a, b = gen_task(_spec(seed=3)), gen_task(_spec(seed=3))
        np.testing.assert_array_equal(a.train.tokens, b.train.tokens)
        np.testing.assert_array_equal(a.test.tokens, b.test.tokens)

    def test_different_seed_different_first_batch(self):
        a, b = gen_task(_spec(seed=1)), gen_task(_spec(seed=2))
        assert not np.array_equal(next(a.train.batches(8)).tokens, next(b.train.batches(8)).tokens)

    def test_splits_are_disjoint(self):
        data = gen_task(_spec(train_size=120, val_size=40, test_size=40))
        rows = [set(map(tuple, s.tokens)) for s in (data.train, data.val, data.test)]
        assert not rows[0] & rows[1] and not rows[0] & rows[2] and not rows[1] & rows[2]
        assert len(rows[0]) == 120

    def test_space_too_small(self):
        with pytest.raises(ConfigurationError):
            gen_task(_spec(seq_len=3, train_size=64))

    def test_seq_len_too_short_is_rejected(self):
        with pytest.raises(ValidationError):
            _spec(kind="modular_add", seq_len=4)


class TestBatches:
    def test_sample_is_sorted_subset_with_stable_id(self):
        data = gen_task(_spec())
        a = data.val.sample(8, np.random.default_rng(0))
        b = data.val.sample(8, np.random.default_rng(0))
        assert a.batch_id == b.batch_id and a.batch_id.startswith("val:")
        assert len(a) == 8

    def test_subset(self):
        data = gen_task(_spec())
        part = data.train.subset(np.array([0, 5]), "train.d2")
        np.testing.assert_array_equal(part.tokens, data.train.tokens[[0, 5]])
        assert part.name == "train.d2"

    def test_prefetch_preserves_order(self):
        data = gen_task(_spec())
        direct = [b.batch_id for b in data.train.batches(10, np.random.default_rng(4))]
        prefetched = [b.batch_id for b in BatchPrefetcher(data.train, 10, np.random.default_rng(4), depth=2)]
        assert prefetched == direct
        assert len(direct) == 7

    def test_prefetch_surfaces_producer_errors(self):
        class Broken:
            name = "broken"

            def batches(self, batch_size, rng):
                yield from ()
                raise RuntimeError("boom")

        with pytest.raises(RuntimeError, match="boom"):
            list(BatchPrefetcher(Broken(), 4, None))
