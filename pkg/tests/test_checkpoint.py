import numpy as np
import pytest

from core.errors import ArtifactError
from ml.gated_lora import grow_ranks, prune_rank
from ml.tensor import no_grad, precision
from ml.transformer import lm_loss
from services.oracles import tiny_model, tiny_tokens
from utils.checkpoint import MAGIC, load_checkpoint, save_checkpoint

from conftest import tiny_run_config


def _logits(model, tokens):
    with no_grad():
        return model.forward(tokens).data


class TestRoundTrip:
    def test_bitwise_forward(self, tmp_path, float64):
        model = tiny_model(seed=2)
        tokens = tiny_tokens(model)
        path = save_checkpoint(tmp_path / "m.rlck", model)
        loaded, run_config = load_checkpoint(path)
        assert run_config is None
        np.testing.assert_array_equal(_logits(loaded, tokens), _logits(model, tokens))
        assert loaded.module_names() == model.module_names()

    def test_preserves_uneven_allocation_and_gate_state(self, tmp_path, float64, rng):
        model = tiny_model(seed=2)
        grow_ranks(model.adapters[1], 2, rng)
        prune_rank(model.adapters[4], 0)
        model.adapters[2].gate_logits.data[:] = [0.5, -1.0]
        loaded, _ = load_checkpoint(save_checkpoint(tmp_path / "m.rlck", model))
        assert loaded.active_rank_map() == model.active_rank_map()
        assert loaded.adapters[1].rank == 4
        np.testing.assert_array_equal(loaded.adapters[4].gate_state, model.adapters[4].gate_state)
        np.testing.assert_array_equal(loaded.adapters[2].gate_logits.data, [0.5, -1.0])

    def test_dtype_is_kept_under_another_default(self, tmp_path, float64):
        model = tiny_model()
        path = save_checkpoint(tmp_path / "m.rlck", model)
        with precision("float32"):
            loaded, _ = load_checkpoint(path)
        assert loaded.adapters[0].W_A.data.dtype == np.float64
        assert loaded.embedding.data.dtype == np.float64

    def test_run_config_and_hard_concrete(self, tmp_path, float64):
        config = tiny_run_config(regularizers={"tau": 0.5})
        model = tiny_model()
        for adapter in model.adapters.values():
            adapter.install_hard_concrete(log_theta_init=1.0, tau=0.5)
        model.adapters[0].hard_concrete.log_theta.data[:] = [0.25, -0.75]
        loaded, loaded_config = load_checkpoint(save_checkpoint(tmp_path / "m.rlck", model, config))
        assert loaded_config == config
        hc = loaded.adapters[0].hard_concrete
        assert hc is not None and hc.tau == 0.5
        np.testing.assert_array_equal(hc.log_theta.data, [0.25, -0.75])
        tokens = tiny_tokens(model)
        assert lm_loss(loaded, tokens).item() == lm_loss(model, tokens).item()


class TestCorruption:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactError) as err:
            load_checkpoint(tmp_path / "absent.rlck")
        assert err.value.path == tmp_path / "absent.rlck"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rlck"
        path.write_bytes(b"NOT-A-CKPT\nheader_bytes=0\n")
        with pytest.raises(ArtifactError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.rlck", tiny_model())
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(ArtifactError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.rlck", tiny_model())
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ArtifactError, match="trailing"):
            load_checkpoint(path)

    def test_garbled_header(self, tmp_path):
        path = tmp_path / "m.rlck"
        path.write_bytes(MAGIC + b"\nheader_bytes=12\nversion=zzz\n")
        with pytest.raises(ArtifactError):
            load_checkpoint(path)
