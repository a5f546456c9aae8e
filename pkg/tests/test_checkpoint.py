import numpy as np
import pytest

from osacost.autodiff import no_grad
from osacost.baselines import build_baseline
from osacost.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_header, save_checkpoint
from osacost.transformer import TransformerConfig, TransformerModel

from toy import m2_batch, random_patients

PATS = random_patients(np.random.default_rng(4), 6)
_, BATCH, VOCABS, TV = m2_batch(PATS)


def _models():
    yield TransformerModel(TransformerConfig(vocab_sizes=VOCABS.sizes(), target_size=len(TV), n_enc_layers=1,
                                             n_dec_layers=1, n_heads=2, model_dim=8, ffn_dim=8, seed=3))
    yield build_baseline("bilstm_attn", vocab_sizes=VOCABS.sizes(), target_size=len(TV), hidden_dim=5,
                         embed_dim=4, attn_dim=3, seed=3)


@pytest.mark.parametrize("model", list(_models()), ids=["transformer", "bilstm_attn"])
def test_round_trip(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.ccf", model, VOCABS, TV, extra={"note": "x"})
    assert path.read_bytes()[:4] == MAGIC
    loaded, vocabs, tv, extra = load_checkpoint(path)
    assert type(loaded) is type(model) and extra == {"note": "x"}
    assert vocabs.sizes() == VOCABS.sizes() and tv == TV
    with no_grad():
        a = model.forward_logits(BATCH).data
        b = loaded.forward_logits(BATCH).data
    np.testing.assert_array_equal(a, b)
    header, _ = read_header(path)
    assert header["kind"] == model.kind
    assert sum(t["nbytes"] for t in header["tensors"]) == 4 * model.n_parameters()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.ccf"
    p.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_truncated(tmp_path):
    model = next(_models())
    path = save_checkpoint(tmp_path / "m.ccf", model, VOCABS, TV)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
