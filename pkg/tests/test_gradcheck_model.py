import numpy as np
import pytest

from osacost.autodiff import backward, default_dtype, no_grad
from osacost.baselines import build_baseline
from osacost.training import m2_objective
from osacost.transformer import TransformerConfig, TransformerModel

from toy import TABLE, m2_batch, random_patients

N_COORDS = 24


def build(kind, vocabs, tv, seed):
    if kind == "transformer":
        return TransformerModel(TransformerConfig(
            vocab_sizes=vocabs.sizes(), target_size=len(tv), n_enc_layers=1, n_dec_layers=1, n_heads=2,
            model_dim=8, ffn_dim=12, dropout=0.0, max_input_len=40, seed=seed))
    return build_baseline(kind, vocab_sizes=vocabs.sizes(), target_size=len(tv), hidden_dim=5, embed_dim=4,
                          attn_dim=3, dropout=0.0, seed=seed)


def model_grad_error(kind, seed, h=1e-6):
    """Norm-relative error between backprop and central differences on sampled coordinates."""
    rng = np.random.default_rng(seed)
    pats = random_patients(rng, 4, max_visits=7)
    with default_dtype(np.float64):
        _, batch, vocabs, tv = m2_batch(pats)
        model = build(kind, vocabs, tv, seed)
        objective = m2_objective(TABLE.vector(tv))
        loss, _ = objective(model, batch, False)
        backward(loss)
        params = model.parameters()
        sizes = np.array([p.size for p in params])
        picks = rng.choice(sizes.sum(), size=N_COORDS, replace=False)
        owner = np.searchsorted(np.cumsum(sizes), picks, side="right")
        ad, fd = [], []
        for flat, k in zip(picks, owner):
            p = params[k]
            idx = np.unravel_index(flat - (sizes[:k].sum()), p.shape)
            ad.append(0.0 if p.grad is None else p.grad[idx])
            orig = p.data[idx]
            vals = []
            for x in (orig + h, orig - h):
                p.data[idx] = x
                with no_grad():
                    vals.append(float(objective(model, batch, False)[0].data))
            p.data[idx] = orig
            fd.append((vals[0] - vals[1]) / (2 * h))
    ad, fd = np.array(ad), np.array(fd)
    return float(np.linalg.norm(ad - fd) / max(np.linalg.norm(ad) + np.linalg.norm(fd), 1e-12))


@pytest.mark.parametrize("kind", ["transformer", "lstm_attn", "bilstm"])
def test_model_gradient(kind):
    for seed in range(3):
        assert model_grad_error(kind, seed) <= 1e-3
