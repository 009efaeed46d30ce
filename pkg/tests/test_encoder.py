import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import finite_difference_error, toy_cohort
from dacrl.data import ValidationError
from dacrl.encoder import EmbeddingConfig, EventEmbedding, StateEncoder, cohort_tensors, encode_cohort, encode_step, positional_code


def naive_positional_code(v, V, k):
    out = [0.0] * (2 * k)
    for j in range(k):
        out[j] = math.sin(v * j / (V * k))
        out[k + j] = math.cos(v * j / (V * k))
    return out


def test_positional_code_example():
    code = positional_code(50, V=100, k=4)
    assert code[2] == pytest.approx(0.24740, abs=5e-6)
    assert code[4 + 2] == pytest.approx(0.96891, abs=5e-6)
    assert code[2] == math.sin(0.25)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.integers(1, 16), st.data())
def test_positional_code_matches_loop(V, k, data):
    v = data.draw(st.integers(1, V))
    code = positional_code(v, V, k)
    np.testing.assert_allclose(code, naive_positional_code(v, V, k), rtol=1e-12, atol=1e-15)
    assert code[0] == 0.0 and code[k] == 1.0
    assert np.all(np.abs(code) <= 1)


@pytest.mark.parametrize("v", [0, 21])
def test_positional_code_range(v):
    with pytest.raises(ValidationError):
        positional_code(v, 20, 4)


def test_embedding_config_validation():
    with pytest.raises(ValidationError):
        EmbeddingConfig(k=0)


def test_zero_affine_map_gives_zero_embedding():
    emb = EventEmbedding(EmbeddingConfig(k=4, V=5, n_variables=3))
    with torch.no_grad():
        emb.proj.weight.zero_()
        emb.proj.bias.zero_()
    out = emb(torch.tensor([0, 1, 2]), torch.tensor([1, 3, 5]))
    assert torch.count_nonzero(out) == 0


def test_embedding_concatenation_structure():
    cfg = EmbeddingConfig(k=4, V=5, n_variables=3)
    emb = EventEmbedding(cfg)
    a = emb.concat(torch.tensor([1]), torch.tensor([2]))
    b = emb.concat(torch.tensor([1]), torch.tensor([4]))
    # only the value-code half changes with the sub-range
    assert torch.equal(a[:, : cfg.k], b[:, : cfg.k])
    assert not torch.equal(a[:, cfg.k :], b[:, cfg.k :])
    np.testing.assert_allclose(a[0, cfg.k :].detach().numpy(), positional_code(2, 5, 4), rtol=1e-6)
    same = emb(torch.tensor([1, 1]), torch.tensor([2, 2]))
    assert torch.equal(same[0], same[1])
    with pytest.raises(ValidationError):
        emb(torch.tensor([3]), torch.tensor([1]))


def test_encode_step_examples():
    e = torch.tensor([[1.0, -2.0], [0.0, 5.0]])
    assert encode_step(e).tolist() == [1.0, 5.0]
    assert encode_step(e[:1]).tolist() == [1.0, -2.0]
    assert encode_step(e.flip(0)).tolist() == [1.0, 5.0]
    with pytest.raises(ValidationError):
        encode_step(torch.zeros(0, 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_encode_step_permutation_and_monotone(n, k, seed):
    g = torch.Generator().manual_seed(seed)
    e = torch.randn(n + 1, k, generator=g)
    base = encode_step(e[:n])
    perm = torch.randperm(n, generator=g)
    assert torch.equal(encode_step(e[:n][perm]), base)
    assert torch.all(encode_step(e) >= base)


def test_encode_step_mask_ignores_padding():
    e = torch.tensor([[[1.0, -2.0], [9.0, 9.0]]])
    m = torch.tensor([[True, False]])
    assert encode_step(e, m).tolist() == [[1.0, -2.0]]


def _encoder(k=4):
    torch.manual_seed(0)
    return StateEncoder(EmbeddingConfig(k=k, V=4, n_variables=5))


def test_encoder_prefix_property():
    enc = _encoder()
    c = toy_cohort(N=3, T=5)
    c.step_mask[:] = True
    c.event_mask[..., 0] = True
    tt = cohort_tensors(c)
    full = enc(tt["var_ids"], tt["subranges"], tt["event_mask"])
    for t in range(1, 5):
        pre = enc(tt["var_ids"][:, :t], tt["subranges"][:, :t], tt["event_mask"][:, :t])
        assert torch.equal(pre, full[:, :t])


def test_zeroed_recurrence_is_memoryless():
    enc = _encoder()
    k = enc.cfg.k
    with torch.no_grad():
        enc.rnn.weight_hh_l0.zero_()
        # the cell state also carries memory, so shut the forget gate
        enc.rnn.weight_ih_l0[k : 2 * k].zero_()
        enc.rnn.bias_ih_l0[k : 2 * k] = -1e4
    e = torch.randn(1, 4, 4)
    shuffled = e.clone()
    shuffled[0, :3] = e[0, [2, 0, 1]]
    assert torch.equal(enc.encode_sequence(e)[0, 3], enc.encode_sequence(shuffled)[0, 3])


def test_encoder_initialisation_bounds():
    enc = _encoder(k=9)
    for name, p in enc.named_parameters():
        assert p.abs().max() <= 1 / 3 + 1e-12, name


def test_encoder_gradient_matches_finite_differences(float64):
    enc = _encoder()
    c = toy_cohort(N=2, T=3)
    tt = cohort_tensors(c)

    def loss():
        s = enc(tt["var_ids"], tt["subranges"], tt["event_mask"])
        return (s**2).sum() + s[:, -1, 0].sum()

    assert finite_difference_error(loss, enc.parameters()) <= 1e-4


def test_encode_cohort_batches_agree():
    enc = _encoder()
    c = toy_cohort(N=7, T=3)
    a = encode_cohort(enc, c, batch_size=3)
    tt = cohort_tensors(c)
    with torch.no_grad():
        b = enc(tt["var_ids"], tt["subranges"], tt["event_mask"])
    assert a.shape == (7, 3, 4)
    assert torch.allclose(a, b, atol=1e-6)
