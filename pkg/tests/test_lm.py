import numpy as np
import pytest

from crosstok_kd import tensor as T
from crosstok_kd.lm import (
    ModelConfig,
    TinyLM,
    ce_loss,
    file_digest,
    greedy_decode,
    greedy_decode_batch,
    load_checkpoint,
    save_checkpoint,
)
from crosstok_kd.optim import Adam
from crosstok_kd.tensor import ContractError, Tensor
from helpers import check_gradients


def small(**kw):
    cfg = dict(vocab_size=11, hidden_dim=8, num_layers=2, num_heads=2, max_seq=6, seed=3)
    cfg.update(kw)
    return TinyLM(ModelConfig(**cfg))


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=10, hidden_dim=6, num_heads=4)
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=0, hidden_dim=8)


@pytest.mark.parametrize("n", [1, 2, 5, 6])
def test_output_shapes(n):
    m = small()
    out = m.forward(np.arange(n) % 11, np.arange(n) % 11)
    assert out.hidden.shape == out.input_embeds.shape == out.target_embeds.shape == (n, 8)
    assert out.logits.shape == (n, 11)
    rows = T.softmax_rows(out.logits).data.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-12)


def test_too_long_sequence_rejected():
    with pytest.raises(ContractError):
        small().forward(np.zeros(7, dtype=int))


def test_causality_probe():
    m = small()
    ids = np.array([1, 2, 3, 4, 5, 6])
    base = m.forward(ids).logits.data
    for p in range(len(ids)):
        bumped = ids.copy()
        bumped[p] = 9
        out = m.forward(bumped).logits.data
        np.testing.assert_array_equal(out[:p], base[:p])


def test_target_embeddings_follow_gold_and_vanish_on_padding():
    m = small()
    ids = np.array([[1, 2, 3], [4, 5, 0]])
    gold = np.array([[2, 3, 4], [5, 6, 0]])
    valid = np.array([[True, True, True], [True, True, False]])
    out = m.forward(ids, gold, valid)
    np.testing.assert_array_equal(out.target_embeds.data[0], m.token_embedding.data[[2, 3, 4]])
    assert np.all(out.target_embeds.data[1, 2] == 0.0)


def test_padding_does_not_change_real_positions():
    m = small()
    alone = m.forward(np.array([1, 2, 3])).logits.data
    padded = m.forward(np.array([[1, 2, 3, 0, 0]]), pad_mask=np.array([[1, 1, 1, 0, 0]])).logits.data
    np.testing.assert_allclose(padded[0, :3], alone, atol=1e-12)


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def test_one_layer_one_head_matches_straight_line_reimplementation():
    m = TinyLM(ModelConfig(vocab_size=7, hidden_dim=4, num_layers=1, num_heads=1, max_seq=2, seed=11))
    rng = np.random.default_rng(5)
    for p in m.parameters():  # larger weights make the check less forgiving
        p.data = rng.normal(0, 0.5, p.shape)
    P = {k: v.data for k, v in m.params.items()}
    ids = [3, 6]
    x = P["wte"][ids] + P["wpe"][:2]
    h = _ln(x, P["h0.ln1.g"], P["h0.ln1.b"])
    qkv = h @ P["h0.attn.w"] + P["h0.attn.b"]
    q, k, v = qkv[:, :4], qkv[:, 4:8], qkv[:, 8:]
    s = q @ k.T / 2.0
    a0 = np.array([1.0, 0.0])
    e = np.exp(s[1] - s[1].max())
    a1 = e / e.sum()
    att = np.stack([a0 @ v, a1 @ v])
    x = x + att @ P["h0.proj.w"] + P["h0.proj.b"]
    h = _ln(x, P["h0.ln2.g"], P["h0.ln2.b"])
    x = x + _gelu(h @ P["h0.fc.w"] + P["h0.fc.b"]) @ P["h0.out.w"] + P["h0.out.b"]
    logits = _ln(x, P["lnf.g"], P["lnf.b"]) @ P["head"]
    np.testing.assert_allclose(m.forward(ids).logits.data, logits, atol=1e-9)


def test_ce_examples():
    gold = np.array([1, 0, 2])
    mask = np.ones(3, dtype=bool)
    sure = np.full((3, 4), -1e4)
    sure[np.arange(3), gold] = 1e4
    assert ce_loss(Tensor(sure), gold, mask).item() == 0.0
    assert abs(ce_loss(Tensor(np.zeros((3, 4))), gold, mask).item() - np.log(4)) < 1e-12
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 9))
    g = rng.integers(0, 9, 5)
    mk = np.array([1, 0, 1, 1, 0], dtype=bool)
    lsm = z - np.log(np.exp(z).sum(-1, keepdims=True))
    expected = -lsm[np.arange(5), g][mk].sum() / mk.sum()
    assert abs(ce_loss(Tensor(z), g, mk).item() - expected) < 1e-10
    with pytest.raises(ContractError):
        ce_loss(Tensor(z), g, np.zeros(5, dtype=bool))


def test_end_to_end_gradient_of_ce():
    m = small(vocab_size=10, hidden_dim=8, max_seq=4)
    rng = np.random.default_rng(2)
    for p in m.parameters():
        p.data = p.data + rng.normal(0, 0.3, p.shape)
    ids, gold = np.array([1, 4, 2, 7]), np.array([4, 2, 7, 3])
    mask = np.array([False, True, True, True])

    def loss():
        return ce_loss(m.forward(ids, gold).logits, gold, mask)

    assert check_gradients(loss, m.parameters()) < 1e-3


def test_frozen_model_has_no_trainable_parameters():
    m = small().freeze()
    assert all(not p.requires_grad for p in m.parameters())
    out = m.forward(np.array([1, 2]))
    assert not out.logits.requires_grad


def _eos_model():
    m = small()
    m.params["lnf.g"].data[:] = 0.0
    m.params["lnf.b"].data[:] = 1.0
    m.params["head"].data[:] = 0.0
    m.params["head"].data[:, 10] = 5.0
    return m


def test_decode_stops_immediately_on_eos():
    assert greedy_decode(_eos_model(), [1, 2], max_new=4, eos=10) == []


def test_overfit_model_reproduces_memorised_response():
    m = small(vocab_size=12, max_seq=8, seed=0)
    ids, gold = np.array([0, 5, 6, 7, 8]), np.array([5, 6, 7, 8, 11])
    mask = np.array([False, True, True, True, True])
    opt = Adam(m.parameters(), lr=1e-2)
    for _ in range(300):
        opt.zero_grad()
        ce_loss(m.forward(ids, gold).logits, gold, mask).backward()
        opt.step()
    assert greedy_decode(m, [0, 5], max_new=6, eos=11) == [6, 7, 8]
    assert greedy_decode(m, [0, 5], max_new=6, eos=11) == greedy_decode(m, [0, 5], max_new=6, eos=11)


def test_batched_decode_equals_one_by_one():
    m = small(vocab_size=12, max_seq=8)
    prompts = [[0, 1], [0, 2, 3, 4], [0]]
    batched = greedy_decode_batch(m, prompts, max_new=5, eos=11, pad=10)
    assert batched == [greedy_decode(m, p, max_new=5, eos=11) for p in prompts]


def test_checkpoint_round_trip(tmp_path):
    m = small().freeze()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == m.config and back.frozen
    assert back.checksum() == m.checksum()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert file_digest(path) == file_digest(tmp_path / "again.ckpt")


def test_checkpoint_rejects_other_files(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(bad)
