import numpy as np
import pytest

from conftest import condition, random_seq, tiny_models
from stylized_dialogue import tensor as T
from stylized_dialogue.data import BOS, EOS, S0, S1
from stylized_dialogue.models import (
    ContractError,
    DecodeState,
    ModelConfig,
    decode_batch,
    encode_batch,
    pad_batch,
    param_count_formula,
    sequence_loss,
    truncate,
    with_config,
)
from stylized_dialogue.tensor import Tensor, grad_check


def full_model_gradient_error(seed):
    """Worst element-wise relative error over every parameter of a 2-block
    stylized model, plus the largest analytic and numeric key-bias gradients.

    The key bias shifts every score of a query equally, so softmax cancels
    it and its exact gradient is zero; relative error is undefined there and
    it is checked as an absolute zero instead.
    """
    sty, _ = tiny_models(seed, vocab_size=10, hidden=4, n_heads=2, max_len=8)
    condition(sty, seed + 55)
    rng = np.random.default_rng(seed)
    src = [random_seq(rng, 10, 1, 4) for _ in range(2)]
    tgt = [random_seq(rng, 10, 1, 4) for _ in range(2)]

    def loss(_):
        return sequence_loss(sty, src, tgt, [0, 1])

    worst, bk_analytic, bk_numeric = 0.0, 0.0, 0.0
    for name, p in sty.named_params():
        if name.endswith(".bk"):
            p.grad = None
            T.backward(loss(None))
            bk_analytic = max(bk_analytic, float(np.abs(p.grad).max()))
            p.grad = None
            flat = p.data.reshape(-1)
            with T.no_grad():
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + 1e-5
                    up = loss(None).item()
                    flat[i] = orig - 1e-5
                    down = loss(None).item()
                    flat[i] = orig
                    bk_numeric = max(bk_numeric, abs(up - down) / 2e-5)
        else:
            worst = max(worst, grad_check(loss, p))
    return worst, bk_analytic, bk_numeric


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradients(seed):
    worst, bk_analytic, bk_numeric = full_model_gradient_error(seed)
    assert worst < 1e-4
    assert bk_analytic < 1e-14
    assert bk_numeric < 1e-9  # roundoff only


def test_param_count_matches_closed_form():
    for h, heads, layers, V in [(8, 2, 2, 16), (12, 3, 1, 30), (64, 2, 2, 130)]:
        sty, inv = tiny_models(vocab_size=V, hidden=h, n_heads=heads, n_layers=layers)
        assert sty.n_params() == param_count_formula(sty.config, "stylized")
        assert inv.n_params() == param_count_formula(inv.config, "inverse")
        assert sty.n_params() - inv.n_params() == 2 * h


def test_encoder_and_decoder_share_storage():
    sty, inv = tiny_models()
    for model in (sty, inv):
        model.encoder.blocks[0].wq.data[0, 0] = 123.0
        assert model.decoder.blocks[0].wq.data[0, 0] == 123.0
        model.encoder.tok_emb.data[3] = 7.0
        assert np.all(model.decoder.tok_emb.data[3] == 7.0)
    # the two sub-modules do not share with each other
    assert sty.weights.tok_emb is not inv.weights.tok_emb


def test_start_tokens():
    sty, inv = tiny_models()
    assert (sty.start_token(0), sty.start_token(1), inv.start_token(None)) == (S0, S1, BOS)
    plain = with_config(sty, style_start_token=False)
    assert plain.start_token(1) == BOS


def test_style_contract_errors():
    sty, inv = tiny_models()
    ids, valid = pad_batch([[1, 7, 2]])
    enc = encode_batch(sty, ids, valid)
    with pytest.raises(ContractError):
        decode_batch(sty, enc, valid, ids, valid, None)
    with pytest.raises(ContractError):
        decode_batch(inv, encode_batch(inv, ids, valid), valid, ids, valid, np.array([0]))
    with pytest.raises(ContractError):
        inv.style_vectors(np.array([0]))
    with pytest.raises(ContractError):
        decode_batch(sty, enc, valid, np.zeros((1, 0), dtype=np.int64), np.zeros((1, 0), bool), np.array([0]))


def test_inverse_forward_never_reads_style_table():
    _, inv = tiny_models()
    rng = np.random.default_rng(0)
    src = [random_seq(rng, 16) for _ in range(4)]
    tgt = [random_seq(rng, 16) for _ in range(4)]
    T.backward(sequence_loss(inv, src, tgt, None))
    assert inv.trace["style_table_reads"] == 0
    assert inv.trace["style_routing"] == 0


def test_style_routing_applied_in_every_decoder_block():
    sty, _ = tiny_models(n_layers=3)
    ids, valid = pad_batch([[1, 7, 2]])
    enc = encode_batch(sty, ids, valid)
    before = sty.trace["style_routing"]
    decode_batch(sty, enc, valid, np.array([[S1, 8]]), np.ones((1, 2), bool), np.array([1]))
    assert sty.trace["style_routing"] - before == 3


def test_zero_style_table_equals_unrouted_model():
    sty, _ = tiny_models(std=0.3)
    sty.weights.style_table.data[...] = 0.0
    states_on, states_off = [], []
    ids, valid = pad_batch([[1, 7, 9, 2]])
    prefix, pv = np.array([[S1, 8, 10]]), np.ones((1, 3), bool)
    enc = encode_batch(sty, ids, valid)
    on = decode_batch(sty, enc, valid, prefix, pv, np.array([1]), states_on)
    off = decode_batch(with_config(sty, routing=False), enc, valid, prefix, pv, np.array([1]), states_off)
    assert np.array_equal(on.data, off.data)
    for s in states_on:
        assert np.array_equal(s.r_merge.data, s.r_avg.data)


@pytest.mark.parametrize("seed", range(20))
def test_decoder_outputs_are_causal(seed):
    rng = np.random.default_rng(seed)
    sty, _ = tiny_models(seed, std=0.3)
    l = int(rng.integers(2, 9))
    prefix = rng.integers(3, 16, size=(1, l))
    ids, valid = pad_batch([random_seq(rng, 16)])
    enc = encode_batch(sty, ids, valid)
    pv = np.ones((1, l), bool)
    base = decode_batch(sty, enc, valid, prefix, pv, np.array([1])).data
    j = int(rng.integers(0, l))
    changed = prefix.copy()
    changed[0, j] = (changed[0, j] + 1 - 3) % 13 + 3
    out = decode_batch(sty, enc, valid, changed, pv, np.array([1])).data
    assert np.array_equal(out[0, :j], base[0, :j])


def test_padding_does_not_change_logits():
    sty, _ = tiny_models(std=0.3)
    a, b = [1, 7, 8, 2], [1, 9, 10, 11, 12, 13, 2]
    ids, valid = pad_batch([a, b])
    enc = encode_batch(sty, ids, valid)
    prefix = np.array([[S0, 7], [S0, 9]])
    both = decode_batch(sty, enc, valid, prefix, np.ones((2, 2), bool), np.array([0, 0])).data
    ids1, valid1 = pad_batch([a])
    alone = decode_batch(sty, encode_batch(sty, ids1, valid1), valid1, prefix[:1], np.ones((1, 2), bool), np.array([0])).data
    assert np.allclose(both[0], alone[0], atol=1e-12)


def test_sequence_loss_is_mean_of_per_pair_losses():
    sty, _ = tiny_models(std=0.3)
    rng = np.random.default_rng(1)
    src = [random_seq(rng, 16) for _ in range(3)]
    tgt = [random_seq(rng, 16, 1, 7) for _ in range(3)]
    each = [sequence_loss(sty, [s], [t], [0]).item() for s, t in zip(src, tgt)]
    assert sequence_loss(sty, src, tgt, [0, 0, 0]).item() == pytest.approx(np.mean(each), abs=1e-12)


def test_truncate_keeps_head_and_terminates():
    assert truncate([1, 5, 6, 7, 8, 2], 4) == [1, 5, 6, 2]
    assert truncate([1, 5, 2], 4) == [1, 5, 2]


@pytest.mark.parametrize("stylized", [True, False])
def test_cached_decoding_matches_full_forward(stylized):
    sty, inv = tiny_models(3, std=0.3, max_len=10)
    model = sty if stylized else inv
    rng = np.random.default_rng(2)
    src = [random_seq(rng, 16, 1, 3), random_seq(rng, 16, 4, 6), random_seq(rng, 16, 2, 2)]
    ids, valid = pad_batch(src)
    styles = np.array([0, 1, 1]) if stylized else None
    with T.no_grad():
        enc = encode_batch(model, ids, valid)
        state = DecodeState(model, enc.data, valid, styles)
        prefix = np.array([[model.start_token(None if styles is None else int(s))] for s in (styles if stylized else [0, 0, 0])])
        rows = np.arange(3)
        for _ in range(6):
            logp = state.step(prefix[:, -1])
            full = decode_batch(model, Tensor(enc.data[rows]), valid[rows], prefix, np.ones(prefix.shape, bool), None if styles is None else styles[rows])
            ref = T.log_softmax(full).data[:, -1]
            assert np.allclose(logp, ref, atol=1e-10)
            # shuffle and duplicate rows the way beam search does
            keep = rng.integers(0, len(rows), size=3)
            state.reorder(keep)
            rows = rows[keep]
            prefix = np.concatenate([prefix[keep], rng.integers(6, 16, size=(3, 1))], axis=1)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=3).validate()
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, hidden=10, n_heads=3).validate()
