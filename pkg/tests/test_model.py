import numpy as np
import pytest

from hkdlab.corpus import BOS, EOS
from hkdlab.errors import DivergenceError, SpecError
from hkdlab.model import (
    Batch,
    ModelDims,
    OptimizerState,
    SequenceModel,
    apply_update,
    forward,
    greedy_decode,
    greedy_decode_batch,
    load_checkpoint,
    nll_loss_and_grad,
    perplexity,
    save_checkpoint,
    token_accuracy,
)

DIMS = ModelDims(9, 4, 5)


def _batch(seed=0, lens=((3, 2), (1, 3), (4, 1))):
    rng = np.random.default_rng(seed)
    pairs = [(tuple(rng.integers(4, 9, size=s)), tuple(rng.integers(4, 9, size=t))) for s, t in lens]
    return Batch.from_pairs(pairs, tag=4)


def _fd(f, theta, eps=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def test_parameter_slices_cover_the_flat_vector():
    m = SequenceModel.init(DIMS, 0)
    total = sum(v.size for v in m.p.values())
    assert total == DIMS.n_params == m.theta.size
    m.p["out_b"][:] = 7.0
    assert np.all(m.theta[-DIMS.vocab:] == 7.0)


def test_rows_are_distributions_and_masked():
    m = SequenceModel.init(DIMS, 1, 0.5)
    b = _batch()
    d = forward(m, b)
    np.testing.assert_allclose(d.probs.sum(-1), 1.0, atol=1e-6)
    assert d.log_probs.shape == (3, 4, DIMS.vocab)
    np.testing.assert_array_equal(d.mask, [[1, 1, 1, 0], [1, 1, 1, 1], [1, 1, 0, 0]])


def test_fresh_model_is_near_uniform():
    m = SequenceModel.init(ModelDims(26, 32, 64), 3)
    p = forward(m, _batch(2, lens=((8, 8),) * 4)).probs
    assert (p.max(-1) / p.min(-1)).max() < 10


def test_teacher_forcing_shift():
    b = Batch.from_pairs([((5, 6), (7, 8))])
    assert b.tgt_in.tolist() == [[BOS, 7, 8]]
    assert b.tgt_out.tolist() == [[7, 8, EOS]]


def test_padding_does_not_change_a_sentence():
    m = SequenceModel.init(DIMS, 2, 0.5)
    pair = ((5, 6, 7), (8, 4))
    alone = forward(m, Batch.from_pairs([pair]))
    padded = forward(m, Batch.from_pairs([pair, ((4, 4, 4, 4, 4, 4), (5, 5, 5, 5, 5))]))
    np.testing.assert_allclose(padded.log_probs[0, :3], alone.log_probs[0], atol=1e-12)


def test_nll_gradient_matches_finite_differences():
    m = SequenceModel.init(DIMS, 3, 0.5)
    b = _batch(1)
    _, g = nll_loss_and_grad(m, b)
    num = _fd(lambda th: nll_loss_and_grad(SequenceModel(DIMS, th), b)[0], m.theta)
    rel = np.abs(g - num) / np.maximum(np.abs(num), 1e-6)
    assert rel.max() < 1e-4


def test_perplexity_of_uniform_model_is_vocab_size():
    m = SequenceModel(DIMS)
    assert abs(perplexity(m, _batch()) - DIMS.vocab) < 1e-9


def test_token_accuracy_bounds():
    m = SequenceModel.init(DIMS, 0)
    acc = token_accuracy(m, _batch())
    assert 0.0 <= acc <= 1.0


def test_greedy_decode_stops_at_eos_and_max_len():
    m = SequenceModel(DIMS)
    m.p["out_b"][EOS] = 5.0
    assert greedy_decode(m, (5, 6), 10) == []
    m.p["out_b"][EOS] = 0.0
    m.p["out_b"][6] = 5.0
    assert greedy_decode(m, (5, 6), 4) == [6, 6, 6, 6]


def test_batched_decode_matches_single():
    m = SequenceModel.init(DIMS, 4, 1.0)
    srcs = [(4, 5, 6), (7,), (8, 8, 5, 4)]
    batch = greedy_decode_batch(m, srcs, 6)
    assert batch == [greedy_decode(m, s, 6) for s in srcs]
    with pytest.raises(SpecError):
        greedy_decode(m, (5,), 0)


def test_adam_matches_hand_computation():
    m = SequenceModel(ModelDims(5, 1, 1))
    opt = OptimizerState.for_model(m, lr=0.1)
    g = np.linspace(-1, 1, m.theta.size)
    m1, o1 = apply_update(m, g, opt)
    # first Adam step moves every coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(m1.theta, -0.1 * g / (np.abs(g) + 1e-8), atol=1e-12)
    m2, o2 = apply_update(m1, g, o1)
    mt = 0.9 * 0.1 * g + 0.1 * g
    vt = 0.999 * 0.001 * g * g + 0.001 * g * g
    step = 0.1 * (mt / (1 - 0.9**2)) / (np.sqrt(vt / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(m2.theta, m1.theta - step, atol=1e-12)
    assert o2.step == 2 and opt.step == 0 and np.all(m.theta == 0)


def test_non_finite_gradient_names_slice():
    m = SequenceModel(DIMS)
    g = np.zeros(DIMS.n_params)
    g[-1] = np.nan
    with pytest.raises(DivergenceError, match="out_b"):
        apply_update(m, g, OptimizerState.for_model(m))


def test_checkpoint_roundtrip_is_byte_stable(tmp_path):
    m = SequenceModel.init(DIMS, 5)
    opt = OptimizerState.for_model(m, lr=0.01)
    m, opt = apply_update(m, np.ones(DIMS.n_params), opt)
    save_checkpoint(tmp_path / "a.ckpt", m, opt, {"epoch": 3})
    m2, opt2, extra = load_checkpoint(tmp_path / "a.ckpt")
    assert extra == {"epoch": 3}
    np.testing.assert_array_equal(m2.theta, m.theta)
    np.testing.assert_array_equal(opt2.v, opt.v)
    assert opt2.step == 1
    save_checkpoint(tmp_path / "b.ckpt", m2, opt2, {"epoch": 3})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_bad_checkpoint_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(SpecError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_ids_outside_vocab_rejected():
    m = SequenceModel(DIMS)
    with pytest.raises(SpecError):
        forward(m, Batch.from_pairs([((99,), (5,))]))
