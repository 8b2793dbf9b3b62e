import numpy as np
import pytest

from favor import tensor as T
from favor.decoder import ADAPTED, DecoderConfig, ToyDecoder, apply_adapters, count_parameters
from favor.tensor import Tensor

CFG = DecoderConfig(vocab_size=12, d_model=16, heads=2, blocks=2, ffn_mult=2, max_context=40)
END = 1


@pytest.fixture
def dec():
    return ToyDecoder(CFG, seed=0)


def prefix(rng, windows=2, n=3, batch=1):
    return Tensor(rng.standard_normal((batch, windows * n, 16)))


def test_empty_prefix_rejected(dec):
    with pytest.raises(ValueError, match="prefix"):
        dec.forward(Tensor(np.zeros((1, 0, 16))), [[2]], [[3, 1]])


def test_logits_shape(dec, rng):
    out = dec.forward(prefix(rng, batch=3), np.full((3, 4), 2), np.full((3, 5), 3))
    assert out.shape == (3, 5, 12)


def test_context_overflow_and_unknown_token(dec, rng):
    with pytest.raises(ValueError, match="max_context"):
        dec.forward(prefix(rng, windows=10), [[2] * 5], [[3] * 8])
    with pytest.raises(ValueError, match="token"):
        dec.forward(prefix(rng), [[12]], [[3]])
    with pytest.raises(ValueError, match="token"):
        dec.forward(prefix(rng), [[2]], [[-1]])


def test_swapping_windows_changes_logits(dec, rng):
    p = prefix(rng, windows=2, n=3)
    swapped = Tensor(np.concatenate([p.data[:, 3:], p.data[:, :3]], axis=1))
    a = dec.forward(p, [[2, 4]], [[5, 1]]).data
    b = dec.forward(swapped, [[2, 4]], [[5, 1]]).data
    assert np.abs(a - b).max() > 1e-6


def test_future_targets_do_not_affect_earlier_logits(dec, rng):
    p = prefix(rng)
    target = rng.integers(0, 12, size=(1, 6))
    base = dec.forward(p, [[2, 3]], target).data
    for t in range(1, 6):
        other = target.copy()
        other[0, t:] = (other[0, t:] + 1 + rng.integers(0, 10, size=6 - t)) % 12
        out = dec.forward(p, [[2, 3]], other).data
        # logits at position i only see target[:i]
        assert np.array_equal(out[0, : t + 1], base[0, : t + 1])


def test_forced_end_token_gives_empty_answer(dec, rng):
    dec.params["head.bias"].data[:] = -50
    dec.params["head.bias"].data[END] = 50
    assert dec.generate(prefix(rng, batch=2), [[2], [3]], 5, END) == [[], []]


def test_generate_is_deterministic_and_bounded(dec, rng):
    p = prefix(rng, batch=2)
    a = dec.generate(p, [[2, 3], [4, 5]], 6, END)
    assert a == dec.generate(p, [[2, 3], [4, 5]], 6, END)
    assert all(len(row) <= 6 and END not in row for row in a)
    with pytest.raises(ValueError):
        dec.generate(p, [[2, 3], [4, 5]], 0, END)


def test_generate_agrees_with_teacher_forcing(dec, rng):
    p = prefix(rng)
    out = dec.generate(p, [[2, 3]], 4, END)[0]
    if len(out) < 4:
        out = out + [END]
    logits = dec.forward(p, [[2, 3]], [out]).data[0]
    assert list(logits.argmax(-1)) == out


def test_fresh_adapters_reproduce_base(dec, rng):
    wrapped = apply_adapters(dec, 4, seed=1)
    p = prefix(rng)
    np.testing.assert_array_equal(wrapped.forward(p, [[2]], [[3, 4]]).data, dec.forward(p, [[2]], [[3, 4]]).data)
    assert set(wrapped.adapters) == {f"block{i}.{t}.{s}" for i in range(2) for t in ADAPTED for s in ("lora_down", "lora_up")}


def test_adapters_are_small():
    big = ToyDecoder(DecoderConfig(vocab_size=57), 0)
    wrapped = apply_adapters(big, 4)
    assert count_parameters(wrapped.adapters) < count_parameters(wrapped.params) / 10


@pytest.mark.parametrize("rank", [0, 16, -1])
def test_adapter_rank_range(dec, rank):
    with pytest.raises(ValueError, match="rank"):
        apply_adapters(dec, rank)


def test_gradients_reach_adapters_only(dec, rng):
    wrapped = apply_adapters(dec, 3)
    for a in wrapped.adapters.values():
        a.data[:] = rng.standard_normal(a.shape) * 0.1
    p = Tensor(rng.standard_normal((1, 6, 16)), requires_grad=True)
    T.cross_entropy(wrapped.forward(p, [[2]], [[3, 4]]), np.array([[3, 4]])).backward()
    assert all(not t.requires_grad and t.grad is None for t in wrapped.params.values())
    assert all(np.abs(a.grad).max() > 0 for a in wrapped.adapters.values())
    assert np.abs(p.grad).max() > 0
    # the base copy is untouched by the wrap
    assert all(t.requires_grad for t in dec.params.values())
