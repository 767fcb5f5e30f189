import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expredit.exprcode import (CodeLayout, code_from_active, code_from_labels, code_label, edit_code, make_code,
                               neutral_code, sample_code, sweep_code)


def onehot(k, K):
    y = np.zeros(K)
    y[k] = 1
    return y


def test_make_code_worked_example():
    c = make_code([1, 0], [0.5, -0.3], CodeLayout(2, 2))
    np.testing.assert_array_equal(c, [0.5, 0.3, -0.5, -0.3])


def test_zero_noise_gives_zero_code():
    np.testing.assert_array_equal(make_code([0, 1], np.zeros(2), CodeLayout(2, 2)), np.zeros(4))


def test_active_block_is_negated_inactive():
    layout = CodeLayout(3, 5)
    z = np.random.default_rng(0).uniform(-1, 1, 5)
    blocks = layout.blocks(make_code(onehot(1, 3), z, layout))
    np.testing.assert_array_equal(blocks[1], -blocks[0])
    np.testing.assert_array_equal(blocks[1], -blocks[2])


def test_make_code_errors():
    layout = CodeLayout(3, 5)
    with pytest.raises(ValueError):
        make_code(onehot(0, 3), np.zeros(4), layout)
    with pytest.raises(ValueError):
        make_code([1, 1, 0], np.zeros(5), layout)
    with pytest.raises(ValueError):
        CodeLayout(1, 5)


layouts = st.builds(CodeLayout, st.integers(2, 6), st.integers(1, 6))


@settings(max_examples=200)
@given(layouts, st.data())
def test_controller_structure(layout, data):
    k = data.draw(st.integers(0, layout.K - 1))
    z = data.draw(arrays(np.float64, layout.d, elements=st.floats(-0.999, 0.999)))
    c = make_code(onehot(k, layout.K), z, layout)
    blocks = layout.blocks(c)
    assert np.abs(np.abs(blocks) - np.abs(z)).max() == 0.0
    assert np.all(blocks[k] >= 0)
    assert np.all(np.delete(blocks, k, axis=0) <= 0)
    assert np.all(np.abs(c) <= 1)
    if np.any(z != 0):
        assert code_label(c, layout) == k


def test_sample_code_reproducible_and_structured():
    layout = CodeLayout(3, 5)
    y = np.tile(onehot(2, 3), (4, 1))
    a = sample_code(y, np.random.default_rng(9), layout)
    b = sample_code(y, np.random.default_rng(9), layout)
    np.testing.assert_array_equal(a, b)
    assert (code_label(a, layout) == 2).all()


def test_sample_code_magnitude_mean():
    layout = CodeLayout(3, 5)
    y = np.tile(onehot(0, 3), (10_000, 1))
    c = sample_code(y, np.random.default_rng(1), layout)
    active = layout.blocks(c)[:, 0]
    assert 0.48 <= active.mean() <= 0.52


def test_edit_code():
    layout = CodeLayout(3, 2)
    np.testing.assert_array_equal(edit_code(1, layout), [-1, -1, 1, 1, -1, -1])
    a, b = layout.blocks(edit_code(0, layout)), layout.blocks(edit_code(2, layout))
    differing = {i for i in range(3) if not np.array_equal(a[i], b[i])}
    assert differing == {0, 2}
    np.testing.assert_array_equal(edit_code(1, layout), make_code(onehot(1, 3), np.ones(2), layout))
    with pytest.raises(IndexError):
        edit_code(3, layout)


def test_sweep_code():
    layout = CodeLayout(2, 3)
    np.testing.assert_array_equal(sweep_code(0, 1, layout), [-1, 1, -1, -1, -1, -1])
    codes = [sweep_code(1, m, CodeLayout(3, 5)) for m in range(5)]
    assert all((c == 1).sum() == 1 for c in codes)
    for i in range(5):
        for j in range(i + 1, 5):
            assert (codes[i] != codes[j]).sum() == 2
    with pytest.raises(IndexError):
        sweep_code(0, 3, layout)
    with pytest.raises(IndexError):
        sweep_code(2, 0, layout)


def test_neutral_code():
    c = neutral_code(CodeLayout(3, 5))
    assert c.shape == (15,) and np.all(c == -1)
    assert not np.any(CodeLayout(3, 5).blocks(c).mean(-1) > 0)


@settings(max_examples=50)
@given(layouts, st.data())
def test_test_time_codes_in_range(layout, data):
    k = data.draw(st.integers(0, layout.K - 1))
    m = data.draw(st.integers(0, layout.d - 1))
    for c in (edit_code(k, layout), sweep_code(k, m, layout), neutral_code(layout)):
        assert c.shape == (layout.size,)
        assert np.all(np.abs(c) <= 1)


def test_torch_twins_match_numpy():
    layout = CodeLayout(3, 5)
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, 16)
    z = rng.uniform(-1, 1, (16, 5))
    expected = make_code(np.eye(3)[labels], z, layout)
    got = code_from_labels(torch.from_numpy(labels), torch.from_numpy(z), 3)
    np.testing.assert_array_equal(got.numpy(), expected)
    rebuilt = code_from_active(torch.from_numpy(np.abs(z)), torch.from_numpy(labels), 3)
    np.testing.assert_array_equal(rebuilt.numpy(), expected)
