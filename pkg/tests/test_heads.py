import pytest
import torch

from vedit.errors import InvalidConfig, ShapeMismatch
from vedit.heads import AttentivePooler, HeadConfig, attentive_pool, pool_multi
from vedit.training import randomize_


def _pooler(deep=False, heads=1, seed=0):
    torch.manual_seed(seed)
    return randomize_(AttentivePooler(HeadConfig(dim=8, num_classes=5, heads=heads, deep=deep)).double(), std=0.3, seed=seed)


def test_zero_init_logits():
    pooler = AttentivePooler(HeadConfig(dim=8, num_classes=5))
    assert torch.equal(pooler(torch.randn(3, 4, 8)), torch.zeros(3, 5))


def test_single_token_is_value_path():
    pooler = _pooler()
    x = torch.randn(1, 1, 8, dtype=torch.float64)
    expected = pooler.out(pooler.v(x[:, 0]))
    torch.testing.assert_close(pooler.pool(x), expected)


@pytest.mark.parametrize("deep", [False, True])
def test_permutation_invariance(deep):
    pooler = _pooler(deep=deep, heads=2)
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    perm = torch.randperm(5)
    torch.testing.assert_close(pooler(x), pooler(x[:, perm]))


def test_duplicate_invariance():
    pooler = _pooler(heads=2)
    x = torch.randn(1, 3, 8, dtype=torch.float64)
    torch.testing.assert_close(pooler(x), pooler(torch.cat([x, x], dim=1)))


def test_deep_variant_has_prefix_blocks():
    shallow = AttentivePooler(HeadConfig(dim=8, num_classes=5))
    deep = AttentivePooler(HeadConfig(dim=8, num_classes=5, deep=True))
    assert len(shallow.blocks) == 0 and len(deep.blocks) == 3
    assert deep(torch.randn(2, 4, 8)).shape == (2, 5)


def test_helpers():
    pooler = _pooler()
    a, b = torch.randn(2, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    assert attentive_pool(a, pooler).shape == (5,)
    torch.testing.assert_close(pool_multi([a, b], pooler), attentive_pool(torch.cat([a, b]), pooler))
    with pytest.raises(ShapeMismatch):
        pool_multi([], pooler)


def test_errors():
    with pytest.raises(InvalidConfig):
        HeadConfig(dim=6, num_classes=3, heads=4)
    with pytest.raises(ShapeMismatch):
        AttentivePooler(HeadConfig(dim=8, num_classes=2))(torch.randn(2, 3, 7))
    with pytest.raises(ShapeMismatch):
        AttentivePooler(HeadConfig(dim=8, num_classes=2))(torch.randn(2, 0, 8))
