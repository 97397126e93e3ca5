import pytest

from gradcheck import chain_errors


@pytest.mark.parametrize("topogeo,pointwise", [(True, False), (True, True), (False, False)])
def test_full_chain_matches_finite_differences(topogeo, pointwise):
    worst = chain_errors(seed=0, topogeo=topogeo, pointwise=pointwise)
    bad = {k: v for k, v in worst.items() if v >= 1e-3}
    assert not bad, bad
    groups = {k.split("/")[0] for k in worst}
    assert {"cloud", "nonrigid", "skin"} <= groups
    if topogeo:
        assert {"features", "fusion"} <= groups
