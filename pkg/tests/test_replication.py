import pytest

from clid.errors import TrainingDivergence
from clid.replication import DISTILLED, DeskConfig, _pick_ratio, run_desk_replication
from clid.trainer import TrainConfig


@pytest.fixture(scope="module")
def result():
    cfg = DeskConfig(train_queries=12, valid_queries=4, test_queries=6, docs=6, feat_dim=4, trials=2,
                     grid=(0.1, 10.0), train=TrainConfig(epochs=2, hidden=(4,), batch_lists=4))
    return run_desk_replication(cfg)


def test_shape(result):
    assert set(result.ratios) == set(DISTILLED)
    assert all(len(result.test[m]) == 2 for m in ("base", *DISTILLED))
    assert set(result.sweep["clid"]) == {0.1, 10.0}
    assert len(result.checks()) == 6
    assert result.table().splitlines()[0].split()[0] == "method"


def test_paired_gain_zero_against_itself(result):
    gain, half = result.paired_gain("clid", "clid")
    assert gain == 0.0 and half == 0.0


def test_pick_ratio():
    runs = {0.1: [(0.5, None), (0.7, None)], 1.0: [(0.6, None), (0.6, None)], 10.0: [None, (0.9, None)]}
    # 10.0 diverged once; 0.1 and 1.0 tie at 0.6 and the smaller ratio wins
    assert _pick_ratio(runs) == 0.1
    with pytest.raises(TrainingDivergence):
        _pick_ratio({1.0: [None]})
