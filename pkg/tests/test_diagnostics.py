import numpy as np
import pytest

from curemi import rng as rngmod
from curemi.data import CovariateSpec, Kind, Placement, SurvivalDataset
from curemi.diagnostics import followup_interval_check
from curemi.errors import NoEvents
from curemi.simulation import generate_replicate, get_scenario

SCHEMA = (CovariateSpec("S", Kind.BINARY, Placement.AUXILIARY),)


def _ds(y, d, s=None):
    s = np.zeros(len(y)) if s is None else s
    return SurvivalDataset(y, d, np.asarray(s, float)[:, None], SCHEMA)


def test_last_observation_event_passes():
    c = followup_interval_check(_ds([1.0, 3.0, 5.0], [0, 1, 1]))
    assert c.statistic == 0 and not c.reject and c.last_event == c.y_max == 5.0
    assert c.p_value is None and "unavailable" in c.report()


def test_long_plateau_fails():
    c = followup_interval_check(_ds([1.0, 4.0, 10.0], [1, 1, 0]))
    assert c.statistic == 12 and c.reject
    assert c.as_row()["reject"] is True


def test_stratified_and_no_events():
    ds = _ds([1.0, 4.0, 10.0, 2.0, 3.0], [1, 1, 0, 1, 0], [0, 0, 0, 1, 1])
    one = followup_interval_check(ds, ("S", 1))
    assert (one.n, one.y_max, one.last_event, one.stratum) == (2, 3.0, 2.0, "S=1")
    assert not one.reject
    with pytest.raises(NoEvents):
        followup_interval_check(_ds([1.0, 2.0], [0, 0]))
    with pytest.raises(NoEvents):
        followup_interval_check(_ds([1.0, 2.0], [1, 0], [0, 1]), ("S", 1))


def test_invariances():
    g = np.random.default_rng(0)
    y = g.exponential(3.0, 80)
    d = (g.random(80) < 0.6).astype(int)
    base = followup_interval_check(_ds(y, d))
    early = g.uniform(0, base.last_event, 20)
    more = followup_interval_check(_ds(np.r_[y, early], np.r_[d, np.zeros(20, int)]))
    assert more.statistic == base.statistic
    scaled = followup_interval_check(_ds(2.5 * y, d))
    assert scaled.statistic == pytest.approx(2.5 * base.statistic)
    assert scaled.reject == base.reject


def test_scenario_a_usually_passes():
    cfg = get_scenario("A")
    passes = sum(not followup_interval_check(generate_replicate(cfg, rngmod.stream(77, r))[0])
                 .reject for r in range(100))
    assert passes > 95
