import math

import numpy as np
import pytest

from chda.channelgen import (ChannelParams, ChannelPrior, Normal, channel_fraction, generate_field,
                             generate_training_set, sample_params)
from chda.fieldcore import GridSpec, RngStream

LOW, HIGH = math.log10(50.0), math.log10(2000.0)


def test_param_batch_means():
    r = RngStream(2024)
    ps = [sample_params(r.fork(i)) for i in range(1000)]
    assert 87.0 <= np.mean([p.orientation for p in ps]) <= 93.0
    assert 0.395 <= np.mean([p.channel_proportion for p in ps]) <= 0.405


def test_zero_std_gives_means():
    prior = ChannelPrior().deterministic()
    r = RngStream(0)
    for _ in range(5):
        p = sample_params(r, prior)
        assert (p.orientation, p.amplitude, p.wavelength) == (90.0, 250.0, 2000.0)
        assert (p.width_thickness_ratio, p.channel_proportion, p.undulation_wavelength) == (50.0, 0.40, 250.0)


def test_proportion_clamped():
    prior = ChannelPrior(channel_proportion=Normal(0.0, 0.0))
    assert sample_params(RngStream(0), prior).channel_proportion == 0.05
    with pytest.raises(ValueError):
        ChannelParams(90, 250, 2000, 50, 0.99, 250)


def test_prior_from_dict_rejects_unknown():
    with pytest.raises(KeyError):
        ChannelPrior.from_dict({"bogus": 1})
    p = ChannelPrior.from_dict({"orientation": {"mean": 45.0, "std": 0.0}})
    assert p.orientation == Normal(45.0, 0.0)


def test_field_is_two_valued():
    g = GridSpec()
    r = RngStream(1)
    f = generate_field(sample_params(r), g, r)
    vals = set(np.unique(f.values).round(5))
    assert vals <= {1.69897, 3.30103}
    assert np.isclose(LOW, 1.69897, atol=5e-6) and np.isclose(HIGH, 3.30103, atol=5e-6)


def test_realized_fraction_band():
    g = GridSpec()
    prior = ChannelPrior(channel_proportion=Normal(0.40, 0.0))
    r = RngStream(5)
    for k in range(200):
        rr = r.fork(k)
        f = generate_field(sample_params(rr, prior), g, rr)
        frac = channel_fraction(f.values)
        assert 0.40 <= frac <= 0.48


def test_mean_fraction_over_500():
    e = generate_training_set(500, GridSpec(), RngStream(99))
    assert abs(channel_fraction(e.values).mean() - 0.40) <= 0.02


def test_horizontal_bands():
    g = GridSpec(32, 32)
    p = ChannelParams(0.0, 0.0, 2000.0, 50.0, 0.3, 250.0, undulation_amplitude=0.0)
    f = generate_field(p, g, RngStream(4))
    assert np.all(f.values == f.values[:, :1])


def _first_zero(ac):
    idx = np.nonzero(ac <= 0)[0]
    return idx[0] if idx.size else ac.size


def _autocorr(rows):
    rows = rows - rows.mean(axis=1, keepdims=True)
    n = rows.shape[1]
    ac = np.array([np.mean(np.sum(rows[:, : n - h] * rows[:, h:], axis=1)) for h in range(n // 2)])
    return ac / ac[0]


def test_directional_anisotropy():
    g = GridSpec()
    prior = ChannelPrior(orientation=Normal(90.0, 0.0))
    e = generate_training_set(40, g, RngStream(8), prior)
    along = np.mean([_first_zero(_autocorr(v.T)) for v in e.values])   # along y (columns)
    across = np.mean([_first_zero(_autocorr(v)) for v in e.values])    # along x (rows)
    assert along > across


def test_training_set_sizes_and_determinism():
    g = GridSpec(16, 16)
    a = generate_training_set(1, g, RngStream(3))
    assert len(a) == 1 and a.tag == "prior"
    b = generate_training_set(6, g, RngStream(3))
    c = generate_training_set(6, g, RngStream(3))
    assert b.values.tobytes() == c.values.tobytes()
    assert not np.array_equal(b.values[0], b.values[1])


@pytest.mark.slow
def test_full_training_set_length():
    e = generate_training_set(3242, GridSpec(), RngStream(1))
    assert len(e) == 3242
