"""Counter-based stream tests."""

import numpy as np
import pytest

from freqlm.rng import BATCH, DECODE, INIT, stream


class TestStream:
    def test_same_key_same_draws(self):
        a = stream(7, INIT).random(10)
        b = stream(7, INIT).random(10)
        np.testing.assert_array_equal(a, b)

    def test_every_key_component_matters(self):
        base = stream(7, DECODE, 1, 2).random(8)
        for other in (stream(8, DECODE, 1, 2), stream(7, BATCH, 1, 2),
                      stream(7, DECODE, 2, 2), stream(7, DECODE, 1, 3),
                      stream(7, DECODE, 1)):
            assert not np.array_equal(base, other.random(8))

    def test_streams_are_order_free(self):
        # drawing from one stream never perturbs another
        s1 = stream(0, BATCH, 5)
        s1.random(1000)
        fresh = stream(0, BATCH, 6).random(4)
        np.testing.assert_array_equal(fresh, stream(0, BATCH, 6).random(4))

    def test_index_limit(self):
        with pytest.raises(ValueError):
            stream(0, 1, 2, 3, 4, 5)

    def test_negative_components_rejected(self):
        with pytest.raises(ValueError):
            stream(-1, INIT)
        with pytest.raises(ValueError):
            stream(0, INIT, -2)

    def test_uniformity_sanity(self):
        draws = stream(3, BATCH, 0).random(100_000)
        assert abs(draws.mean() - 0.5) < 0.01
        assert abs(draws.var() - 1 / 12) < 0.01
