import numpy as np
import pytest

from modelzoo.utilities import make_rng, split_rng


class TestStreams:
    """Test `def make_rng` and `def split_rng`."""

    def test_seeded(self) -> None:
        """Assert that one seed always gives the same PCG64 stream."""
        first, second = make_rng(11), make_rng(11)
        assert isinstance(first.bit_generator, np.random.PCG64)
        assert np.array_equal(first.standard_normal(5), second.standard_normal(5))

    def test_generators_pass_through(self) -> None:
        """Assert that an existing generator is returned unchanged."""
        rng = make_rng(3)
        assert make_rng(rng) is rng

    def test_split(self) -> None:
        """Assert that children are reproducible, independent and advance the parent."""
        children = split_rng(make_rng(5), 2)
        again = split_rng(make_rng(5), 2)
        draws = [child.random(4) for child in children]
        assert np.array_equal(draws[0], again[0].random(4))
        assert not np.array_equal(draws[0], draws[1])
        parent = make_rng(5)
        first, second = split_rng(parent, 1), split_rng(parent, 1)
        assert not np.array_equal(first[0].random(4), second[0].random(4))

    def test_split_rejects_negative(self) -> None:
        """Assert that a negative number of children is refused."""
        with pytest.raises(ValueError, match="-1 children"):
            split_rng(make_rng(0), -1)
