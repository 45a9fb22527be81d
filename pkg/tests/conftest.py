import pytest

from helpers import make_cluster


@pytest.fixture
def cluster8():
    """8 devices on one node, zero-latency links."""
    return make_cluster(8, 8, intra_lat=0.0, inter_lat=0.0)


@pytest.fixture
def cluster8_lat():
    """8 devices on one node with nonzero link latencies."""
    return make_cluster(8, 8, intra_lat=1e-6, inter_lat=5e-6)
