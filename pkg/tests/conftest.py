import numpy as np
import pytest

from semstream.video import Frame, GoP, GOP_SIZE


def random_frame(rng, h=16, w=16, index=0, dyadic=False):
    """Random frame; dyadic=True quantizes samples to n/256 so float
    subtraction round-trips are exact."""
    arr = rng.random((h, w, 3))
    if dyadic:
        arr = np.floor(arr * 256.0) / 256.0
    return Frame(arr.astype(np.float32), timestamp_index=index)


def random_gop(rng, h=16, w=16, gop_id=0, dyadic=False):
    return GoP(gop_id=gop_id,
               frames=tuple(random_frame(rng, h, w, i, dyadic) for i in range(GOP_SIZE)))


def constant_gop(value=0.5, h=16, w=16, gop_id=0):
    return GoP(gop_id=gop_id,
               frames=tuple(Frame(np.full((h, w, 3), value, dtype=np.float32),
                                  timestamp_index=i) for i in range(GOP_SIZE)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
