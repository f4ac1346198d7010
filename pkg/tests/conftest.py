import numpy as np
import pytest

from narflow import tensor as T
from narflow.nets import SourceEncoding
from narflow.rng import RandomSource


@pytest.fixture
def f64():
    """Run the test body under float64 (verification precision)."""
    with T.precision("float64"):
        yield


def random_source_encoding(batch: int, t_src: int, d_model: int, seed: int = 0) -> SourceEncoding:
    rng = RandomSource(seed).spawn("enc")
    return SourceEncoding(T.Tensor(rng.normal((batch, t_src, d_model))), np.ones((batch, t_src), dtype=bool))
