import numpy as np
import pytest

from flowchain.chain import FlowChainModel


def randomize(params, rng, scale=0.3, skip=("base.",)):
    """Perturb every weight so zero-initialized output layers stop being identities."""
    out = {}
    for k, v in params.items():
        if k.startswith(skip):
            out[k] = v.copy()
        else:
            out[k] = v + scale * rng.standard_normal(v.shape)
    return out


def random_model(mode="bijective", seed=0, hidden=16, depth=2, scale=1.0, perturb=0.3, **kw):
    model = FlowChainModel(mode=mode, hidden=hidden, depth=depth, enc_hidden=kw.pop("enc_hidden", 8), seed=seed, scale=scale, **kw)
    if perturb:
        model = model.with_params(randomize(model.params, np.random.default_rng(seed + 1000), perturb))
    return model


def numerical_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
