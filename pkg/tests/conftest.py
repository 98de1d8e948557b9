import numpy as np
import pytest
from hypothesis import settings

from impspec.gp import FittedModel, ModelParams, TwoStageData
from impspec.kernels import KernelParams

settings.register_profile("impspec", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("impspec")


def make_data(rng, n=20, dw=1, dv=1, dz=1, fusion=False, n2=None):
    """Small random two-stage dataset; ``dw=0`` drops W."""
    n2 = n if n2 is None else n2
    z = rng.normal(size=(n2 if fusion else n, dz))
    v = np.sin(z @ np.ones((dz, dv))) + 0.3 * rng.normal(size=(z.shape[0], dv))
    w = None if dw == 0 else rng.normal(size=(n, dw))
    if fusion:
        zz = rng.normal(size=(n, dz))
        v1 = np.sin(zz @ np.ones((dz, dv))) + 0.3 * rng.normal(size=(n, dv))
        y = np.cos(v1).sum(1) + (0 if w is None else w.sum(1)) + 0.2 * rng.normal(size=n)
        return TwoStageData(y, w, v1, v, z, shared=False)
    y = np.cos(v).sum(1) + (0 if w is None else w.sum(1)) + 0.2 * rng.normal(size=n)
    return TwoStageData(y, w, v, v.copy(), z, shared=True)


def make_params(rng, data, sigma2=None, eta2=None):
    def kp(d, amp=1.0):
        return KernelParams(rng.uniform(0.5, 2.0, d), amp)

    kw = None if data.w1 is None else kp(data.w1.shape[1])
    return ModelParams(
        kw,
        kp(data.v1.shape[1], rng.uniform(0.5, 2.0)),
        kp(data.z2.shape[1], rng.uniform(0.5, 2.0)),
        rng.uniform(0.05, 0.5) if sigma2 is None else sigma2,
        rng.uniform(0.05, 0.5) if eta2 is None else eta2,
    )


def make_model(seed, **kw):
    rng = np.random.default_rng(seed)
    data = make_data(rng, **kw)
    return FittedModel(data, make_params(rng, data))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
