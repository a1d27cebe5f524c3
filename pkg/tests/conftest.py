import sambalm  # noqa: F401  (sets BLAS thread defaults before numpy loads)
import numpy as np
import pytest

from sambalm.model import ModelConfig, build

_PERIOD = {"samba": 4, "mamba-swa-mlp": 3, "mamba-mlp": 2, "mamba": 1, "llama-swa": 2}


def toy_config(arch="samba", **over) -> ModelConfig:
    base = dict(d_m=16, d_e=32, d_r=2, d_s=4, k=4, d_p=24, w=8,
                n_layers=_PERIOD[arch], n_q_heads=2, n_kv_heads=1, head_dim=8,
                vocab_size=61, arch=arch, seed=7)
    base.update(over)
    return ModelConfig(**base)


def toy_model(arch="samba", **over):
    return build(toy_config(arch, **over))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
