import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mindshot.config import ExperimentConfig
from mindshot.synthgen import build_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(seed=0, **data):
    cfg = ExperimentConfig(seed=seed)
    d = dict(n_classes=4, train_per_class=4, test_per_class=2, n_subjects=3, canonical_len=16,
             raw_multiple=3, embed_dim=8, noise_sigma=0.1)
    d.update(data)
    for k, v in d.items():
        setattr(cfg.data, k, v)
    cfg.model.hidden = 16
    cfg.model.proj_hidden = 16
    cfg.model.n_blocks = 1
    cfg.pretrain_subjects = (0, 1)
    cfg.new_subject = 2
    cfg.pretrain.epochs = 3
    cfg.pretrain.batch_size = 8
    cfg.adapt.epochs = 3
    cfg.adapt.batch_size = 4
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_ds(tiny_cfg):
    return build_dataset(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
