import pytest
import torch

from physsm.config import ExperimentConfig


torch.set_num_threads(1)


def micro_config(**overrides) -> ExperimentConfig:
    """Small-but-real pendulum setup for fast integration tests."""
    base = dict(
        system="pendulum",
        n_train=6,
        n_val=2,
        n_test=3,
        horizon=50,
        dt=0.05,
        noise_sigma=0.1,
        drop_rate=0.2,
        window=25,
        forecast=10,
        epochs=3,
        batch_size=3,
        enc_mlp_hidden=12,
        enc_mlp_layers=1,
        enc_ssm_width=8,
        enc_ssm_layers=1,
        learner_width=8,
        learner_layers=1,
        learner_b_width=4,
        learner_b_layers=1,
        dd_width=8,
        dd_layers=1,
        dec_hidden=12,
        dec_layers=1,
        train_seeds=(0,),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def micro_cfg():
    return micro_config()
