import numpy as np
import pytest

from pai.acquisition import AcquisitionConfig
from pai.gp import FitConfig
from pai.models import get_model
from pai.pipeline import PipelineConfig, ProposalConfig, SharingConfig, run_pai
from pai.sampling import ChainConfig


def mini_config(n_workers: int = 0) -> PipelineConfig:
    """Small pipeline budget for fast integration tests."""
    return PipelineConfig(
        chains=ChainConfig(n_chains=2, n_warmup=300, n_samples=400),
        acquisition=AcquisitionConfig(n_med=24, t_subsample=3, n_batch=2, t_refine=3),
        sharing=SharingConfig(),
        fit=FitConfig(n_restarts=2, max_evals=80),
        proposal=ProposalConfig(n_oversample=10),
        refit_restarts=1,
        n_workers=n_workers,
    )


@pytest.fixture(scope="session")
def mini_multimodal_run():
    model = get_model("multimodal")
    data = model.generate(120, seed=7)
    result = run_pai(model, data, K=2, cfg=mini_config(), seed=7, n_out=2000)
    return model, data, result
