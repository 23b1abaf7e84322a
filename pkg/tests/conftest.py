import time
from dataclasses import dataclass

import pytest

from mspn.engine import ParamSet
from mspn.pipeline import ModelConfig, init_params
from mspn.trainer import SparsityProtocol, TrainConfig, train

# desk-scale recipe for the 32×32 trend checks; about ten minutes on one core
SWEEP_TRAIN = TrainConfig(
    epochs=12,
    steps_per_epoch=100,
    batch_size=1,
    milestones=(8, 10),
    height=32,
    width=32,
    max_layer1_iters=12,
    sparsity=SparsityProtocol(s_min=5, s_max=250, area_scale=False),
    seed=0,
)
HOLE_TRAIN = TrainConfig(
    epochs=5,
    steps_per_epoch=100,
    batch_size=1,
    milestones=(3,),
    height=32,
    width=32,
    sparsity=SparsityProtocol(kind="hole"),
    seed=7,
)


@dataclass
class TrainedModel:
    params: ParamSet
    hole_params: ParamSet
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    seconds: float


@pytest.fixture(scope="session")
def trained_model() -> TrainedModel:
    model_cfg = ModelConfig()
    start = time.process_time()
    params = train(SWEEP_TRAIN, model_cfg, params=init_params(model_cfg, seed=0)).params
    # the hole protocol trains on its own sampler, starting from the sweep model
    hole = train(HOLE_TRAIN, model_cfg, params=params.copy()).params
    return TrainedModel(params, hole, model_cfg, SWEEP_TRAIN, time.process_time() - start)
