"""Decentralized stream-stage forecasting.

Each sensor on a river network gets its own forecast of the next 24 hourly
stages from its nearest upstream sensors, its own recent history and rainfall
over the part of its watershed those upstream sensors do not already see.
"""

__version__ = "0.1.0"

from .dataset import LARGER, SMALLER, Dataset, DatasetEntry, DatasetVariant, build_dataset, split
from .estimators import FCStageRegressor, GRUStageRegressor, PersistenceRegressor
from .ingestion import PrecipFieldSeries, StageSeries, parse_precip_file, parse_stage_file
from .models import FCNet, FCNetConfig, ForecasterConfig, GRUForecaster, load_checkpoint, save_checkpoint
from .network import SensorGraph, build_graph, read_graph
from .synthetic import WorldConfig, gen_world
from .training import TrainConfig, evaluate, persistence_mse, predict, train

__all__ = [
    "LARGER",
    "SMALLER",
    "Dataset",
    "DatasetEntry",
    "DatasetVariant",
    "FCNet",
    "FCNetConfig",
    "FCStageRegressor",
    "ForecasterConfig",
    "GRUForecaster",
    "GRUStageRegressor",
    "PersistenceRegressor",
    "PrecipFieldSeries",
    "SensorGraph",
    "StageSeries",
    "TrainConfig",
    "WorldConfig",
    "build_dataset",
    "build_graph",
    "evaluate",
    "gen_world",
    "load_checkpoint",
    "parse_precip_file",
    "parse_stage_file",
    "persistence_mse",
    "predict",
    "read_graph",
    "save_checkpoint",
    "split",
    "train",
]
