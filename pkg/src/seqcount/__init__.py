"""Few-shot sequential object counting on a small numpy autodiff engine."""

from .episodes import EpisodeTask, TaskConfig, generate_tasks, read_episodes, write_episodes
from .evaluate import MetricsReport, evaluate
from .model import ModelConfig, init_params, predict
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = ["EpisodeTask", "MetricsReport", "ModelConfig", "TaskConfig", "TrainConfig", "evaluate",
           "generate_tasks", "init_params", "load_checkpoint", "predict", "read_episodes",
           "save_checkpoint", "train", "write_episodes"]
