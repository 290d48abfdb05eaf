from .config import ConfigError, RunConfig, TrainConfig, load_config
from .data import SynthSpec, psnr, synth_dataset
from .train import RunMetrics, train

__all__ = ["ConfigError", "RunConfig", "TrainConfig", "load_config", "SynthSpec", "psnr", "synth_dataset", "RunMetrics", "train"]
