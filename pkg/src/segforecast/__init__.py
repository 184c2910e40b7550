"""Future semantic segmentation forecasting from past RGB frames."""

from .core import (
    IGNORE,
    ClassPalette,
    ConfigError,
    DataError,
    ForecastSetting,
    ModelConfig,
    NumericError,
    ShapeError,
    TrainConfig,
    builtin_setting,
    colorize,
    decolorize,
)

__version__ = "0.1.0"
