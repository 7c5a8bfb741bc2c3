"""Batch orchestration of the data-to-bifurcation workflow."""

from .config import RunConfig, preset
from .stages import (RunDir, StageError, cmd_bifurcation, cmd_generate, cmd_report,
                     cmd_select_features, cmd_train)

__all__ = ["RunConfig", "RunDir", "StageError", "cmd_bifurcation", "cmd_generate", "cmd_report",
           "cmd_select_features", "cmd_train", "preset"]
