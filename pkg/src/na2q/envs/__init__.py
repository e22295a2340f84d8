from .lbf import (ACTION_NAMES, PRESETS, ConfigError, LbfConfig, LbfEnv, LbfState, LifecycleError,
                  dump_trajectory, global_state, lbf_reset, lbf_step, observations)
from .matrix_game import COOPERATIVE_3X3, MatrixGame, MatrixGameEnv, SizeError, matrix_enumerate

__all__ = [
    "ACTION_NAMES", "PRESETS", "ConfigError", "LbfConfig", "LbfEnv", "LbfState", "LifecycleError",
    "dump_trajectory", "global_state", "lbf_reset", "lbf_step", "observations",
    "COOPERATIVE_3X3", "MatrixGame", "MatrixGameEnv", "SizeError", "matrix_enumerate",
]
