"""Storage siting and sizing on unbalanced radial feeders under
conformally calibrated forecast boxes."""
from .assembly import ModelConfig, assemble
from .conformal import ConformalThreshold, SplitConformalBox, calibrate, coverage, inflate
from .exceptions import BessPlanError, ParseError, ValidationError
from .network import Bus, Line, Network
from .predictor import QuantileLSTM, build_windows
from .robust import BoxSet, RobustInstance, brute_force_two_stage, solve_single_stage
from .solver import LinearProgram, solve
from .synth import ScenarioSpec, generate
from .training import DecisionFocusedForecaster, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BessPlanError", "BoxSet", "Bus", "ConformalThreshold", "DecisionFocusedForecaster",
    "Line", "LinearProgram", "ModelConfig", "Network", "ParseError", "QuantileLSTM",
    "RobustInstance", "ScenarioSpec", "SplitConformalBox", "TrainConfig", "ValidationError",
    "assemble", "brute_force_two_stage", "build_windows", "calibrate", "coverage", "generate",
    "inflate", "solve", "solve_single_stage", "train",
]
