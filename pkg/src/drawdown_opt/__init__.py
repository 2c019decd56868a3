"""Stress-sensitive drawdown optimisation with a coupled simulator and a neural proxy."""

__version__ = "0.1.0"

# versioned file formats written by the package
SCHEMAS = {
    "model_config": "config/1",
    "dataset": "dataset/1",
    "surrogate": "surrogate/1",
    "simulation_csv": "simulation/1",
    "optimizer_history_csv": "history/1",
    "study_table": "study/1",
}
