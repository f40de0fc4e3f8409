"""
ControlSR interface layer

Thread-safe pipeline facade plus the `controlsr` command line.
"""

from .pipeline import (
    ControlSRPipeline,
    LoadedModel,
    ProbeReport,
    SweepCell,
    degrade,
    get_pipeline_instance,
    infer,
    probe,
    sweep,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ControlSRPipeline",
    "LoadedModel",
    "ProbeReport",
    "SweepCell",
    "degrade",
    "get_pipeline_instance",
    "infer",
    "probe",
    "sweep",
    "train",
]
