from src.nca.model import (MedNcaConfig, MedNcaModel, NcaCellParams, NcaOutputs, PatchOutputs,
                           cell_step, count_parameters, expected_parameter_count, forward,
                           forward_training_patch, rollout)
from src.nca.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "MedNcaConfig", "MedNcaModel", "NcaCellParams", "NcaOutputs", "PatchOutputs",
    "cell_step", "count_parameters", "expected_parameter_count", "forward",
    "forward_training_patch", "rollout", "load_checkpoint", "save_checkpoint",
]
