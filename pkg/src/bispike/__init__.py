"""Elastic bi-spiking neurons and a toy spike-driven transformer encoder in numpy."""

from . import analysis, calibration, checkpoint, config, gradcheck, model, neurons, tensorcore, train
from .analysis import (ENERGY_CONSTANTS, EnergyProfile, IsometryReport, energy_linear, isometry_report,
                       jacobian_stats_empirical, model_energy_report, relu_isometry_analytic,
                       spike_isometry_analytic, theorem1_compare)
from .calibration import (AlphaTable, CalibrationError, FiringStats, FrozenAlphaError, calibrate_alpha,
                          expected_alpha_closed_form, measure_firing_rate, spike_entropy)
from .checkpoint import checkpoint_load, checkpoint_save
from .model import ModelConfig, SpikingTransformer, merged_model, model_forward, spike_accumulate
from .neurons import CounterRNG, NeuronConfig, NeuronState, SpikeCode, neuron_step
from .tensorcore import Tape, Tensor, parameter, tensor
from .train import TrainConfig, evaluate, make_task, toy_model_config, train_loop

__version__ = "0.1.0"
