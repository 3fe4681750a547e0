"""Spiking networks with temporal-hierarchy initialization, trained by BPTT
with a box surrogate gradient."""

from .core import (HiddenLayer, LayerParams, LayerState, NetworkSpec, SimGrid, Tape,
                   causal_conv_current, decay_factor, dense_current, forward_pass,
                   init_params, leaky_output_step, lif_step)
from .autograd import Gradients, backward_pass, finite_difference_gradient, surrogate_box
from .hierarchy import (ConvSchedule, TauSchedule, conv_schedules, linear_tau_means,
                        sample_layer_taus, tanh_tau_means)

__version__ = "0.1.0"
