"""Capsule networks with dynamic routing, routing annealing and routing-entropy analysis."""
from .capsnet import (CapsNetConfig, CapsNetModel, capsnet_forward, compute_votes, decoder_forward,
                      dynamic_routing, num_primary_caps, predict, primary_caps_forward)
from .data import (Dataset, load_bundled_mnist, load_idx, pad_translate, split, synth_shapes,
                   write_idx)
from .losses import LossConfig, margin_loss, reconstruction_loss, total_loss
from .tensor import Tape, Tensor, backward, conv2d, no_grad, precision, softmax_lastdim, squash

__version__ = "0.1.0"
