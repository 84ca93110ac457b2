"""Heterogeneous multi-channel E(3)-equivariant message passing over
full-atom protein graphs, with task-aware readout and multi-task
training, implemented from scratch on numpy buffers."""

__version__ = "0.1.0"
