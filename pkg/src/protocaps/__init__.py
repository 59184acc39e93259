"""Capsule networks with non-iterative prototype routing.

Subpackages: tensor (autodiff substrate), nnops (layers/losses),
proto_routing (the prototype router), dynamic_routing (iterative
baseline), network (model assembly), costmodel (FLOP/memory accounting),
data (loaders/augmentation), train (optimizer/loop), analysis (reports),
cli (command-line surface).
"""

__version__ = "0.1.0"
