"""Micro-cell architecture search for two-class ultrasound lesion images."""

__version__ = "0.1.0"

from .genotype import ArchPair, CellGenotype, CountingConfig, NodeSpec, OpKind  # noqa: E402,F401
from .searchspace import StackPlan, build_alexnet, build_network, make_stack_plan, network_param_count  # noqa: E402,F401
