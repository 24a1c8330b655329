"""Heat-kernel tools and a one-loop flow for phi^4 theory on a half-space."""
from . import heatkernel, propagator, kernels, testfn, trees, flow

__all__ = ["heatkernel", "propagator", "kernels", "testfn", "trees", "flow"]
__version__ = "0.1.0"
