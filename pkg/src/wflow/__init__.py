"""Desk-scale laboratory for flow-based generative models.

Invertible neural-ODE blocks trained under likelihood, proximal-step,
and velocity-matching objectives, applied to optimal transport, density
ratio estimation, and worst-case sampling, with analytic Gaussian
oracles throughout.
"""

from wflow._alloc import tune_allocator

# Tapes keep every intermediate array alive, which defeats glibc's
# mmap-based recycling and costs a page-fault storm per training step.
# Raising the mmap threshold keeps those buffers on the heap. Opt out
# with WFLOW_MALLOC_TUNE=0.
tune_allocator()

__version__ = "0.1.0"
