"""Desk-scale sequence-to-sequence training lab.

A numpy autodiff engine, a small transformer encoder-decoder, stacked
decoders trained along a secondary time axis with a discounted
multi-decoder loss, greedy/beam decoding, corpus metrics, and a
multi-seed sweep harness.
"""

from teaforn.autodiff import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
