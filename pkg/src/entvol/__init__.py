"""Entropy-per-volume toolkit for extended dissipative systems.

Modules: ``model`` (scales), ``kernels`` (heat-kernel envelopes), ``pde``
(CGL solver and twins), ``sampling`` (discrete norms and twin experiments),
``entropy`` (correlation sums and exact counters), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
