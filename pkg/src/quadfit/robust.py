"""Robust error kernel shared by the fitting energies and the camera solver."""

from __future__ import annotations

import numpy as np


def geman_mcclure(e, c: float):
    """Geman-McClure kernel e^2 / (e^2 + c^2).

    Bounded in [0, 1), even in e, monotone in |e|; ``c`` is the residual
    magnitude at which the kernel reaches 0.5.  Accepts scalars or arrays.
    """
    if c <= 0:
        raise ValueError("robust scale c must be positive")
    e2 = np.square(e)
    return e2 / (e2 + c * c)
