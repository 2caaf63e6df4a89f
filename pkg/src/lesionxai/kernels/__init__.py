"""Convolution kernel backend selection.

The compiled Cython extension is preferred when importable; the pure-numpy
reference implementation is the fallback. ``LESIONXAI_KERNELS`` overrides:
``compiled``, ``reference``, or ``auto`` (default).

Both backends expose the same two functions:

- ``conv3d_forward(x, w, b)``: stride-1 same-padded 3D convolution. The
  input gradient of a convolution is itself a convolution with the
  flipped/transposed weight, so this single kernel also carries the
  backward-input pass.
- ``conv3d_grad_weight(x, gy, kernel)``: weight and bias gradients.
"""

from __future__ import annotations

import os

from . import reference

_choice = os.environ.get("LESIONXAI_KERNELS", "auto").lower()

if _choice == "reference":
    _backend = reference
elif _choice in ("auto", "compiled"):
    try:
        from . import _convcore as _backend  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        _backend = reference
else:
    raise ValueError(
        f"LESIONXAI_KERNELS={_choice!r}; expected auto, compiled, or reference"
    )

conv3d_forward = _backend.conv3d_forward
conv3d_grad_weight = _backend.conv3d_grad_weight


def backend_name() -> str:
    return _backend.NAME


def available_backends() -> list[str]:
    names = ["reference"]
    try:
        from . import _convcore  # noqa: F401
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names
