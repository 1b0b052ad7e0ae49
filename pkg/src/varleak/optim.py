"""Adam updates over a :class:`~varleak.layers.ParamSet`."""

from __future__ import annotations

import numpy as np


class OptimizerError(RuntimeError):
    """Raised when an update step cannot be applied."""


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam step in place.

    ``grads`` maps parameter names to arrays of matching shape.  The whole
    step is validated before any parameter moves, so a non-finite gradient
    aborts with nothing mutated.
    """
    if lr <= 0:
        raise OptimizerError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        if name not in grads:
            raise OptimizerError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.data.shape:
            raise OptimizerError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} "
                f"for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")

    for name, p in params.items():
        g = grads[name]
        st = params.state(name)
        st.t += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1 ** st.t)
        v_hat = st.v / (1.0 - beta2 ** st.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params
