"""Minimal numpy-backed tensor library with reverse-mode differentiation."""

from ssgen.numcore.gaussian import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    GaussianParams,
    gaussian_kl,
    gaussian_kl_terms,
    reparameterize,
)
from ssgen.numcore.gradcheck import gradient_check
from ssgen.numcore.optim import Adam, AdamState, adam_step
from ssgen.numcore.tensor import (
    TAPE,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clamp,
    clear_tape,
    concat,
    exp,
    float64_mode,
    get_dtype,
    is_grad_enabled,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    set_dtype,
    slice_,
    softmax,
    softmax_cross_entropy,
    sub,
    sum_,
    transpose,
)

_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "mean": mean,
    "concat": concat,
    "slice": slice_,
    "scale": scale,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("concat", [a, b], axis=1)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        from ssgen.errors import ContractError

        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


__all__ = [name for name in dir() if not name.startswith("_")]
