"""Cross-branch attention shared between the foreground and background paths.

Both branches are updated from a single NxN weight map: entry (i, j) scores
how strongly background position i bears on foreground position j, normalized
so every column sums to one.  Each branch then adds a learnable-scale weighted
sum of the other branch's projected features, so the module is the exact
identity while both scale gates are zero.
"""

from __future__ import annotations

from . import tensor as T
from .tensor import ShapeError, Tensor

RAM_MODES = ("off", "fg_only", "bg_only", "full")


def attention_weights(f2: Tensor, b2: Tensor) -> Tensor:
    """Column-stochastic attention map from projected branch features.

    Inputs are d x N matrices (one column per spatial position).  The raw
    score at (i, j) is the inner product of background column i with
    foreground column j; a softmax over i makes each column a distribution
    over background positions.
    """
    if f2.shape != b2.shape:
        raise ShapeError(f"attention projections disagree: {f2.shape} vs {b2.shape}")
    if f2.data.ndim != 2:
        raise ShapeError(f"attention expects d x N matrices, got {f2.shape}")
    scores = T.matmul(T.transpose(b2), f2)
    return T.softmax_over_rows(scores)


def _attended(values: Tensor, weights: Tensor) -> Tensor:
    # Position j of the result aggregates value columns with row j of the
    # weight map: values @ weights^T.
    if values.shape[1] != weights.shape[0]:
        raise ShapeError(f"value positions {values.shape} do not match weights {weights.shape}")
    return T.matmul(values, T.transpose(weights))


def update_background(b: Tensor, f1: Tensor, weights: Tensor, alpha: Tensor) -> Tensor:
    """Residual update of the background features from projected foreground ones.

    b is C x h x w, f1 is C x N with N = h*w.  The attention term at position
    j is sum_i weights[j, i] * f1[:, i], scaled by the learnable gate alpha.
    """
    c, h, w = b.shape
    if f1.shape != (c, h * w):
        raise ShapeError(f"projected features {f1.shape} do not match branch {b.shape}")
    term = T.reshape(_attended(f1, weights), (c, h, w))
    return T.add(b, T.mul(term, alpha))


def update_foreground(f: Tensor, b1: Tensor, weights: Tensor, beta: Tensor) -> Tensor:
    """Mirror of update_background: foreground aggregates projected background."""
    c, h, w = f.shape
    if b1.shape != (c, h * w):
        raise ShapeError(f"projected features {b1.shape} do not match branch {f.shape}")
    term = T.reshape(_attended(b1, weights), (c, h, w))
    return T.add(f, T.mul(term, beta))


def ram_forward(f: Tensor, b: Tensor, params: dict[str, Tensor],
                mode: str = "full") -> tuple[Tensor, Tensor, Tensor | None]:
    """Full attention pass: project, score, update one or both branches.

    mode selects which residual updates run: "full" both, "fg_only" only the
    foreground update, "bg_only" only the background update, "off" returns
    the inputs untouched.  The weight map is returned for inspection (None
    when mode is "off").
    """
    if mode not in RAM_MODES:
        raise ValueError(f"unknown attention mode {mode!r}; expected one of {RAM_MODES}")
    if f.shape != b.shape:
        raise ShapeError(f"branch features disagree: {f.shape} vs {b.shape}")
    if mode == "off":
        return f, b, None

    c, h, w = f.shape
    n = h * w
    f2 = T.reshape(T.conv2d(f, params["ram.f2.w"], params["ram.f2.b"]), (-1, n))
    b2 = T.reshape(T.conv2d(b, params["ram.b2.w"], params["ram.b2.b"]), (-1, n))
    weights = attention_weights(f2, b2)

    b_out, f_out = b, f
    if mode in ("full", "bg_only"):
        f1 = T.reshape(T.conv2d(f, params["ram.f1.w"], params["ram.f1.b"]), (c, n))
        b_out = update_background(b, f1, weights, params["ram.alpha"])
    if mode in ("full", "fg_only"):
        b1 = T.reshape(T.conv2d(b, params["ram.b1.w"], params["ram.b1.b"]), (c, n))
        f_out = update_foreground(f, b1, weights, params["ram.beta"])
    return f_out, b_out, weights
