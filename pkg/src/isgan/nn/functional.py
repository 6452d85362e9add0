"""Differentiable primitives with explicit forward/backward rules.

Each primitive is a ``torch.autograd.Function``; torch supplies the dense
kernels (convolution, pooling) and the reverse-mode engine that chains the
backward rules written here.
"""
from __future__ import annotations

import torch

from ..errors import ImageTooSmallError, NoRecordedForwardError, ShapeMismatchError

aten = torch.ops.aten


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


class Conv2dFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, stride, padding):
        ctx.save_for_backward(x, weight)
        ctx.stride, ctx.padding = _pair(stride), _pair(padding)
        ctx.has_bias = bias is not None
        return aten.convolution(x, weight, bias, ctx.stride, ctx.padding, (1, 1), False, (0, 0), 1)

    @staticmethod
    def backward(ctx, grad):
        x, weight = ctx.saved_tensors
        mask = [ctx.needs_input_grad[0], ctx.needs_input_grad[1], ctx.has_bias and ctx.needs_input_grad[2]]
        gx, gw, gb = aten.convolution_backward(
            grad.contiguous(), x, weight, [weight.shape[0]] if ctx.has_bias else None,
            ctx.stride, ctx.padding, (1, 1), False, (0, 0), 1, mask)
        return gx, gw, gb, None, None


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation; output side is ``(size + 2 * padding - k) // stride + 1``."""
    if x.dim() != 4 or weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(f"conv2d: bias {tuple(bias.shape)} for {weight.shape[0]} filters")
    return Conv2dFn.apply(x, weight, bias, stride, padding)


class BatchNormTrainFn(torch.autograd.Function):
    """Normalization by batch statistics; ``mean``/``var`` are passed in as constants
    and their dependence on ``x`` is accounted for in the backward rule."""

    @staticmethod
    def forward(ctx, x, scale, shift, mean, var, eps):
        invstd = torch.rsqrt(var + eps).view(1, -1, 1, 1)
        xhat = (x - mean.view(1, -1, 1, 1)) * invstd
        ctx.save_for_backward(xhat, invstd, scale)
        return xhat * scale.view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        xhat, invstd, scale = ctx.saved_tensors
        dims = (0, 2, 3)
        gx = None
        if ctx.needs_input_grad[0]:
            dxhat = grad * scale.view(1, -1, 1, 1)
            gx = (dxhat - dxhat.mean(dims, keepdim=True)
                  - xhat * (dxhat * xhat).mean(dims, keepdim=True)) * invstd
        return gx, (grad * xhat).sum(dims), grad.sum(dims), None, None, None


class BatchNormEvalFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale, shift, mean, var, eps):
        invstd = torch.rsqrt(var + eps).view(1, -1, 1, 1)
        xhat = (x - mean.view(1, -1, 1, 1)) * invstd
        ctx.save_for_backward(xhat, invstd, scale)
        return xhat * scale.view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        xhat, invstd, scale = ctx.saved_tensors
        dims = (0, 2, 3)
        gx = grad * scale.view(1, -1, 1, 1) * invstd
        return gx, (grad * xhat).sum(dims), grad.sum(dims), None, None, None


def batch_norm(x, scale, shift, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel normalization.

    In training mode the batch statistics (biased variance) normalize ``x`` and
    the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeMismatchError(f"batch_norm: {c} channels but parameters of shape {tuple(scale.shape)}")
    if not training:
        return BatchNormEvalFn.apply(x, scale, shift, running_mean, running_var, eps)
    with torch.no_grad():
        mean = x.mean((0, 2, 3))
        var = ((x - mean.view(1, -1, 1, 1)) ** 2).mean((0, 2, 3))
        running_mean.mul_(momentum).add_(mean, alpha=1 - momentum)
        running_var.mul_(momentum).add_(var, alpha=1 - momentum)
    return BatchNormTrainFn.apply(x, scale, shift, mean, var, eps)


class LeakyReluFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, slope):
        positive = x > 0
        ctx.save_for_backward(positive)
        ctx.slope = slope
        return torch.where(positive, x, x * slope)

    @staticmethod
    def backward(ctx, grad):
        (positive,) = ctx.saved_tensors
        return torch.where(positive, grad, grad * ctx.slope), None


class TanhFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        y = torch.tanh(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved_tensors
        return grad * (1 - y * y)


class SigmoidFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        y = torch.sigmoid(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved_tensors
        return grad * y * (1 - y)


def leaky_relu(x, slope=0.2):
    return LeakyReluFn.apply(x, slope)


def tanh(x):
    return TanhFn.apply(x)


def sigmoid(x):
    return SigmoidFn.apply(x)


ACTIVATIONS = {"leaky_relu": leaky_relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x, kind, slope=0.2):
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    return ACTIVATIONS[kind](x)


class AvgPoolFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, kernel, stride, padding):
        ctx.save_for_backward(x)
        ctx.conf = (_pair(kernel), _pair(stride), _pair(padding))
        return aten.avg_pool2d(x, *ctx.conf, False, False, None)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        gx = aten.avg_pool2d_backward(grad.contiguous(), x, *ctx.conf, False, False, None)
        return gx, None, None, None


def avg_pool(x, kernel=2, stride=2, padding=0):
    """Window means; padded cells are excluded from the average."""
    if padding == 0 and (x.shape[2] % stride or x.shape[3] % stride):
        raise ShapeMismatchError(
            f"avg_pool: spatial size {tuple(x.shape[2:])} not divisible by stride {stride}")
    return AvgPoolFn.apply(x, kernel, stride, padding)


class AdaptiveAvgPoolFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, grid):
        ctx.save_for_backward(x)
        return aten._adaptive_avg_pool2d(x, (grid, grid))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return aten._adaptive_avg_pool2d_backward(grad.contiguous(), x), None


def adaptive_avg_pool(x, grid):
    return AdaptiveAvgPoolFn.apply(x, grid)


def spp(x, levels=(1, 2, 4)):
    """Spatial pyramid pooling to ``(N, C * sum(g * g for g in levels))``.

    Cell ``i`` of a ``g``-grid averages rows ``floor(i*H/g) .. ceil((i+1)*H/g)``,
    so maps smaller than ``g`` replicate pixels instead of failing.
    """
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ImageTooSmallError(f"spp: empty feature map {tuple(x.shape)}")
    n = x.shape[0]
    return torch.cat([adaptive_avg_pool(x, g).reshape(n, -1) for g in levels], dim=1)


class LinearFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias):
        ctx.save_for_backward(x, weight)
        out = x @ weight.t()
        return out + bias if bias is not None else out

    @staticmethod
    def backward(ctx, grad):
        x, weight = ctx.saved_tensors
        gb = grad.sum(0) if ctx.needs_input_grad[2] else None
        return grad @ weight, grad.t() @ x, gb


def fully_connected(x, weight, bias=None):
    if x.dim() != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"fully_connected: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    return LinearFn.apply(x, weight, bias)


def affine_rescale(x, scale=0.5, offset=0.5):
    """Map Tanh output ``[-1, 1]`` onto ``[0, 1]``."""
    return x * scale + offset


def backward(output, upstream=None):
    """Run reverse mode from ``output``; gradients land in ``.grad`` of leaves."""

    if not isinstance(output, torch.Tensor) or output.grad_fn is None:
        raise NoRecordedForwardError("output was not produced by a recorded forward pass")
    if upstream is None:
        upstream = torch.ones_like(output)
    output.backward(upstream)
