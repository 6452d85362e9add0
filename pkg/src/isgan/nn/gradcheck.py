"""Finite-difference verification of the analytic backward rules."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .layers import LayerSpec


@dataclass
class TensorError:
    name: str
    max_rel_error: float
    index: tuple[int, ...]


@dataclass
class GradCheckReport:
    kind: str
    tolerance: float
    tensors: list[TensorError] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def worst(self) -> TensorError | None:
        return max(self.tensors, key=lambda t: t.max_rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        w = self.worst
        where = f" at {w.name}{list(w.index)}" if w is not None else ""
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.kind}: max rel err {self.max_rel_error:.3e}{where} (tol {self.tolerance:g})"


def numeric_gradient(fn, tensor: torch.Tensor, eps: float) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensor`` (in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
    return grad


def compare(name: str, analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> TensorError:
    """Max abs error relative to the tensor's largest gradient entry.

    ``floor`` bounds the denominator from below so that gradients which are
    identically zero in exact arithmetic do not divide rounding noise by itself.
    """
    diff = (analytic - numeric).abs()
    scale = max(numeric.abs().max().item(), analytic.abs().max().item(), floor)
    idx = divmod_index(int(diff.argmax()), diff.shape)
    return TensorError(name, diff.max().item() / scale, idx)


def divmod_index(flat_index: int, shape) -> tuple[int, ...]:
    out = []
    for dim in reversed(tuple(shape)):
        flat_index, r = divmod(flat_index, dim)
        out.append(r)
    return tuple(reversed(out))


def check_function(kind: str, fn, inputs: dict[str, torch.Tensor], tolerance: float,
                   eps: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences for each
    named leaf tensor in ``inputs``."""
    for t in inputs.values():
        t.grad = None
    fn().backward()
    analytic = {k: (t.grad.clone() if t.grad is not None else torch.zeros_like(t)) for k, t in inputs.items()}
    numeric = {k: numeric_gradient(fn, t.data, eps) for k, t in inputs.items()}
    floor = 1e-3 * max(max(g.abs().max().item() for g in numeric.values()), 1e-12)
    report = GradCheckReport(kind, tolerance)
    for name in inputs:
        report.tensors.append(compare(name, analytic[name], numeric[name], floor))
    return report


def grad_check(spec: LayerSpec, tolerance: float = 1e-4, seed: int = 0, training: bool = True,
               eps: float = 1e-6) -> GradCheckReport:
    """Build ``spec`` in double precision and check input and parameter gradients of
    ``sum(layer(x) * r)`` for random ``x`` and fixed random ``r``."""
    gen = torch.Generator().manual_seed(seed)
    layer = spec.build().double()
    layer.train(training)
    with torch.no_grad():
        for p in layer.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5 + (p.data if p.dim() == 1 else 0))
    x = torch.randn(spec.input_shape(), generator=gen, dtype=torch.float64)
    if spec.kind == "leaky_relu":
        # keep samples clear of the kink so differences do not straddle it
        x = torch.where(x.abs() < 10 * eps, x + 1e-2, x)
    x.requires_grad_(True)
    with torch.no_grad():
        probe = layer(x)
    weights = torch.randn(probe.shape, generator=gen, dtype=torch.float64)
    buffers = {k: b.clone() for k, b in layer.named_buffers()}

    def objective():
        # BN running statistics must not drift across repeated evaluations
        for k, b in layer.named_buffers():
            b.copy_(buffers[k])
        return (layer(x) * weights).sum()

    inputs = {"input": x}
    inputs.update({n: p for n, p in layer.named_parameters()})
    return check_function(spec.kind, objective, inputs, tolerance, eps)


def default_suite() -> list[LayerSpec]:
    """One small instance of every layer kind used by the three networks."""
    return [
        LayerSpec("conv", {"in_channels": 2, "out_channels": 3, "kernel_size": 3}),
        LayerSpec("conv", {"in_channels": 3, "out_channels": 2, "kernel_size": 1, "stride": 2,
                           "padding": 0, "input_shape": (2, 3, 8, 8)}),
        LayerSpec("batchnorm", {"channels": 3}),
        LayerSpec("leaky_relu"),
        LayerSpec("tanh"),
        LayerSpec("sigmoid"),
        LayerSpec("avgpool", {"input_shape": (2, 2, 8, 8)}),
        LayerSpec("avgpool", {"kernel": 3, "stride": 1, "padding": 1, "input_shape": (2, 2, 6, 6)}),
        LayerSpec("spp", {"levels": (1, 2, 4), "input_shape": (2, 2, 8, 8)}),
        LayerSpec("fully_connected", {"in_features": 6, "out_features": 4}),
        LayerSpec("inception_residual", {"in_channels": 2, "out_channels": 4}),
        LayerSpec("inception_residual", {"in_channels": 4, "out_channels": 4}),
        LayerSpec("affine_rescale"),
    ]


def run_suite(tolerance: float = 1e-4, seed: int = 0) -> list[GradCheckReport]:
    reports = [grad_check(spec, tolerance, seed=seed) for spec in default_suite()]
    reports.append(grad_check(LayerSpec("batchnorm", {"channels": 3}), tolerance, seed=seed, training=False))
    reports[-1].kind = "batchnorm(eval)"
    return reports
