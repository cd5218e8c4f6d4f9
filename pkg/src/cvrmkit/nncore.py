"""Differentiable-operation substrate shared by every model in the package.

Thin, contract-explicit layer over torch (CPU): functional ops, seeded
dropout and batch-norm modules, the AMSGrad optimizer with decoupled weight
decay, a central-difference gradient checker, and bitwise checkpoint IO.
Training runs in float32; gradient checks and numeric oracles use float64.
"""

from __future__ import annotations

import math

import numpy as np
import torch


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


def assert_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return tensor


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """y = x @ weight.T + bias, weight shaped (out_features, in_features)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"shape mismatch: x last dim {x.shape[-1]} vs weight in-dim {weight.shape[-1]}")
    return torch.nn.functional.linear(x, weight, bias)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Normalize the last dimension to zero mean / unit variance, then scale and shift."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + shift


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-subtracted softmax (invariant under adding a constant to all logits)."""
    shifted = x - x.amax(dim=dim, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def dropout(
    x: torch.Tensor,
    rate: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Inverted dropout: identity in eval mode, kept units scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def batch_norm_1d(
    x: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    gain: torch.Tensor,
    shift: torch.Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Batch normalization over the channel dimension.

    Accepts (batch, channels) or (batch, channels, length). In training mode
    normalizes with batch statistics and updates the running stats in place
    (momentum-weighted); in eval mode uses the running stats.
    """
    if x.dim() not in (2, 3):
        raise ValueError(f"expected 2-D or 3-D input, got {x.dim()}-D")
    reduce_dims = (0,) if x.dim() == 2 else (0, 2)
    view = (1, -1) if x.dim() == 2 else (1, -1, 1)
    if training:
        mean = x.mean(dim=reduce_dims)
        var = x.var(dim=reduce_dims, unbiased=False)
        with torch.no_grad():
            n = x.numel() // x.shape[1]
            unbiased = var.detach() * n / max(n - 1, 1)
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            running_var.mul_(1 - momentum).add_(momentum * unbiased)
    else:
        mean, var = running_mean, running_var
    x_hat = (x - mean.view(view)) / torch.sqrt(var.view(view) + eps)
    return x_hat * gain.view(view) + shift.view(view)


def weighted_cross_entropy(
    logits: torch.Tensor,
    labels: torch.Tensor,
    class_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over the batch of w[y] * (-log softmax(logits)[y]), max-stabilized."""
    if logits.dim() != 2:
        raise ValueError(f"expected logits of shape (batch, n_classes), got {tuple(logits.shape)}")
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label outside the valid class range")
    if class_weights is not None and (class_weights <= 0).any():
        raise ValueError("class weights must be positive")
    shifted = logits - logits.amax(dim=1, keepdim=True)
    log_probs = shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    picked = log_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if class_weights is None:
        return (-picked).mean()
    w = class_weights.to(logits.dtype)[labels]
    return (w * -picked).mean()


def balanced_class_weights(labels: np.ndarray, n_classes: int = 2) -> torch.Tensor:
    """Weights N / (n_classes * N_c) so each class contributes equally in expectation."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("every class must be present to compute balanced weights")
    return torch.tensor(len(labels) / (n_classes * counts), dtype=torch.float32)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Dropout(torch.nn.Module):
    """Dropout with an explicitly seedable mask generator."""

    def __init__(self, rate: float, generator: torch.Generator | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.generator = generator

    def forward(self, x):
        return dropout(x, self.rate, self.training, self.generator)

    def extra_repr(self):
        return f"rate={self.rate}"


class BatchNorm1d(torch.nn.Module):
    """Batch norm with learned gain/shift and momentum-tracked running stats."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.weight = torch.nn.Parameter(torch.ones(num_features))
        self.bias = torch.nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x):
        return batch_norm_1d(
            x, self.running_mean, self.running_var, self.weight, self.bias,
            self.training, self.momentum, self.eps,
        )

    def extra_repr(self):
        return f"{self.num_features}, momentum={self.momentum}"


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AmsGrad:
    """AMSGrad with bias-corrected second moment and decoupled weight decay.

    Per step: m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2; with bias
    corrections m_hat, v_hat; v_hat_max <- max(v_hat_max, v_hat);
    theta <- theta - lr * m_hat / (sqrt(v_hat_max) + eps), followed by
    theta <- theta - lr * weight_decay * theta. v_hat_max is element-wise
    non-decreasing across steps by construction.
    """

    def __init__(self, params, lr=3e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params]
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {betas}")
        self.lr = lr
        self.betas = (b1, b2)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.state = [
            {
                "m": torch.zeros_like(p, requires_grad=False),
                "v": torch.zeros_like(p, requires_grad=False),
                "v_hat_max": torch.zeros_like(p, requires_grad=False),
            }
            for p in self.params
        ]

    def zero_grad(self):
        for p in self.params:
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            g = p.grad
            assert_finite(g, "gradient")
            st["m"].mul_(b1).add_(g, alpha=1.0 - b1)
            st["v"].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = st["m"] / bc1
            v_hat = st["v"] / bc2
            st["v_hat_max"].copy_(torch.maximum(st["v_hat_max"], v_hat))
            p.addcdiv_(m_hat, st["v_hat_max"].sqrt().add(self.eps), value=-self.lr)
            if self.weight_decay:
                p.mul_(1.0 - self.lr * self.weight_decay)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    loss_fn,
    params,
    epsilon: float = 1e-5,
    max_entries_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    Parameters must be float64. Relative error per sampled coordinate is
    |a - n| / max(1e-8, |a| + |n|); the max over all samples is returned.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is non-finite")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        n = flat.numel()
        if n <= max_entries_per_param:
            idxs = range(n)
        else:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        g_flat = torch.zeros_like(flat) if g is None else g.reshape(-1)
        for i in idxs:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + epsilon
                f_plus = float(loss_fn())
                flat[i] = orig - epsilon
                f_minus = float(loss_fn())
                flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = float(g_flat[i])
            if not (math.isfinite(numeric) and math.isfinite(analytic)):
                raise NonFiniteError("non-finite value during gradient check")
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: torch.nn.Module) -> None:
    """Write parameters and buffers as an npz map name -> array (bitwise stable)."""
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    np.savez(path, __checkpoint_version__=np.array(CHECKPOINT_VERSION), **arrays)


def load_checkpoint(path, model: torch.nn.Module) -> None:
    with np.load(path) as data:
        version = int(data["__checkpoint_version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        state = {}
        for name, tensor in model.state_dict().items():
            if name not in data:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            arr = data[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ValueError(f"{name}: shape {arr.shape} != expected {tuple(tensor.shape)}")
            state[name] = torch.from_numpy(arr).to(tensor.dtype)
    model.load_state_dict(state)
