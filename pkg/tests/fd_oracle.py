"""Central finite differences, kept independent of autograd."""
import torch


def numeric_grad(f, t, coords, eps=1e-4):
    """d f / d t at the given flat indices by central differences."""
    flat = t.data.view(-1)
    out = []
    for i in coords:
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        out.append((fp - fm) / (2 * eps))
    return torch.tensor(out, dtype=torch.float64)


def relative_error(a, b):
    a, b = a.double(), b.double()
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def check_gradients(loss_fn, named_tensors, max_coords=8, eps=1e-4, seed=0):
    """Compare autograd with finite differences on sampled coordinates.

    Returns {name: relative error}. ``loss_fn`` must be a deterministic
    float64 scalar function of the tensors.
    """
    gen = torch.Generator().manual_seed(seed)
    named_tensors = list(named_tensors)
    for _, t in named_tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    with torch.no_grad():
        for name, t in named_tensors:
            n = t.numel()
            k = min(n, max_coords)
            coords = torch.randperm(n, generator=gen)[:k].tolist()
            analytic = t.grad.reshape(-1)[coords].clone()
            numeric = numeric_grad(lambda: loss_fn().item(), t, coords, eps)
            errors[name] = relative_error(analytic, numeric)
    return errors


def projection_loss(out_shape, seed=1):
    """A fixed random linear functional, so every output element matters."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(out_shape, generator=gen, dtype=torch.float64)
    return lambda y: (y * w).sum()
