"""Central finite-difference gradient checks (float64)."""
import torch


def numeric_grad(fn, tensor, eps=1e-6, indices=None):
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i].item()
        flat[i] = old + eps
        up = float(fn())
        flat[i] = old - eps
        dn = float(fn())
        flat[i] = old
        out[i] = (up - dn) / (2 * eps)
    return out


def relative_error(fn, tensors, eps=1e-6, max_entries=None, seed=0):
    """Largest over ``tensors`` of ``|g - g_fd| / max(|g|, |g_fd|)`` (vector
    2-norms over the checked entries), comparing autograd against central
    differences of the scalar ``fn()``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for t in tensors:
            n = t.numel()
            idx = None
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
            num = numeric_grad(fn, t, eps, idx)
            keys = sorted(num)
            a = torch.tensor([t.grad.view(-1)[i].item() for i in keys], dtype=torch.float64)
            b = torch.tensor([num[i] for i in keys], dtype=torch.float64)
            denom = max(a.norm().item(), b.norm().item(), 1e-30)
            worst = max(worst, (a - b).norm().item() / denom)
    return worst
