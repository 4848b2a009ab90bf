"""Central finite-difference oracle used by the gradient tests."""
import numpy as np
import torch


def fd_grad(fn, x, step=1e-4):
    """Gradient of scalar ``fn`` at ``x`` by central differences, in float64."""
    x = x.detach().clone().double()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        fp = float(fn(x))
        flat[i] = orig - step
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def autograd_grad(fn, x):
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
