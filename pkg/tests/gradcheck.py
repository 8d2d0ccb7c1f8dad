"""Central finite differences vs analytic gradients, per parameter tensor."""

import torch


def finite_difference_errors(parameters, loss_fn, h: float = 1e-6) -> dict[str, float]:
    """Relative error per named parameter between backward() and central FD.

    `parameters` is a dict name -> tensor (requires_grad, double precision);
    `loss_fn` re-evaluates the scalar loss from current parameter values.
    The error for a tensor is ||g_analytic - g_fd|| / max(||g_analytic||,
    ||g_fd||, 1e-12).
    """
    for p in parameters.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.detach().clone() for name, p in parameters.items()}

    errors = {}
    for name, p in parameters.items():
        flat = p.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            with torch.no_grad():
                up = loss_fn().item()
            flat[i] = orig - h
            with torch.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * h)
        fd = fd.view_as(p)
        num = (analytic[name] - fd).norm().item()
        den = max(analytic[name].norm().item(), fd.norm().item(), 1e-12)
        errors[name] = num / den
    return errors
