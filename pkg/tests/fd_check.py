"""Central finite-difference gradient check in float64."""

from typing import Callable, Iterable

import torch

EPSILON = 1e-6
GRADIENT_FLOOR = 1e-2


def gradient_errors(loss_fn: Callable[[], torch.Tensor], parameters: Iterable[torch.nn.Parameter],
                    samples: int = 32, seed: int = 0):
    """Relative errors between autograd and central differences on sampled entries.

    ``loss_fn`` must be deterministic and the parameters float64.
    """
    parameters = [parameter for parameter in parameters if parameter.requires_grad]
    for parameter in parameters:
        assert parameter.dtype == torch.float64, "finite differences need float64 parameters"
        parameter.grad = None
    loss_fn().backward()
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in parameters]

    sizes = torch.tensor([parameter.numel() for parameter in parameters], dtype=torch.float64)
    generator = torch.Generator().manual_seed(seed)
    errors = []
    with torch.no_grad():
        for _ in range(samples):
            which = int(torch.multinomial(sizes, 1, generator=generator))
            flat = parameters[which].view(-1)
            entry = int(torch.randint(flat.numel(), (1,), generator=generator))
            original = flat[entry].item()
            flat[entry] = original + EPSILON
            upper = loss_fn().item()
            flat[entry] = original - EPSILON
            lower = loss_fn().item()
            flat[entry] = original
            numeric = (upper - lower) / (2 * EPSILON)
            exact = analytic[which].view(-1)[entry].item()
            errors.append(abs(exact - numeric) / max(abs(exact), abs(numeric), GRADIENT_FLOOR))
    return errors


def max_gradient_error(loss_fn, parameters, samples: int = 32, seed: int = 0) -> float:
    return max(gradient_errors(loss_fn, parameters, samples, seed))
