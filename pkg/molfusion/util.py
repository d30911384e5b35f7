import logging
import random

import numpy as np
import torch


try:
    from memory_profiler import profile
    memprofiled = profile
    logging.warning("Using memory_profiler")
except ImportError:
    def memprofiled(func):
        return func
    logging.info("Not using memory profiler")


def traced(func):
    def inner(*args, **kwargs):
        logging.debug("%s(%s, %s)", func.__name__, args, kwargs)
        result = func(*args, **kwargs)
        logging.debug("{%s} returns {%s}", func.__name__, result)
        return result

    return inner


def seed_everything(seed: int, threads: int = 1):
    """Seed python, numpy and torch and pin the torch thread count.

    Bit-exact loss traces are only promised for a single thread.
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(threads)


def params_norm(module: torch.nn.Module) -> float:
    total = 0.0
    for parameter in module.parameters():
        total += float(parameter.detach().double().pow(2).sum())
    return total ** 0.5
