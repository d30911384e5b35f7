import random
from unittest import TestCase
from unittest.mock import patch

import numpy as np
import torch

import util


class ProfileMock:
    def __init__(self):
        self.results = []

    def profile(self, func):
        def inner(*args, **kwargs):
            result = func(*args, **kwargs)
            self.results.append(result)
            return result
        return inner


profile_mock_state = ProfileMock()
profile_mock = profile_mock_state.profile


class MemprofiledTestCase(TestCase):
    @patch("util.memprofiled", profile_mock)
    def test_with_profiler(self):
        @util.memprofiled
        def call_target(a: int, b: int) -> int:
            return a + b

        self.assertEqual(5, call_target(2, 3))
        self.assertEqual([5], profile_mock_state.results)


class TracedTestCase(TestCase):
    def test_result_is_passed_through(self):
        @util.traced
        def double(x):
            return 2 * x

        with self.assertLogs(level="DEBUG") as logs:
            self.assertEqual(6, double(3))
        self.assertEqual(2, len(logs.records))


class SeedTestCase(TestCase):
    def test_seed_everything(self):
        util.seed_everything(7)
        first = (random.random(), np.random.rand(), torch.rand(1).item())
        util.seed_everything(7)
        self.assertEqual(first, (random.random(), np.random.rand(), torch.rand(1).item()))
        self.assertEqual(1, torch.get_num_threads())

    def test_params_norm(self):
        layer = torch.nn.Linear(2, 1)
        with torch.no_grad():
            layer.weight.copy_(torch.tensor([[3.0, 0.0]]))
            layer.bias.fill_(4.0)
        self.assertAlmostEqual(5.0, util.params_norm(layer))
