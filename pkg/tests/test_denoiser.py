import hashlib
import math
import subprocess
import sys

import numpy as np
import pytest
import torch

from modiff.denoiser import (
    ConditioningContext, Denoiser, DenoiserConfig, NumericalError, attention_weights, count_parameters,
    cross_attention, finite_difference_check, gradients, sinusoidal_embedding, time_embedding,
)
from modiff.motion import DimensionError

from conftest import TINY, tiny_model


class TestTimeEmbedding:
    def test_t0(self):
        e = time_embedding(0, 16)
        assert np.all(e[:8] == 0) and np.all(e[8:] == 1)

    def test_repeatable(self):
        assert time_embedding(123, 32).tobytes() == time_embedding(123, 32).tobytes()

    def test_formula(self):
        e = time_embedding(7, 8)
        for i in range(4):
            w = 10000.0 ** (-2 * i / 8)
            assert e[i] == pytest.approx(math.sin(7 * w), abs=1e-15)
            assert e[4 + i] == pytest.approx(math.cos(7 * w), abs=1e-15)

    def test_odd_dim(self):
        with pytest.raises(ValueError):
            sinusoidal_embedding(torch.tensor([1]), 7)


class TestAttention:
    def test_single_context_row(self, rng):
        x = torch.tensor(rng.standard_normal((3, 4)))
        c = torch.tensor(rng.standard_normal((1, 4)))
        wq, wk, wv = (torch.tensor(rng.standard_normal((4, 4))) for _ in range(3))
        out = cross_attention(x, c, wq, wk, wv)
        torch.testing.assert_close(out, (c @ wv).expand(3, 4))

    def test_identical_keys_average_values(self, rng):
        x = torch.tensor(rng.standard_normal((2, 4)))
        c = torch.tensor(rng.standard_normal((2, 4)))
        wk = torch.zeros(4, 4)
        wk = wk.double()
        eye = torch.eye(4, dtype=torch.float64)
        out = cross_attention(x, c, eye, wk, eye)
        torch.testing.assert_close(out, c.mean(0).expand(2, 4))

    def test_triple_loop_oracle(self, rng):
        x = rng.standard_normal((3, 4))
        c = rng.standard_normal((5, 4))
        eye = torch.eye(4, dtype=torch.float64)
        got = cross_attention(torch.tensor(x), torch.tensor(c), eye, eye, eye).numpy()
        for i in range(3):
            logits = [sum(x[i, d] * c[j, d] for d in range(4)) / 2.0 for j in range(5)]
            mx = max(logits)
            w = [math.exp(l - mx) for l in logits]
            z = sum(w)
            for d in range(4):
                ref = sum(w[j] / z * c[j, d] for j in range(5))
                assert got[i, d] == pytest.approx(ref, abs=1e-9)

    def test_heads_split(self, rng):
        x = torch.tensor(rng.standard_normal((3, 4)))
        c = torch.tensor(rng.standard_normal((5, 4)))
        eye = torch.eye(4, dtype=torch.float64)
        two = cross_attention(x, c, eye, eye, eye, heads=2)
        for h in range(2):
            sl = slice(2 * h, 2 * h + 2)
            ref = attention_weights(x[:, sl], c[:, sl]) @ c[:, sl]
            torch.testing.assert_close(two[:, sl], ref)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            cross_attention(torch.zeros(2, 4), torch.zeros(3, 5), torch.zeros(4, 4), torch.zeros(4, 4),
                            torch.zeros(4, 4))


class TestForward:
    @pytest.mark.parametrize("n", [16, 40, 200, 13])
    def test_shape(self, n):
        model = tiny_model(dtype=torch.float32)
        x = torch.randn(2, n, 24)
        ctx = ConditioningContext(torch.randn(2, 5, 2), "audio")
        assert model(x, torch.tensor([3, 900]), ctx).shape == x.shape
        assert model(x[0], 5).shape == x[0].shape

    def test_zero_init_gives_zero(self):
        torch.manual_seed(0)
        model = Denoiser(DenoiserConfig(in_channels=24))
        out = model(torch.randn(3, 40, 24) * 5, torch.tensor([0, 500, 999]), torch.randn(3, 7, 64))
        assert torch.count_nonzero(out) == 0

    def test_context_changes_output(self):
        model = tiny_model()
        x = torch.randn(1, 16, 24, dtype=torch.float64)
        a = model(x, 10, torch.randn(1, 3, 2, dtype=torch.float64))
        b = model(x, 10, torch.randn(1, 3, 2, dtype=torch.float64))
        c = model(x, 10, None)
        assert not torch.allclose(a, b) and not torch.allclose(a, c)

    def test_pad_policy_error(self):
        torch.manual_seed(0)
        model = Denoiser(DenoiserConfig(in_channels=24, pad_policy="error", **_den_kw()))
        with pytest.raises(DimensionError):
            model(torch.randn(1, 13, 24), 1)

    def test_bad_context_dim(self):
        model = tiny_model()
        with pytest.raises(DimensionError):
            model(torch.randn(1, 16, 24, dtype=torch.float64), 1, torch.randn(1, 3, 5, dtype=torch.float64))

    def test_bit_identical_across_processes(self):
        code = (
            "import torch, hashlib\n"
            "from modiff.denoiser import Denoiser, DenoiserConfig\n"
            "torch.manual_seed(7)\n"
            "m = Denoiser(DenoiserConfig(in_channels=24, zero_init_output=False))\n"
            "g = torch.Generator().manual_seed(3)\n"
            "x = torch.randn(2, 40, 24, generator=g); c = torch.randn(2, 6, 64, generator=g)\n"
            "with torch.no_grad(): y = m(x, torch.tensor([5, 700]), c)\n"
            "print(hashlib.sha256(y.numpy().tobytes()).hexdigest())\n"
        )
        runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
                for _ in range(2)]
        assert runs[0] == runs[1] and len(runs[0].strip()) == 64


def _den_kw():
    return {k: v for k, v in TINY.items()}


class TestGradients:
    def test_unused_parameter_zero(self):
        model = tiny_model()
        extra = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
        model.register_parameter("unused", extra)
        x = torch.randn(1, 16, 24, dtype=torch.float64)
        g = gradients(model, lambda: model(x, 3).pow(2).sum())
        assert torch.count_nonzero(g["unused"]) == 0
        assert set(g) == {n for n, _ in model.named_parameters()}

    def test_quadratic(self):
        lin = torch.nn.Linear(3, 2).double()
        g = gradients(lin, lambda: 0.5 * (lin.weight**2).sum())
        torch.testing.assert_close(g["weight"], lin.weight.detach())
        assert torch.count_nonzero(g["bias"]) == 0

    def test_non_finite_loss_named(self):
        lin = torch.nn.Linear(3, 2).double()
        with pytest.raises(NumericalError):
            gradients(lin, lambda: lin.weight.sum() * float("nan"))
        with torch.no_grad():
            lin.bias[0] = float("inf")
        with pytest.raises(NumericalError, match="bias"):
            gradients(lin, lambda: lin.weight.sum())

    def test_finite_differences_data_loss(self):
        model = tiny_model()
        assert count_parameters(model) <= 2000
        g = torch.Generator().manual_seed(0)
        x = torch.randn(2, 32, 24, dtype=torch.float64, generator=g)
        eps = torch.randn(2, 32, 24, dtype=torch.float64, generator=g)
        mel = torch.randn(2, 4, 80, dtype=torch.float64, generator=g)
        t = torch.tensor([10, 600])

        def loss():
            return ((model(x, t, model.encode(mel)) - eps) ** 2).mean()

        err = finite_difference_check(model, loss)
        assert err.size == count_parameters(model)
        assert np.mean(err < 1e-4) >= 0.99

    def test_finite_differences_text_encoder(self):
        from modiff.conditioning import TextEncoder

        torch.manual_seed(0)
        enc = TextEncoder(vocab_size=6, dim=4, context_dim=2, heads=1, layers=1).double()
        tokens = torch.tensor([[2, 3, 4, 0], [5, 2, 0, 0]])
        w = torch.randn(2, dtype=torch.float64)

        def loss():
            return (enc(tokens).rows ** 2 * w).sum()

        err = finite_difference_check(enc, loss)
        assert np.mean(err < 1e-4) >= 0.99
