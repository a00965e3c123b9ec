"""Built-in self checks behind ``gradinvert selftest``.

Each suite is a named list of zero-argument checks returning ``True`` on
success. :func:`run` executes every registered check and reports per-suite
counts; :func:`injected_fault` flips the sign of one VJP rule so the checks
can be shown to catch it.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checks import PRIMITIVE_CASES, check_primitive, two_layer_double_backprop
from .labels import restore_label
from .metrics import mse, psnr, ssim
from .models import build_model, convnet_s, param_gradient


@dataclass
class SuiteResult:
    name: str
    passed: int
    total: int
    failures: list


def _rng(*parts):
    return np.random.default_rng([zlib.crc32(str(p).encode()) for p in parts])


def gradcheck_suite(instances: int = 10):
    def case(name, i):
        return lambda: check_primitive(name, _rng("grad", name, i)).passed

    return [(f"{name}#{i}", case(name, i)) for name in sorted(PRIMITIVE_CASES) for i in range(instances)]


def double_backprop_suite(instances: int = 3):
    def case(name, i):
        return lambda: check_primitive(name, _rng("grad2", name, i), order=2).passed

    checks = [(f"{name}#{i}", case(name, i)) for name in sorted(PRIMITIVE_CASES) for i in range(instances)]
    checks += [(f"two_layer#{i}", (lambda i=i: two_layer_double_backprop(_rng("net", i)).passed))
               for i in range(instances)]
    return checks


def idlg_suite(trials: int = 50):
    spec = convnet_s(10)

    def case(i):
        def check():
            rng = _rng("idlg", i)
            _, params = build_model(spec, i)
            label = int(rng.integers(spec.num_classes))
            g = param_gradient(spec, params, rng.random(spec.input_shape), label)
            return restore_label(g, spec) == label

        return check

    return [(f"trial#{i}", case(i)) for i in range(trials)]


def metric_suite():
    rng = np.random.default_rng(0)
    a = rng.random((1, 16, 16))
    b = rng.random((1, 16, 16))
    zero = np.zeros((1, 16, 16))
    return [
        ("mse_identical", lambda: mse(a, a) == 0.0),
        ("mse_offset", lambda: abs(mse(zero, zero + 0.1) - 0.01) < 1e-12),
        ("psnr_20db", lambda: abs(psnr(zero, zero + 0.1) - 20.0) < 1e-9),
        ("psnr_identical", lambda: psnr(a, a) == math.inf),
        ("psnr_0db", lambda: psnr(zero, zero + 1.0) == 0.0),
        ("ssim_identical", lambda: abs(ssim(a, a) - 1.0) < 1e-9),
        ("ssim_symmetric", lambda: abs(ssim(a, b) - ssim(b, a)) <= 1e-12),
        ("ssim_inverted", lambda: ssim(np.round(a), 1.0 - np.round(a)) < 0.5),
    ]


SUITES = {
    "gradcheck": gradcheck_suite,
    "double-backprop": double_backprop_suite,
    "idlg": idlg_suite,
    "metrics": metric_suite,
}


def run(suites=None, out=print) -> list[SuiteResult]:
    results = []
    for name in suites or SUITES:
        checks = SUITES[name]()
        failures = []
        for label, check in checks:
            try:
                ok = bool(check())
            except Exception as exc:  # a crashing check is a failing check
                ok = False
                label = f"{label} ({type(exc).__name__}: {exc})"
            if not ok:
                failures.append(label)
        res = SuiteResult(name, len(checks) - len(failures), len(checks), failures)
        out(f"{name}: {res.passed}/{res.total} passed")
        for f in failures[:5]:
            out(f"  FAIL {f}")
        results.append(res)
    return results


@contextlib.contextmanager
def injected_fault(op: str = "relu"):
    """Temporarily negate the VJP of ``op``."""
    original = ad.OPS[op]

    def flipped(node, g):
        return tuple(None if v is None else -v for v in original.vjp(node, g))

    ad.OPS[op] = type(original)(original.forward, flipped)
    try:
        yield
    finally:
        ad.OPS[op] = original
