"""Finite-difference and brute-force verification suites.

``run_gradcheck`` compares reverse-mode gradients of every differentiable
operation class against central differences on randomized small instances,
resampling inputs whose max-style comparisons sit within a tie neighborhood
(a kink crossed by the probe step would poison the estimate, not reveal a
bug).  ``run_oracle_check`` compares the vectorized kernels against the
brute-force loop implementations.  Both are wired to CLI verbs and to the
acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import reference
from .autodiff import Tape, Tensor, backward, finite_difference
from .evaluation import compute_cmc
from .fusion import fuse
from .layers import Conv2dParams, PoolParams, conv2d, global_avg_pool, multiscale_branch, pool2d, upsample_zero_pad
from .network import AttentionParams, temporal_pool
from .training import identity_loss, siamese_loss

TIE_GAP = 1e-3
MAX_RESAMPLE = 200


@dataclass
class CheckResult:
    name: str
    instances: int
    max_err: float
    ok: bool

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.name:<24} instances={self.instances:<3} max_rel_err={self.max_err:.3e}  {status}"


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck_fn(f: Callable[..., Tensor], inputs: list[Tensor],
                 eps: float = 1e-5, tol: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps the input tensors to a scalar Tensor and must be deterministic.
    """
    with Tape() as tape:
        loss = f(*inputs)
        grads = backward(tape, loss)
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = grads[x].data

        def partial(_x, i=None):
            return f(*inputs)

        numeric = finite_difference(partial, x, eps=eps).data
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


class _Scalarize:
    """Fixed random linear functional, so every output coordinate is probed.

    Weights are drawn once per output shape and reused across the many
    re-evaluations finite differencing performs, keeping the objective
    deterministic.
    """

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._weights: dict = {}

    def __call__(self, out: Tensor) -> Tensor:
        key = out.shape
        if key not in self._weights:
            self._weights[key] = Tensor(self._rng.normal(size=key))
        return ad.sum_all(ad.mul(out, self._weights[key]))


def _resample(rng: np.random.Generator, draw: Callable, valid: Callable) -> object:
    for _ in range(MAX_RESAMPLE):
        candidate = draw()
        if valid(candidate):
            return candidate
    raise RuntimeError("could not draw a tie-free instance; generator too tight")


# -- tie predicates ---------------------------------------------------------

def _windows_separated(x: np.ndarray, p: PoolParams) -> bool:
    """Top-2 gap inside every pooling window exceeds TIE_GAP."""
    h, w, c = x.shape
    d = p.dilation
    span = d * (p.window - 1) + 1
    ho = (h - span) // p.stride + 1
    wo = (w - span) // p.stride + 1
    if ho < 1 or wo < 1:
        return False
    for i in range(ho):
        for j in range(wo):
            for ch in range(c):
                vals = sorted(
                    (x[i * p.stride + d * a, j * p.stride + d * b, ch]
                     for a in range(p.window) for b in range(p.window)),
                    reverse=True)
                if len(vals) > 1 and vals[0] - vals[1] < TIE_GAP:
                    return False
    return True


def _stacks_separated(maps: list[np.ndarray]) -> bool:
    stack = np.stack(maps)
    top2 = np.sort(stack, axis=0)[-2:]
    return float(np.min(top2[1] - top2[0])) >= TIE_GAP


def _rowcol_separated(a: np.ndarray) -> bool:
    """Top-2 gap along both axes of a score matrix exceeds TIE_GAP."""
    for axis in (0, 1):
        s = np.sort(a, axis=axis)
        if s.shape[axis] < 2:
            continue
        top = np.take(s, -1, axis=axis)
        second = np.take(s, -2, axis=axis)
        if float(np.min(top - second)) < TIE_GAP:
            return False
    return True


# -- instance generators ----------------------------------------------------

def _check_conv(rng: np.random.Generator) -> float:
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    k = int(rng.integers(2, 4))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    span = dilation * (k - 1) + 1
    h = span + int(rng.integers(1, 4))
    x = Tensor(rng.normal(size=(h, h, cin)), requires_grad=True)
    kernel = Tensor(rng.normal(size=(cout, cin, k, k)), requires_grad=True)
    bias = Tensor(rng.normal(size=cout), requires_grad=True)
    pad = int(rng.integers(0, 2))

    def f(xx, kk, bb):
        p = Conv2dParams(kernel=kk, bias=bb, stride=stride, padding=pad, dilation=dilation)
        return s(conv2d(xx, p))

    s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))
    return gradcheck_fn(f, [x, kernel, bias])


def _check_pool(kind: str):
    def run(rng: np.random.Generator) -> float:
        dilation = 2 if kind.startswith("dilated") else 1
        window = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        p = PoolParams(kind=kind, window=window, stride=stride, dilation=dilation)
        h = dilation * (window - 1) + 1 + int(rng.integers(1, 4))
        c = int(rng.integers(1, 3))

        def draw():
            return rng.normal(size=(h, h, c))

        if "max" in kind:
            arr = _resample(rng, draw, lambda a: _windows_separated(a, p))
        else:
            arr = draw()
        x = Tensor(arr, requires_grad=True)
        s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))

        def f(xx):
            return s(pool2d(xx, p))

        return gradcheck_fn(f, [x])

    return run


def _check_upsample(rng: np.random.Generator) -> float:
    factor = int(rng.integers(2, 4))
    x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))
    return gradcheck_fn(lambda xx: s(upsample_zero_pad(xx, factor)), [x])


def _check_multiscale(rng: np.random.Generator) -> float:
    x = Tensor(rng.normal(size=(8, 8, 2)), requires_grad=True)
    s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))

    def f(xx):
        branches = multiscale_branch(xx, [1, 2, 4])
        return ad.add(ad.add(s(branches[0]),
                             s(branches[1])),
                      s(branches[2]))

    return gradcheck_fn(f, [x])


def _check_global_avg(rng: np.random.Generator) -> float:
    x = Tensor(rng.normal(size=(2, 5, 4, 3)), requires_grad=True)
    s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))
    return gradcheck_fn(lambda xx: s(global_avg_pool(xx)), [x])


def _check_fusion(kind: str):
    def run(rng: np.random.Generator) -> float:
        s = int(rng.integers(2, 5))
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 3)))

        def draw():
            return [rng.normal(size=shape) for _ in range(s)]

        arrs = _resample(rng, draw, _stacks_separated) if kind == "max" else draw()
        maps = [Tensor(a, requires_grad=True) for a in arrs]
        s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))

        def f(*ms):
            return s(fuse(kind, list(ms)).y)

        return gradcheck_fn(f, maps)

    return run


def _check_rnn_step(rng: np.random.Generator) -> float:
    d_in, d_h = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = Tensor(rng.normal(size=d_in), requires_grad=True)
    h = Tensor(rng.normal(size=d_h), requires_grad=True)
    w_in = Tensor(rng.normal(size=(d_h, d_in)), requires_grad=True)
    w_rec = Tensor(rng.normal(size=(d_h, d_h)), requires_grad=True)
    b = Tensor(rng.normal(size=d_h), requires_grad=True)
    s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))

    def f(xx, hh, wi, wr, bb):
        out = ad.tanh(ad.add(ad.add(ad.matvec(wi, xx), ad.matvec(wr, hh)), bb))
        return s(out)

    return gradcheck_fn(f, [x, h, w_in, w_rec, b])


def _check_temporal_mean(rng: np.random.Generator) -> float:
    t, d = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    p = Tensor(rng.normal(size=(t, d)), requires_grad=True)
    s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))

    def f(pp):
        v, _ = temporal_pool("mean", pp)
        return s(v)

    return gradcheck_fn(f, [p])


def _check_temporal_attentive(rng: np.random.Generator) -> float:
    tp, tg, d = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))

    def draw():
        return (rng.normal(size=(tp, d)), rng.normal(size=(tg, d)),
                0.5 * rng.normal(size=(d, d)))

    def valid(inst):
        p, q, u = inst
        scores = np.tanh(p @ u @ q.T)
        return _rowcol_separated(scores)

    p_, q_, u_ = _resample(rng, draw, valid)
    p = Tensor(p_, requires_grad=True)
    q = Tensor(q_, requires_grad=True)
    u = Tensor(u_, requires_grad=True)
    s = _Scalarize(np.random.default_rng(int(rng.integers(1 << 31))))

    def f(pp, qq, uu):
        vp, vq = temporal_pool("attentive", pp, qq, AttentionParams(uu))
        return ad.add(s(vp), s(vq))

    return gradcheck_fn(f, [p, q, u])


def _check_siamese(rng: np.random.Generator) -> float:
    d = int(rng.integers(2, 6))
    same = bool(rng.integers(2))
    m = 4.0

    def draw():
        return rng.normal(size=(2, d))

    def valid(vs):
        sq = float(np.sum((vs[0] - vs[1]) ** 2))
        return same or abs(m - sq) > TIE_GAP

    vs = _resample(rng, draw, valid)
    v_i = Tensor(vs[0].copy(), requires_grad=True)
    v_j = Tensor(vs[1].copy(), requires_grad=True)
    return gradcheck_fn(lambda a, b: siamese_loss(a, b, same, m), [v_i, v_j])


def _check_identity(rng: np.random.Generator) -> float:
    n = int(rng.integers(2, 7))
    label = int(rng.integers(n))
    logits = Tensor(rng.normal(size=n), requires_grad=True)
    return gradcheck_fn(lambda lg: identity_loss(lg, label), [logits])


GRADCHECK_REGISTRY: list[tuple[str, Callable]] = [
    ("conv2d", _check_conv),
    ("pool_max", _check_pool("max")),
    ("pool_average", _check_pool("average")),
    ("pool_dilated_max", _check_pool("dilated_max")),
    ("pool_dilated_average", _check_pool("dilated_average")),
    ("upsample_zero_pad", _check_upsample),
    ("multiscale_branch", _check_multiscale),
    ("global_avg_pool", _check_global_avg),
    ("fuse_sum", _check_fusion("sum")),
    ("fuse_max", _check_fusion("max")),
    ("fuse_channel", _check_fusion("channel")),
    ("fuse_width", _check_fusion("width")),
    ("fuse_height", _check_fusion("height")),
    ("rnn_step", _check_rnn_step),
    ("temporal_mean", _check_temporal_mean),
    ("temporal_attentive", _check_temporal_attentive),
    ("siamese_loss", _check_siamese),
    ("identity_loss", _check_identity),
]


def run_gradcheck(instances: int = 20, seed: int = 0, tol: float = 1e-4) -> tuple[bool, list[CheckResult]]:
    """Run every registered gradient check; True iff all classes pass."""
    results = []
    for idx, (name, runner) in enumerate(GRADCHECK_REGISTRY):
        rng = np.random.default_rng([seed, idx])
        worst = 0.0
        for _ in range(instances):
            worst = max(worst, runner(rng))
        results.append(CheckResult(name, instances, worst, worst < tol))
    return all(r.ok for r in results), results


# ---------------------------------------------------------------------------
# Brute-force oracle suite
# ---------------------------------------------------------------------------

def run_oracle_check(instances: int = 25, seed: int = 0, tol: float = 1e-10) -> tuple[bool, list[CheckResult]]:
    """Compare vectorized kernels against loop oracles on tiny random inputs."""
    results = []

    rng = np.random.default_rng([seed, 100])
    worst = 0.0
    for _ in range(instances):
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        k = int(rng.integers(1, 4))
        span = dilation * (k - 1) + 1
        h = span + int(rng.integers(0, 8 - span + 1))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pad = int(rng.integers(0, 3))
        x = rng.normal(size=(h, h, cin))
        kernel = rng.normal(size=(cout, cin, k, k))
        bias = rng.normal(size=cout)
        p = Conv2dParams(kernel=Tensor(kernel), bias=Tensor(bias),
                         stride=stride, padding=pad, dilation=dilation)
        ours = conv2d(Tensor(x), p).data
        naive = reference.conv2d_naive(x, kernel, bias, stride, pad, dilation)
        worst = max(worst, float(np.max(np.abs(ours - naive))))
    results.append(CheckResult("conv2d_vs_naive", instances, worst, worst <= tol))

    for pool_idx, kind in enumerate(("max", "average", "dilated_max", "dilated_average")):
        rng = np.random.default_rng([seed, 200, pool_idx])
        worst = 0.0
        for _ in range(instances):
            dilation = 2 if kind.startswith("dilated") else 1
            window = int(rng.integers(2, 4))
            stride = int(rng.integers(1, 3))
            span = dilation * (window - 1) + 1
            h = max(span, int(rng.integers(span, 9)))
            c = int(rng.integers(1, 4))
            x = rng.normal(size=(h, h, c))
            p = PoolParams(kind=kind, window=window, stride=stride, dilation=dilation)
            ours = pool2d(Tensor(x), p).data
            naive = reference.pool2d_naive(x, kind, window, stride, dilation)
            worst = max(worst, float(np.max(np.abs(ours - naive))))
        results.append(CheckResult(f"pool_{kind}_vs_naive", instances, worst, worst <= tol))

    rng = np.random.default_rng([seed, 300])
    worst = 0.0
    for _ in range(instances):
        p_n, g_n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        dist = np.round(rng.uniform(0, 1, size=(p_n, g_n)), 2)
        truth = rng.integers(0, g_n, size=p_n)
        ours = compute_cmc(dist, truth).ranks
        naive = reference.cmc_naive(dist, truth)
        worst = max(worst, float(np.max(np.abs(np.array(ours) - np.array(naive)))))
    results.append(CheckResult("cmc_vs_naive", instances, worst, worst <= tol))

    return all(r.ok for r in results), results
