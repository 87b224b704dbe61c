"""Numerical verification suite.

Two families of checks:

* gradient checks - every differentiable op against float64 central
  differences (step 1e-5), reported as
  ``max|analytic - numeric| / max(1, max|numeric|)``;

* placement checks - the series/parallel asymmetry of constant fusion
  weights:

  - ``absorption_check``: in a *parallel* two-branch net (both branches
    bias-free conv + relu straight from the input), scaling one branch by a
    constant is exactly equivalent to rescaling that branch's weights, in
    both the forward values and the gradient correspondence.  The constant
    is therefore only an initialization change.
  - ``series_nonabsorption_check``: in a *series* topology (the deep branch
    is computed from the shallow one), the branch constant leaves the deep
    branch untouched, while folding the same constant into the producing
    weights changes the deep branch - no single-layer re-initialization
    reproduces the weighted model, and the weight's gradient picks up two
    differently scaled contributions.
  - ``bn_scale_invariance_check``: batch normalization erases a constant
    rescaling of a preceding bias-free convolution in the forward pass, so
    a parallel-placed constant can only act through optimization dynamics.
  - ``baseline_reduction_check``: a weighted U-Net with all constants at 1
    is bit-identical to the naive-concat build, including one optimizer
    step.

Checks that require a quantity to *exceed* a threshold report the shortfall
``max(0, threshold - observed)`` so that every report satisfies
``passed == (max_error <= tolerance)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import fusion, ops
from .models import ResUNet, ResUNetConfig
from .optim import SGDMomentum
from .rng import Stream, fold
from .tensor import (Parameter, Tensor, backward, mul_elementwise, mul_scalar,
                     record, tsum)

SUITES = ("grad", "absorption", "series", "bn", "baseline")


@dataclass
class CheckReport:
    check: str
    seed: int
    max_error: float
    tolerance: float
    passed: bool

    @staticmethod
    def build(check: str, seed: int, max_error: float, tolerance: float) -> "CheckReport":
        return CheckReport(check, seed, float(max_error), float(tolerance),
                           float(max_error) <= float(tolerance))


# ---------------------------------------------------------------------------
# Gradient checking


def numeric_gradient(f, tensors: list[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f()`` w.r.t. each tensor."""
    grads = []
    for t in tensors:
        flat = t.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads


def grad_check(build_loss, tensors: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative disagreement between tape gradients and central
    differences, over all listed tensors."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with record() as tape:
        loss = build_loss()
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    numeric = numeric_gradient(lambda: build_loss().item(), tensors, eps)
    err = 0.0
    for ga, gn in zip(analytic, numeric):
        err = max(err, float(np.abs(ga - gn).max() / max(1.0, np.abs(gn).max())))
    return err


def _randn(stream: Stream, shape, std: float = 1.0) -> Tensor:
    return Tensor(stream.normal(int(np.prod(shape)), 0.0, std).reshape(shape))


def _probe(stream: Stream, shape) -> Tensor:
    """Fixed random weighting that turns a tensor output into a scalar loss."""
    return _randn(stream, shape)


def _scalarize(out: Tensor, probe: Tensor) -> Tensor:
    return tsum(mul_elementwise(out, probe))


def _grad_check_cases(seed: int):
    """Yield (name, tolerance, build_loss, tensors) for every op."""
    st = Stream(fold(seed, "gradcheck"))

    x = _randn(st, (3, 4))
    r = _probe(st, (3, 4))
    yield "grad.mul_scalar", 1e-9, (lambda: _scalarize(mul_scalar(x, 1.7), r)), [x]

    a = _randn(st, (3, 4))
    s = Parameter("scale", st.normal(1).reshape(1), "fusion_scalar")
    r2 = _probe(st, (3, 4))
    yield "grad.mul_scalar_param", 1e-9, (lambda: _scalarize(mul_scalar(a, s), r2)), [a, s]

    xc = _randn(st, (2, 3, 6, 5))
    wc = _randn(st, (4, 3, 3, 3), std=0.4)
    bc = _randn(st, (4,))
    rc = _probe(st, (2, 4, 3, 3))
    yield "grad.conv2d", 1e-6, (
        lambda: _scalarize(ops.conv2d(xc, wc, bc, stride=2, padding=1), rc)), [xc, wc, bc]

    xb = _randn(st, (3, 4, 5, 6))
    wb = _randn(st, (4,))
    bb = _randn(st, (4,))
    rb = _probe(st, (3, 4, 5, 6))
    rm = np.zeros(4)
    rv = np.ones(4)
    yield "grad.batch_norm2d", 1e-6, (
        lambda: _scalarize(ops.batch_norm2d(xb, wb, bb, rm, rv, training=True), rb)), [xb, wb, bb]

    rm2 = st.normal(4, 0.0, 0.5)
    rv2 = 1.0 + st.uniform(4)
    yield "grad.batch_norm2d_inference", 1e-6, (
        lambda: _scalarize(ops.batch_norm2d(xb, wb, bb, rm2, rv2, training=False), rb)), [xb, wb, bb]

    xu = _randn(st, (2, 3, 5, 7))
    ru = _probe(st, (2, 3, 10, 14))
    yield "grad.bilinear_upsample", 1e-6, (
        lambda: _scalarize(ops.bilinear_upsample(xu, 2), ru)), [xu]

    xe = _randn(st, (2, 3, 4, 4))
    ye = np.floor(st.uniform(2 * 4 * 4) * 3).astype(np.int64).reshape(2, 4, 4)
    yield "grad.cross_entropy", 1e-6, (lambda: ops.cross_entropy(xe, ye)), [xe]

    xr = _randn(st, (4, 5))
    xr.data[np.abs(xr.data) < 1e-3] = 2e-3  # keep samples away from the relu kink
    rr = _probe(st, (4, 5))
    yield "grad.relu", 1e-6, (lambda: _scalarize(ops.relu(xr), rr)), [xr]

    xs = _randn(st, (4, 5))
    rs = _probe(st, (4, 5))
    yield "grad.sigmoid", 1e-6, (lambda: _scalarize(ops.sigmoid(xs), rs)), [xs]

    f1 = _randn(st, (2, 2, 3, 3))
    f2 = _randn(st, (2, 3, 3, 3))
    rf = _probe(st, (2, 5, 3, 3))
    yield "grad.fuse_concat", 1e-6, (
        lambda: _scalarize(fusion.fuse_concat([f1, f2]), rf)), [f1, f2]

    g1 = _randn(st, (2, 3, 3, 3))
    g2 = _randn(st, (2, 3, 3, 3))
    g3 = _randn(st, (2, 3, 3, 3))
    rg = _probe(st, (2, 3, 3, 3))
    yield "grad.fuse_add", 1e-6, (
        lambda: _scalarize(fusion.fuse_add([g1, g2, g3]), rg)), [g1, g2, g3]

    w1 = _randn(st, (2, 2, 3, 3))
    w2 = _randn(st, (2, 3, 3, 3))
    rw = _probe(st, (2, 5, 3, 3))
    yield "grad.weighted_concat", 1e-6, (
        lambda: _scalarize(fusion.weighted_concat(w1, w2, 0.37, 1.9), rw)), [w1, w2]

    xd = _randn(st, (2, 4, 3, 3))
    wd = Parameter("cw", st.normal(4), "fusion_channel")
    rd = _probe(st, (2, 8, 3, 3))
    yield "grad.dynamic_channel_weight", 1e-6, (
        lambda: _scalarize(fusion.fuse_concat(
            [fusion.dynamic_channel_weight(xd, wd), xd]), rd)), [xd, wd]

    xg = _randn(st, (2, 3, 4, 4))
    wg = Parameter("gate", st.normal(3, 0.0, 0.5).reshape(1, 3, 1, 1), "gate_weight")
    rgg = _probe(st, (2, 1, 4, 4))
    yield "grad.gate", 1e-6, (lambda: _scalarize(fusion.gate(xg, wg), rgg)), [xg, wg]

    xl = _randn(st, (2, 3, 4, 4))
    o1 = _randn(st, (2, 3, 4, 4))
    o2 = _randn(st, (2, 3, 4, 4))
    wl = Parameter("gl", st.normal(3, 0.0, 0.5).reshape(1, 3, 1, 1), "gate_weight")
    wo1 = Parameter("go1", st.normal(3, 0.0, 0.5).reshape(1, 3, 1, 1), "gate_weight")
    wo2 = Parameter("go2", st.normal(3, 0.0, 0.5).reshape(1, 3, 1, 1), "gate_weight")
    rl = _probe(st, (2, 3, 4, 4))

    def gff_loss():
        gl = fusion.gate(xl, wl)
        gos = [fusion.gate(o1, wo1), fusion.gate(o2, wo2)]
        return _scalarize(fusion.gff_fuse(xl, [o1, o2], gl, gos), rl)

    yield "grad.gff_fuse", 1e-6, gff_loss, [xl, o1, o2, wl, wo1, wo2]

    xa = _randn(st, (2, 3, 4, 4))
    xb2 = _randn(st, (2, 3, 4, 4))
    wa = Parameter("gc1", st.normal(3, 0.0, 0.5).reshape(1, 3, 1, 1), "gate_weight")
    wb2 = Parameter("gc2", st.normal(3, 0.0, 0.5).reshape(1, 3, 1, 1), "gate_weight")
    ra = _probe(st, (2, 6, 4, 4))
    yield "grad.gated_concat", 1e-6, (
        lambda: _scalarize(fusion.gated_concat(xa, xb2, wa, wb2), ra)), [xa, xb2, wa, wb2]


def check_gradients(seeds: int = 10) -> list[CheckReport]:
    reports = []
    for seed in range(seeds):
        for name, tol, build_loss, tensors in _grad_check_cases(seed):
            err = grad_check(build_loss, tensors)
            reports.append(CheckReport.build(name, seed, err, tol))
    return reports


# ---------------------------------------------------------------------------
# Weight-placement checks


def _shortfall(observed: float, threshold: float) -> float:
    return max(0.0, threshold - observed)


def absorption_check(beta: float, seed: int, tol: float = 1e-6) -> CheckReport:
    """Parallel placement: a branch constant is exactly a reparameterization.

    Two branches are computed independently from the same input through
    bias-free conv + relu.  Scaling branch 1 by ``beta`` must equal scaling
    branch 1's weights by ``beta`` (relu is positively homogeneous), and the
    weight gradients must correspond by the same factor.
    """
    if beta <= 0:
        raise ValueError(f"absorption_check needs beta > 0, got {beta}")
    st = Stream(fold(seed, "absorption"))
    x0 = _randn(st, (2, 3, 8, 8))
    w1_data = st.normal(4 * 3 * 3 * 3, 0.0, 0.3).reshape(4, 3, 3, 3)
    w2 = _randn(st, (5, 3, 3, 3), std=0.3)
    probe = _probe(st, (2, 9, 8, 8))

    w1a = Parameter("w1", w1_data.copy(), "conv_weight")
    with record() as tape_a:
        branch1 = ops.relu(ops.conv2d(x0, w1a, padding=1))
        branch2 = ops.relu(ops.conv2d(x0, w2, padding=1))
        fused_a = fusion.weighted_concat(branch1, branch2, beta, 1.0)
        loss_a = _scalarize(fused_a, probe)
    backward(loss_a, tape_a)

    w1b = Parameter("w1", fusion.absorb_weight(Tensor(w1_data), beta).data, "conv_weight")
    with record() as tape_b:
        branch1b = ops.relu(ops.conv2d(x0, w1b, padding=1))
        branch2b = ops.relu(ops.conv2d(x0, w2, padding=1))
        fused_b = fusion.weighted_concat(branch1b, branch2b, 1.0, 1.0)
        loss_b = _scalarize(fused_b, probe)
    backward(loss_b, tape_b)

    scale = max(1.0, float(np.abs(fused_a.data).max()))
    err_forward = float(np.abs(fused_a.data - fused_b.data).max()) / scale
    gscale = max(1.0, float(np.abs(w1a.grad).max()))
    err_grad = float(np.abs(w1a.grad - beta * w1b.grad).max()) / gscale
    return CheckReport.build(f"absorption[beta={beta:g}]", seed,
                             max(err_forward, err_grad), tol)


def series_nonabsorption_check(alpha: float, seed: int) -> CheckReport:
    """Series placement: the branch constant is *not* absorbable.

    With x1 = conv(x0) and x2 = conv(x1): (i) weighting x1 leaves the x2
    channels bit-identical; (ii) folding the constant into the first conv's
    weights instead changes x2 (by more than 1e-3 on random data); (iii) the
    first weight's gradient under the constant is not the constant times its
    unweighted gradient (two differently scaled contributions).
    """
    if alpha <= 0:
        raise ValueError(f"series_nonabsorption_check needs alpha > 0, got {alpha}")
    st = Stream(fold(seed, "series"))
    x0 = _randn(st, (1, 3, 8, 8))
    w1_data = st.normal(4 * 3 * 3 * 3, 0.0, 0.3).reshape(4, 3, 3, 3)
    w2 = _randn(st, (5, 4, 3, 3), std=0.3)
    probe = _probe(st, (1, 9, 8, 8))
    c1 = 4

    def run(alpha_value: float, w1_array: np.ndarray):
        w1 = Parameter("w1", w1_array.copy(), "conv_weight")
        with record() as tape:
            x1 = ops.conv2d(x0, w1, padding=1)
            x2 = ops.conv2d(x1, w2, padding=1)
            fused = fusion.weighted_concat(x1, x2, alpha_value, 1.0)
            loss = _scalarize(fused, probe)
        backward(loss, tape)
        return fused.data, x2.data, w1.grad

    fused_alpha, x2_alpha, grad_alpha = run(alpha, w1_data)
    fused_one, x2_one, grad_one = run(1.0, w1_data)
    err_deep = float(np.abs(fused_alpha[:, c1:] - fused_one[:, c1:]).max())
    if alpha == 1.0:
        err = max(err_deep, float(np.abs(fused_alpha - fused_one).max()))
        return CheckReport.build("series[alpha=1]", seed, err, 0.0)

    _, x2_rescaled, _ = run(1.0, alpha * w1_data)
    deep_change = float(np.abs(x2_rescaled - x2_one).max())

    gscale = max(1.0, float(np.abs(grad_alpha).max()))
    grad_two_scale = float(np.abs(grad_alpha - alpha * grad_one).max()) / gscale

    err = max(err_deep, _shortfall(deep_change, 1e-3), _shortfall(grad_two_scale, 1e-3))
    return CheckReport.build(f"series[alpha={alpha:g}]", seed, err, 0.0)


def bn_scale_invariance_check(c: float, seed: int, tol: float = 1e-5) -> CheckReport:
    """Batch norm in training mode cancels a constant rescaling of the
    preceding bias-free convolution's weights."""
    if c <= 0:
        raise ValueError(f"bn_scale_invariance_check needs c > 0, got {c}")
    st = Stream(fold(seed, "bn_scale"))
    # pre-BN variance well above eps/c^2, so the eps regularizer stays
    # negligible after rescaling by small c
    x = _randn(st, (4, 3, 10, 10), std=25.0)
    w = _randn(st, (6, 3, 3, 3), std=0.5)
    bn_w = _randn(st, (6,))
    bn_b = _randn(st, (6,))

    def forward(scale: float):
        rm = np.zeros(6)
        rv = np.ones(6)
        z = ops.conv2d(x, Tensor(w.data * scale), padding=1)
        return ops.batch_norm2d(z, bn_w, bn_b, rm, rv, training=True).data

    err = float(np.abs(forward(1.0) - forward(c)).max())
    return CheckReport.build(f"bn_scale[c={c:g}]", seed, err, tol)


def baseline_reduction_check(seed: int, widths: tuple = (32, 64, 128, 256)) -> CheckReport:
    """A weighted build with all constants at 1 must match the naive-concat
    build bit for bit: forward, gradients, and one optimizer step."""
    levels = len(widths)
    ones = (1.0,) * levels

    def build(kind: str) -> ResUNet:
        return ResUNet(ResUNetConfig(
            levels=levels, skip_channels=widths, alphas=ones, betas=ones,
            fusion=kind, bn_weight_init="normal01", seed=seed))

    model_w = build("weighted")
    model_n = build("naive_concat")
    side = 2 * model_w.config.divisor
    st = Stream(fold(seed, "baseline"))
    x = Tensor(st.normal(3 * side * side).reshape(1, 3, side, side).astype(np.float32))
    labels = np.floor(st.uniform(side * side) * 2).astype(np.int64).reshape(1, side, side)

    out_w = model_w.forward(x, training=False)
    out_n = model_n.forward(x, training=False)
    if not np.array_equal(out_w.data, out_n.data):
        err = float(np.abs(out_w.data - out_n.data).max())
        return CheckReport.build("baseline_reduction", seed, max(err, 1.0), 0.0)

    err = 0.0
    for model in (model_w, model_n):
        opt = SGDMomentum(model.parameters(), 0.9, 0.0005)
        with record() as tape:
            loss = ops.cross_entropy(model.forward(x, training=True), labels)
        opt.zero_grad()
        backward(loss, tape)
        opt.step(0.01)
    for (name_w, pw), (name_n, pn) in zip(model_w.named_parameters(),
                                          model_n.named_parameters()):
        if name_w != name_n or not np.array_equal(pw.grad, pn.grad) \
                or not np.array_equal(pw.data, pn.data):
            err = max(err, 1.0, float(np.abs(pw.data - pn.data).max()))
    return CheckReport.build("baseline_reduction", seed, err, 0.0)


# ---------------------------------------------------------------------------
# Suite runner


def run_suite(suite: str = "all", seeds: int = 10) -> list[CheckReport]:
    if suite not in SUITES and suite != "all":
        raise ValueError(f"unknown suite {suite!r}; pick from {('all',) + SUITES}")
    reports: list[CheckReport] = []
    if suite in ("all", "grad"):
        reports += check_gradients(seeds)
    if suite in ("all", "absorption"):
        for beta in (0.1, 0.5, 2.0):
            for seed in range(seeds):
                reports.append(absorption_check(beta, seed))
    if suite in ("all", "series"):
        for seed in range(seeds):
            reports.append(series_nonabsorption_check(0.5, seed))
    if suite in ("all", "bn"):
        for c in (0.1, 10.0):
            for seed in range(seeds):
                reports.append(bn_scale_invariance_check(c, seed))
    if suite in ("all", "baseline"):
        for seed in range(seeds):
            reports.append(baseline_reduction_check(seed))
    return reports


def all_passed(reports: list[CheckReport]) -> bool:
    return all(r.passed for r in reports)


def write_reports_csv(reports: list[CheckReport], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "seed", "max_error", "tolerance", "passed"])
        for r in reports:
            writer.writerow([r.check, r.seed, repr(r.max_error), repr(r.tolerance),
                             str(r.passed).lower()])


def format_reports(reports: list[CheckReport]) -> str:
    lines = []
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"[{status}] {r.check:<40} seed={r.seed:<3} "
                     f"max_error={r.max_error:.3e} tol={r.tolerance:.3e}")
    n_fail = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - n_fail}/{len(reports)} checks passed")
    return "\n".join(lines)
