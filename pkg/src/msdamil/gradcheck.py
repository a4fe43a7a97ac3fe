"""Finite-difference verification of every differentiable operation.

Each case builds a scalar from float64 inputs, runs the reverse pass and
compares every input gradient with central differences.  The stage-1
composite case checks the three parameter groups against the three
functions they are meant to descend (bag loss for the bag head, the
unweighted domain loss for the domain head, bag loss minus the
attention-weighted domain loss for the extractor).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor
from .train import stage1_gradients

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CaseResult:
    name: str
    worst_error: float
    passed: bool
    detail: str = ""


@dataclass
class GradcheckReport:
    results: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = [f"{'case':<28} {'worst rel err':>14}  status"]
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            extra = f"  ({r.detail})" if r.detail else ""
            out.append(f"{r.name:<28} {r.worst_error:>14.3e}  {status}{extra}")
        verdict = "PASS" if self.passed else "FAIL: " + ", ".join(self.failures)
        out.append(f"{verdict}  [{len(self.results)} cases, {self.seconds:.1f}s, tol {self.tolerance:g}]")
        return out


def _probe(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tensor_sum(T.mul(out, Tensor(weights.reshape(out.shape))))


def check_function(build: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   step: float = STEP) -> tuple[float, str]:
    """Worst relative error of ``build(*tensors)`` over all inputs."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    loss = build(*leaves)
    T.backward(loss)
    worst, where = 0.0, ""
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

        def f(arr, k=k):
            args = [Tensor(arr) if j == k else Tensor(l.data) for j, l in enumerate(leaves)]
            with T.no_grad():
                return build(*args).item()

        numeric = T.finite_diff_gradient(f, leaf.data, step)
        err = T.max_relative_error(analytic, numeric)
        if err > worst or not where:
            worst, where = err, f"input {k}"
    return worst, where


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    a, b = _probe((3, 4), rng), _probe((4, 5), rng)
    r35, r34, r39 = _probe((3, 5), rng), _probe((3, 4), rng), _probe((3, 9), rng)
    bias5 = _probe(5, rng)
    other = _probe((3, 4), rng)
    away = rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    img = rng.standard_normal((2, 3, 6, 6))
    kern = rng.standard_normal((4, 3, 3, 3)) * 0.5
    cbias = rng.standard_normal(4)
    r_conv = _probe((2, 4, 4, 4), rng)
    # distinct values keep every 2x2 window away from a tie
    pool_in = rng.permutation(2 * 3 * 5 * 5).reshape(2, 3, 5, 5) * 0.1 + rng.uniform(0, 0.01, (2, 3, 5, 5))
    r_pool = _probe((2, 3, 2, 2), rng)
    target = rng.dirichlet(np.ones(4), 3)
    probs = rng.dirichlet(np.ones(4) * 3, 3)
    w_vec, h_in = _probe(6, rng), rng.standard_normal((5, 6))
    V, w = rng.standard_normal((3, 6)) * 0.5, rng.standard_normal(3)
    return [
        ("matmul", lambda x, y: _weighted_sum(T.matmul(x, y), r35), [a, b]),
        ("linear", lambda x, W, c: _weighted_sum(T.linear(x, W, c), r35), [a, b, bias5]),
        ("transpose", lambda x: _weighted_sum(T.transpose(x), r34.T.copy()), [a]),
        ("add", lambda x, y: _weighted_sum(T.add(x, y), r34), [a, other]),
        ("sub", lambda x, y: _weighted_sum(T.sub(x, y), r34), [a, other]),
        ("mul", lambda x, y: _weighted_sum(T.mul(x, y), r34), [a, other]),
        ("scale", lambda x: _weighted_sum(T.scale(x, -1.7), r34), [a]),
        ("add_scalar", lambda x: _weighted_sum(T.add_scalar(x, 0.3), r34), [a]),
        ("sum", lambda x: T.tensor_sum(T.mul(x, x)), [a]),
        ("mean", lambda x: T.mean(T.mul(x, x)), [a]),
        ("reshape", lambda x: _weighted_sum(T.reshape(x, (4, 3)), r34.reshape(4, 3)), [a]),
        ("concat", lambda x, y: _weighted_sum(T.concat([x, y], axis=1), r39), [a, r35]),
        ("tanh", lambda x: _weighted_sum(T.tanh(x), r34), [a]),
        ("relu", lambda x: _weighted_sum(T.relu(x), r34), [away]),
        ("conv2d", lambda x, k, c: _weighted_sum(T.conv2d(x, k, c), r_conv), [img, kern, cbias]),
        ("maxpool2x2", lambda x: _weighted_sum(T.maxpool2x2(x), r_pool), [pool_in]),
        ("softmax", lambda x: _weighted_sum(T.softmax(x), r34), [a]),
        ("cross_entropy", lambda q: T.tensor_sum(T.cross_entropy(target, q)), [probs]),
        ("attention_pool", lambda h, V_, w_: T.tensor_sum(T.mul(
            M.attention_pool(h, M.attention_weights(h, V_, w_)), Tensor(w_vec))), [h_in, V, w]),
    ]


def _micro_model(rng: np.random.Generator):
    f = M.init_extractor(rng, channels=3, widths=(2, 3), kernel=3, patch_size=12, dtype=np.float64)
    y = M.init_bag_predictor(rng, f.feature_dim, fc_dim=6, attn_hidden=4, dtype=np.float64)
    d = M.init_domain_predictor(rng, f.feature_dim, 3, hidden=5, dtype=np.float64)
    # lift the fc bias so the relu units are active and well away from the kink
    y.fc_b.data[:] = 0.5
    d.hid_b.data[:] = 0.5
    x = rng.uniform(0, 1, (4, 3, 12, 12))
    return x, f, y, d


def stage1_reference(x: np.ndarray, y: np.ndarray, d: np.ndarray, theta_f, theta_y, theta_d,
                     lam: float, beta: np.ndarray) -> tuple[float, float, float]:
    """Plain forward values (L_bag, L_d, L'_d) with beta held at ``beta``."""
    with T.no_grad():
        h = M.extract_features(x, theta_f)
        out = M.bag_head(h, theta_y)
        l_bag = T.cross_entropy(y, out.class_probs).item()
        ce = T.cross_entropy(np.broadcast_to(d, (h.shape[0], d.size)),
                             T.softmax(M.domain_logits(h, theta_d))).data
    return l_bag, float(ce.mean()), float((ce * beta).mean())


def check_stage1_objective(rng: np.random.Generator, lam: float = 0.7,
                           step: float = STEP) -> tuple[float, str]:
    """Each parameter group of the composite objective against its own target function."""
    x, theta_f, theta_y, theta_d = _micro_model(rng)
    y = np.array([0.0, 1.0])
    d = np.array([0.0, 1.0, 0.0])
    _, named, grads = stage1_gradients(Tensor(x), y, d, theta_f, theta_y, theta_d, lam)
    with T.no_grad():
        beta = M.bag_head(M.extract_features(x, theta_f), theta_y).betas.copy()

    def target(group: str) -> float:
        l_bag, l_d, l_dw = stage1_reference(x, y, d, theta_f, theta_y, theta_d, lam, beta)
        return {"y": l_bag, "d": lam * l_d, "f": l_bag - lam * l_dw}[group]

    worst, where = 0.0, ""
    for name, param in named.items():
        group = name.split("/", 1)[0]
        original = param.data

        def f(arr, param=param, group=group):
            param.data = arr
            return target(group)

        numeric = T.finite_diff_gradient(f, original, step)
        param.data = original
        err = T.max_relative_error(grads[name], numeric)
        if err > worst or not where:
            worst, where = err, name
    return worst, where


def run_gradcheck(seed: int = 0, tolerance: float = TOLERANCE) -> GradcheckReport:
    """Run every case in 64-bit and collect the worst relative error per case."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    cases = _op_cases(rng)
    cases.append(("stage1_objective", None, None))
    for name, build, inputs in cases:
        try:
            if build is None:
                err, where = check_stage1_objective(rng)
            else:
                err, where = check_function(build, inputs)
        except Exception as exc:  # a broken op must show up as a named failure
            report.results.append(CaseResult(name, float("inf"), False, f"{type(exc).__name__}: {exc}"))
            continue
        ok = bool(err < tolerance)
        report.results.append(CaseResult(name, err, ok, "" if ok else f"worst at {where}"))
    report.seconds = time.perf_counter() - start
    return report
