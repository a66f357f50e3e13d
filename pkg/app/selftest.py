# app/selftest.py
"""
Property checks shared by `selftest` and the test suite.

Every check returns a CheckResult with the measured and expected values.
Checks that verify one implementation take it as an argument (defaulting to
the real one) so a broken variant can be fed in and must be caught.
"""
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
from scipy.stats import norm

from app.pipeline.channel import awgn, draw_rayleigh_gains, noise_variance
from app.pipeline.model import forward_pass, init_model
from app.pipeline.redundancy import (
    TWO_LN2, Discriminator, GaussianSpec, bayes_js_objective, derangement, grl, js_bound_terms,
    js_divergence, score_pair, shuffle_negatives,
)
from app.pipeline.train import training_objective
from app.pipeline.vib import GaussianLatent, kl_to_standard_normal
from app.schemas.config import ChannelConfig, ModelConfig
from app.schemas.dataset import MODALITIES, MultiModalBatch, score_to_class
from app.tools.optim import Adam
from app.tools.rng import Rng
from app.tools.tensor import Graph, Parameter, backward, finite_diff_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: str
    expected: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: measured {self.measured}; expected {self.expected} ({self.seconds:.2f}s)"


def relative_error(a, b, floor: float = 1e-3) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

def _primitive_cases(rng: Rng):
    """kind -> (input arrays, builder(graph, *tensors) -> Tensor)."""
    r, c, k = (int(v) for v in rng.integers(1, 9, size=3))
    x = lambda *shape: rng.normal(shape)
    pos = lambda *shape: np.abs(rng.normal(shape)) + 0.5
    away = lambda *shape: np.sign(rng.normal(shape)) * (np.abs(rng.normal(shape)) + 0.1)
    rows = rng.integers(0, r, size=r + 2)
    return {
        "matmul": ([x(r, k), x(k, c)], lambda g, a, b: g.matmul(a, b)),
        "add": ([x(r, c), x(r, c)], lambda g, a, b: g.add(a, b)),
        "multiply": ([x(r, c), x(r, c)], lambda g, a, b: g.multiply(a, b)),
        "negate": ([x(r, c)], lambda g, a: g.negate(a)),
        "exponent": ([x(r, c)], lambda g, a: g.exp(a)),
        "logarithm": ([pos(r, c)], lambda g, a: g.log(a)),
        "sigmoid": ([x(r, c)], lambda g, a: g.sigmoid(a)),
        "tanh": ([x(r, c)], lambda g, a: g.tanh(a)),
        "relu": ([away(r, c)], lambda g, a: g.relu(a)),
        "softplus": ([x(r, c)], lambda g, a: g.softplus(a)),
        "reduce_sum": ([x(r, c)], lambda g, a: g.sum(a, axis=-1)),
        "reduce_mean": ([x(r, c)], lambda g, a: g.mean(a, axis=0)),
        "broadcast": ([x(1, c)], lambda g, a: g.broadcast(a, (r, c))),
        "concat": ([x(r, c), x(r, k)], lambda g, a, b: g.concat([a, b], axis=-1)),
        "slice": ([x(r, c + 1)], lambda g, a: g.slice(a, 0, c)),
        "gather": ([x(r, c)], lambda g, a: g.gather(a, rows)),
        "clamp": ([away(r, c)], lambda g, a: g.clamp(a, 0.0)),
    }


@_timed
def check_primitive_gradients(instances: int = 100, seed: int = 0) -> CheckResult:
    """backward() against central differences for every primitive kind."""
    rng = Rng(seed)
    worst, worst_kind = 0.0, ""
    for _ in range(instances):
        for kind, (arrays, build) in _primitive_cases(rng).items():
            direction = None

            def scalar(graph, tensors):
                out = build(graph, *tensors)
                nonlocal direction
                if direction is None:
                    direction = rng.normal(out.shape)
                return graph.sum(graph.multiply(out, graph.constant(direction)))

            graph = Graph()
            params = [Parameter(f"x{i}", a) for i, a in enumerate(arrays)]
            loss = scalar(graph, [graph.param(p) for p in params])
            grads = backward(graph, loss)
            for i, p in enumerate(params):
                def f(v, i=i):
                    g = Graph()
                    vals = [g.constant(v if j == i else arrays[j]) for j in range(len(arrays))]
                    return scalar(g, vals).item()
                err = relative_error(grads[p.name], finite_diff_grad(f, arrays[i]))
                if err > worst:
                    worst, worst_kind = err, kind
    return CheckResult("primitive gradients", worst < 1e-4,
                       f"max rel. error {worst:.2e} ({worst_kind or '-'})", "< 1e-4")


def _tiny_model(seed: int, reverse_both: bool = True):
    cfg = ModelConfig(feature_hidden=3, latent_dims=(2, 2, 2), transmitted_dim=4, fusion_hidden=4,
                      receiver_latent_dim=2, decoder_hidden=3, disc_hidden=4, reverse_both=reverse_both)
    dims = {"image": 3, "text": 3, "audio": 3}
    return init_model(cfg, dims, Rng(seed)), dims


def _tiny_batch(rng: Rng, dims, n: int = 4) -> MultiModalBatch:
    scores = rng.integers(-3, 4, size=n).astype(np.float64)
    return MultiModalBatch(features={m: rng.normal((n, dims[m])) for m in MODALITIES},
                           label_class=score_to_class(scores), label_score=scores)


_LOSS_TERMS = ("uvib", "mvib", "redundancy", "total")


def _term(graph, parts, which: str, bce_sign: float):
    if which == "uvib":
        out = parts.uvib["image"]
        for m in MODALITIES[1:]:
            out = graph.add(out, parts.uvib[m])
        return out
    if which == "mvib":
        return parts.mvib
    if which == "redundancy":
        return graph.scale(parts.adversarial, bce_sign)
    vib = training_objective(graph, parts, 0.0)
    return graph.add(vib, graph.scale(parts.adversarial, 0.4 * bce_sign))


@_timed
def check_loss_gradients(instances: int = 100, coords: int = 8, seed: int = 0) -> CheckResult:
    """
    Loss-level gradients with frozen noise. GRL runs at alpha = 1 on both
    pair members, so latent-encoder coordinates must match the difference
    quotient of the loss with the BCE part negated; every other coordinate
    matches the plain loss.
    """
    rng = Rng(seed)
    channel = ChannelConfig(family="awgn", snr_db=10.0)
    worst, worst_term = 0.0, ""
    for inst in range(instances):
        model, dims = _tiny_model(seed + inst)
        for disc in model.discriminators.values():
            last = disc.stack.layers[-1].weights
            last.value = rng.normal(last.shape)
        batch = _tiny_batch(rng, dims)
        which = _LOSS_TERMS[inst % len(_LOSS_TERMS)]
        step_seed = int(rng.integers(0, 2**31))
        encoder_side = {id(p) for p in model.latent_encoder_parameters()}

        def run(bce_sign: float):
            out = forward_pass(batch, model, channel, 10.0, 1.0, Rng(step_seed))
            return out.graph, _term(out.graph, out.parts, which, bce_sign)

        graph, loss = run(1.0)
        backward(graph, loss)
        params = model.parameters()
        picks = rng.integers(0, len(params), size=coords)
        got, want = [], []
        for pi in picks:
            p = params[int(pi)]
            flat = int(rng.integers(0, p.value.size))
            sign = -1.0 if id(p) in encoder_side else 1.0
            got.append(p.grad.reshape(-1)[flat])
            orig = p.value.reshape(-1)[flat]

            def f(v, p=p, flat=flat, sign=sign):
                p.value.reshape(-1)[flat] = v[0]
                return run(sign)[1].item()

            want.append(finite_diff_grad(f, np.array([orig]))[0])
            p.value.reshape(-1)[flat] = orig
        err = relative_error(got, want)
        if err > worst:
            worst, worst_term = err, which
    return CheckResult("loss gradients (U-VIB, M-VIB, redundancy, total)", worst < 1e-4,
                       f"max rel. error {worst:.2e} ({worst_term or '-'})", "< 1e-4")


# ---------------------------------------------------------------------------
# vib
# ---------------------------------------------------------------------------

@_timed
def check_kl_monte_carlo(kl_fn: Callable = kl_to_standard_normal, latents: int = 50,
                         samples: int = 100_000, dim: int = 8, seed: int = 0) -> CheckResult:
    """Closed-form KL against a Monte-Carlo mean of log p(z|.) - log q(z) (antithetic pairs)."""
    rng = Rng(seed)
    worst = 0.0
    for _ in range(latents):
        mean = rng.uniform((dim,), -2.0, 2.0)
        std = rng.uniform((dim,), 0.5, 2.0)
        g = Graph()
        closed = kl_fn(g, GaussianLatent(mean=g.constant(mean), std=g.constant(std))).item()
        half = rng.normal((samples // 2, dim))
        eps = np.vstack([half, -half])
        z = mean + std * eps
        log_ratio = (norm.logpdf(z, loc=mean, scale=std) - norm.logpdf(z)).sum(axis=1)
        mc = float(log_ratio.mean())
        worst = max(worst, abs(closed - mc) / max(abs(mc), 1e-12))
    return CheckResult("KL closed form vs Monte Carlo", worst < 0.01,
                       f"max rel. error {worst:.4f}", "< 0.01")


# ---------------------------------------------------------------------------
# redundancy
# ---------------------------------------------------------------------------

@_timed
def check_grl_exactness(grl_fn: Callable = grl, seed: int = 0) -> CheckResult:
    """Gradient through GRL(alpha) equals -alpha times the identity-layer gradient."""
    rng = Rng(seed)
    x0, w = rng.normal((4, 3)), rng.normal((3, 2))
    worst = 0.0
    for alpha in (0.0, 0.5, 1.0):
        grads = []
        for reversed_ in (True, False):
            g = Graph()
            p = Parameter("x", x0)
            x = g.param(p)
            h = grl_fn(g, x, alpha) if reversed_ else x
            loss = g.sum(g.tanh(g.matmul(h, g.constant(w))))
            grads.append(backward(g, loss)["x"])
        worst = max(worst, float(np.max(np.abs(grads[0] + alpha * grads[1]))))
    return CheckResult("GRL exactness", worst <= 1e-10, f"max abs. deviation {worst:.2e}", "<= 1e-10")


@_timed
def check_js_bce_identity(batch: int = 32, seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    disc = Discriminator("check", 6, rng, hidden=8)
    for layer in disc.stack.layers:
        layer.weights.value = rng.normal(layer.weights.shape)
    g = Graph()
    pairs = shuffle_negatives(g.constant(rng.normal((batch, 3))), g.constant(rng.normal((batch, 3))), rng)
    s = score_pair(g, disc, pairs)
    dev = abs(s.j.item() + s.bce.item() - TWO_LN2)
    return CheckResult("J + BCE = 2 ln 2", dev <= 1e-12, f"deviation {dev:.2e}", "<= 1e-12")


@_timed
def check_derangement(draws: int = 10_000, seed: int = 0) -> CheckResult:
    """Batch-4 derangements are uniform over the 9 valid permutations."""
    rng = Rng(seed)
    counts = {}
    for _ in range(draws):
        perm = tuple(int(v) for v in derangement(4, rng))
        counts[perm] = counts.get(perm, 0) + 1
    fixed = any(any(p[i] == i for i in range(4)) for p in counts)
    dev = max(abs(c / draws - 1 / 9) for c in counts.values())
    ok = len(counts) == 9 and not fixed and dev <= 0.02
    return CheckResult("derangement uniformity", ok,
                       f"{len(counts)} permutations, max freq. deviation {dev:.4f}", "9, <= 0.02")


def _train_discriminator(p: GaussianSpec, q: GaussianSpec, rng: Rng, steps: int = 300, batch: int = 256):
    disc = Discriminator("bayes_fit", 1, rng, hidden=16)
    opt = Adam(disc.parameters(), lr=1e-2)
    for _ in range(steps):
        g = Graph()
        pos = g.constant(rng.normal((batch, 1), p.mean, p.std))
        neg = g.constant(rng.normal((batch, 1), q.mean, q.std))
        t_pos, t_neg = disc.scores(g, pos), disc.scores(g, neg)
        a, b = js_bound_terms(g, t_pos, t_neg)
        opt.zero_grad()
        backward(g, g.negate(g.add(a, b)))
        opt.step()

    def score(x):
        g = Graph()
        return disc.scores(g, g.constant(np.array([[float(x)]]))).item()
    return score


@_timed
def check_js_bound_properties(objective_fn: Callable = bayes_js_objective, trained: bool = True,
                             seed: int = 0) -> CheckResult:
    """0 <= J <= 2 ln 2 at the Bayes-optimal discriminator, the two limits,
    J = 2 D_JS, and a trained discriminator never beating the oracle."""
    pairs = [(GaussianSpec(0.0), GaussianSpec(d)) for d in (0.0, 0.5, 1.0, 2.0, 4.0)]
    pairs += [(GaussianSpec(0.0, 1.0), GaussianSpec(1.0, 2.0))]
    problems = []
    for p, q in pairs:
        j = objective_fn(p, q)
        if not (-1e-9 <= j <= TWO_LN2 + 1e-6):
            problems.append(f"J={j:.6f} out of bounds for {p}/{q}")
    same = objective_fn(GaussianSpec(0.0), GaussianSpec(0.0))
    if not same < 1e-3:
        problems.append(f"identical J={same:.2e}")
    far = objective_fn(GaussianSpec(0.0), GaussianSpec(10.0))
    if not far > TWO_LN2 - 1e-3:
        problems.append(f"separated J={far:.6f}")
    one = objective_fn(GaussianSpec(0.0), GaussianSpec(1.0))
    djs = js_divergence(GaussianSpec(0.0), GaussianSpec(1.0))
    if abs(one - 2 * djs) > 1e-6:
        problems.append(f"J={one:.6f} vs 2 D_JS={2 * djs:.6f}")
    if trained:
        rng = Rng(seed)
        for p, q in [(GaussianSpec(0.0), GaussianSpec(1.0)), (GaussianSpec(0.0), GaussianSpec(2.0))]:
            fitted = _train_discriminator(p, q, rng)
            j_fitted = bayes_js_objective(p, q, score=fitted)
            j_opt = objective_fn(p, q)
            if j_fitted > j_opt + 1e-6:
                problems.append(f"trained J={j_fitted:.6f} > oracle {j_opt:.6f}")
    return CheckResult("JS bound (optimal discriminator)", not problems,
                       "; ".join(problems) or f"J(same)={same:.1e}, J(10 sd)={far:.6f}, J(0,1)={one:.6f}",
                       f"[0, {TWO_LN2:.6f}], 2 D_JS={2 * djs:.6f}")


# ---------------------------------------------------------------------------
# channel
# ---------------------------------------------------------------------------

@_timed
def check_channel_calibration(samples: int = 1_000_000, seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    snr = 6.0
    z = np.ones(samples)
    g = Graph()
    noise = awgn(g, z, snr, rng).value - z
    measured = 10.0 * math.log10(1.0 / float(np.mean(noise ** 2)))
    h, _ = draw_rayleigh_gains(rng, samples)
    second, first = float(np.mean(h ** 2)), float(np.mean(h))
    ok = (abs(measured - snr) <= 0.1 and abs(second - 1.0) <= 0.01
          and abs(first - math.sqrt(math.pi) / 2) <= 0.005
          and noise_variance(0.0) == 1.0)
    return CheckResult("channel calibration", ok,
                       f"AWGN {measured:.3f} dB, E[h^2]={second:.4f}, E[h]={first:.4f}",
                       f"{snr} +- 0.1 dB, 1 +- 0.01, {math.sqrt(math.pi) / 2:.4f} +- 0.005")


# ---------------------------------------------------------------------------

def run_selftest(quick: bool = False, on_result: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    n = 10 if quick else 100
    checks = [
        lambda: check_primitive_gradients(instances=n),
        lambda: check_loss_gradients(instances=n // 5 if quick else n),
        lambda: check_kl_monte_carlo(latents=10 if quick else 50),
        lambda: check_grl_exactness(),
        lambda: check_js_bce_identity(),
        lambda: check_derangement(),
        lambda: check_js_bound_properties(trained=not quick),
        lambda: check_channel_calibration(samples=100_000 if quick else 1_000_000),
    ]
    results = []
    for check in checks:
        res = check()
        results.append(res)
        if on_result:
            on_result(res)
    return results
