"""Theory suite: exact numerical checks of the prospect math and the humanline machinery.

Each check returns a :class:`CheckResult`; :func:`run_theory_suite` runs them
all and is what ``humanline-lab verify-theory`` reports on.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .humanline import (BetaParams, HumanlineConfig, RatioBounds, bounds_from_log_tables,
                        perceived_token_distribution, sample_mask_with_params,
                        simulate_token_rejection, single_sided_accept, concentrated_beta_params)
from .objectives import (LossConfig, dpo_batch, grpo_batch, group_advantages, kto_batch,
                         kto_z0, mismatched_pairs, with_advantages)
from .policy import Policy, Sequence, Vocabulary, log_softmax
from .prospect import (OutcomeDistribution, ProspectParams, sweep_utility_gap, utility, weights)
from .records import Group, LabeledExample, PreferenceRecord
from .rng import stream


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail, data = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0, data)


# ----------------------------------------------------------------------
# prospect theory


def gamble_utility() -> float:
    """Win 100 with probability 0.8, lose 100 otherwise; identity distortion."""
    dist = OutcomeDistribution((-100.0, 100.0), (0.2, 0.8))
    ident = lambda a: a  # noqa: E731
    return utility(dist, ProspectParams(), gain_capacity=ident, loss_capacity=ident)


def injected_weights() -> np.ndarray:
    """Two gains whose cumulatives 0.8 and 0.2 are perceived as 0.8 and 0.3."""
    dist = OutcomeDistribution((-100.0, 50.0, 100.0), (0.2, 0.6, 0.2))
    perceived = {0.8: 0.8, 0.2: 0.3}

    def gain_cap(a):
        return perceived[round(float(a), 12)]

    w = weights(dist, ProspectParams(), gain_capacity=gain_cap, loss_capacity=lambda a: a)
    return w[1:]


def check_prospect_examples() -> CheckResult:
    def run():
        u = gamble_utility()
        w = injected_weights()
        ok = u == 60.0 and w[0] == 0.5 and w[1] == 0.3
        return ok, f"utility={u!r}, weights={w.tolist()}", {"utility": u, "weights": w.tolist()}
    return _timed("prospect worked examples", run)


def check_utility_gap(n_trials: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        gaps = sweep_utility_gap(n_trials, seed)
        bad = sum(not g.holds for g in gaps)
        worst = max(g.lhs / g.rhs if g.rhs > 0 else 0.0 for g in gaps)
        return bad == 0, f"{bad} violations in {n_trials} trials, max lhs/rhs={worst:.3f}", {
            "violations": bad, "max_ratio": worst}
    return _timed("utility-gap bound sweep", run)


# ----------------------------------------------------------------------
# humanline rejection law


def check_rejection_law(gammas=(0.3, 0.6, 1.0), scaled_ratios=(0.1, 0.35, 0.7, 0.95),
                        n: int = 100_000, seed: int = 0, n_sigma: float = 4.0) -> CheckResult:
    """Acceptance of a ratio-``rho`` token is ``(rho / M)^gamma`` for Beta(gamma, 1)."""
    def run():
        worst = 0.0
        rows = []
        for i, g in enumerate(gammas):
            for j, s in enumerate(scaled_ratios):
                rng = stream(seed, "beta", i, j)
                acc = single_sided_accept(np.full(n, math.log(s)), 0.0, g, rng)
                p = s**g
                sigma = math.sqrt(p * (1 - p) / n)
                z = abs(acc.mean() - p) / sigma
                worst = max(worst, z)
                rows.append((g, s, float(acc.mean()), p, z))
        return worst <= n_sigma, f"max |z|={worst:.2f} over {len(rows)} cells", {"rows": rows}
    return _timed("rejection law (Beta(gamma,1) acceptance)", run)


def check_token_distribution(V: int = 8, gamma: float = 0.6, n: int = 200_000,
                             seed: int = 0, alpha: float = 0.01) -> CheckResult:
    """Accepted tokens follow ``p_ref * ratio^gamma`` (chi-square goodness of fit)."""
    def run():
        rng = stream(seed, "beta", 99)
        p_ref = rng.dirichlet(np.ones(V))
        p_theta = rng.dirichlet(np.ones(V))
        counts = simulate_token_rejection(p_theta, p_ref, gamma, n, rng)
        expected = perceived_token_distribution(p_theta, p_ref, gamma) * counts.sum()
        res = stats.chisquare(counts, expected)
        return res.pvalue > alpha, f"chi2={res.statistic:.2f}, p={res.pvalue:.3f}", {
            "pvalue": float(res.pvalue)}
    return _timed(f"accepted-token law on V={V}", run)


# ----------------------------------------------------------------------
# large-k Beta limit


def check_beta_concentration(k: float = 1e5, eps_P: float = 0.8, M_P: float = 2.5,
                             n: int = 100_000, seed: int = 0, rtol: float = 0.1) -> CheckResult:
    def run():
        params = concentrated_beta_params(k, eps_P, 1.25, RatioBounds(M_P, 2.0))
        draws = stream(seed, "beta", 7).beta(params.gamma_P, params.beta_P, size=n)
        m = eps_P / M_P
        target = m * (1 - m) / (k + 1)
        emp = float(draws.var())
        rel = abs(emp - target) / target
        return rel <= rtol, f"Var={emp:.3e} vs {target:.3e} (rel err {rel:.3f})", {"rel_err": rel}
    return _timed("Beta variance at large k", run)


def random_token_pool(n_tokens: int, seed: int, V: int = 8, n_states: int = 4000,
                      scale: float = 0.6):
    """Random (policy, reference) tables and ``n_tokens`` sampled (state, token) pairs."""
    rng = stream(seed, "beta", 11)
    lp = log_softmax(scale * rng.standard_normal((n_states, V)))
    lr = log_softmax(scale * rng.standard_normal((n_states, V)))
    states = rng.integers(n_states, size=n_tokens)
    tokens = rng.integers(V, size=n_tokens)
    log_ratio = lp[states, tokens] - lr[states, tokens]
    b = bounds_from_log_tables(lp, lr)
    return log_ratio, RatioBounds(b.M_P[states], b.M_R[states])


def clip_agreement(k: float = 1e5, epsilon: float = 0.2, n_tokens: int = 100_000,
                   seed: int = 0, clamp: tuple[float, float] | None = None) -> float:
    """Share of tokens where large-k humanline sampling detaches exactly the clamped set.

    ``clamp`` overrides the ratio interval the sampler is compared against
    (used to show that a wrong bound is caught).
    """
    eps_P, eps_R = 1.0 - epsilon, 1.0 + epsilon
    log_ratio, bounds = random_token_pool(n_tokens, seed)
    params = concentrated_beta_params(k, eps_P, eps_R, bounds)
    rejected = sample_mask_with_params(log_ratio, bounds, params, stream(seed, "beta", 12))
    lo, hi = clamp if clamp is not None else (eps_P, eps_R)
    outside = (log_ratio < math.log(lo)) | (log_ratio > math.log(hi))
    return float(np.mean(rejected == outside))


def check_clip_equivalence(k: float = 1e5, epsilon: float = 0.2, n_tokens: int = 100_000,
                           seed: int = 0, threshold: float = 0.995) -> CheckResult:
    def run():
        good = clip_agreement(k, epsilon, n_tokens, seed)
        corrupted = clip_agreement(k, epsilon, n_tokens, seed,
                                   clamp=(1.0 - epsilon, 1.0 + 2 * epsilon))
        ok = good >= threshold and corrupted < threshold
        return ok, f"agreement {good:.4f}; corrupted clamp {corrupted:.4f}", {
            "agreement": good, "corrupted": corrupted}
    return _timed("large-k sampling equals clipping", run)


# ----------------------------------------------------------------------
# gradient oracle


def _tiny_problem(rng, V=4, n_ctx=2, max_len=4):
    vocab = Vocabulary(V, V - 1)
    contexts = [(i,) for i in range(n_ctx)]
    policy = Policy(vocab, contexts, n=2, max_len=max_len)
    policy.logits[:] = rng.standard_normal(policy.logits.shape)
    reference = Policy(vocab, contexts, n=2, max_len=max_len)
    reference.logits[:] = policy.logits + 1.2 * rng.standard_normal(policy.logits.shape)
    baseline = Policy(vocab, contexts, n=2, max_len=max_len)
    baseline.logits[:] = policy.logits + 0.5 * rng.standard_normal(policy.logits.shape)

    def output():
        L = int(rng.integers(1, max_len + 1))
        body = rng.integers(V - 1, size=L - 1)
        return tuple(body.tolist()) + (V - 1,)

    return policy, reference, baseline, contexts, output


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = float(np.max(np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric))) / scale


def finite_difference(loss_of_logits: Callable[[np.ndarray], float], logits: np.ndarray,
                      h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(logits)
    flat = logits.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_of_logits(logits)
        flat[i] = old - h
        down = loss_of_logits(logits)
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return g


def _near_kink(values, kinks, margin):
    values = np.asarray(values)
    return any(np.any(np.abs(values - k) < margin) for k in kinks)


def gradient_instance(objective: str, humanline: HumanlineConfig | None, rng,
                      length_normalized: bool = False, margin: float = 1e-3):
    """One random instance: ``(analytic, numeric)`` or ``None`` if it sits on a kink."""
    policy, reference, baseline, contexts, output = _tiny_problem(rng)
    cfg = LossConfig(objective, beta=float(rng.uniform(0.2, 2.0)),
                     epsilon=float(rng.uniform(0.1, 0.3)), length_normalized=length_normalized,
                     desirable_weight=float(rng.uniform(0.5, 1.5)),
                     undesirable_weight=float(rng.uniform(0.5, 1.5)))
    x = lambda: contexts[int(rng.integers(len(contexts)))]  # noqa: E731

    if objective == "dpo":
        items = [PreferenceRecord(x(), output(), output()) for _ in range(3)]

        def run(p):
            return dpo_batch(items, p, reference, cfg, humanline)
    elif objective == "kto":
        items = [LabeledExample(x(), output(), bool(rng.integers(2))) for _ in range(4)]
        kl_seqs = mismatched_pairs(items)
        z0 = kto_z0(policy.encode(kl_seqs), policy, reference, humanline, length_normalized)

        def run(p):
            return kto_batch(items, p, reference, cfg, humanline, kl_seqs, z0=z0)
    else:
        items = [with_advantages(Group(x(), [output() for _ in range(3)], rng.random(3)))
                 for _ in range(2)]

        def run(p):
            return grpo_batch(items, p, reference, baseline, cfg, humanline)

    res = run(policy)
    lr = policy.token_logps(res.batch) - reference.token_logps(res.batch)
    if humanline is not None and humanline.mode == "clipping":
        if _near_kink(lr, (humanline.log_eps_P, humanline.log_eps_R), margin):
            return None
    if objective == "grpo":
        vals = lr if humanline is None or humanline.mode != "clipping" else np.clip(
            lr, humanline.log_eps_P, humanline.log_eps_R)
        if _near_kink(np.exp(vals), (1 - cfg.epsilon, 1 + cfg.epsilon), margin):
            return None
    analytic = res.tape(policy).grad

    probe = policy.clone()

    def loss_at(logits):
        probe.logits = logits
        return run(probe).loss

    numeric = finite_difference(loss_at, policy.logits.copy())
    if np.max(np.abs(numeric)) < 1e-8:
        return None
    return analytic, numeric


def check_gradients(objective: str, humanline: HumanlineConfig | None, n_instances: int = 50,
                    seed: int = 0, tol: float = 1e-6, length_normalized: bool = False) -> CheckResult:
    mode = "off" if humanline is None else humanline.mode
    name = f"{objective} gradient ({'length-normalised, ' if length_normalized else ''}humanline {mode})"

    def run():
        rng = stream(seed, "init", zlib.crc32(f"{objective}/{mode}/{length_normalized}".encode()))
        errs = []
        while len(errs) < n_instances:
            inst = gradient_instance(objective, humanline, rng, length_normalized)
            if inst is not None:
                errs.append(_relative_error(*inst))
        worst = max(errs)
        return worst <= tol, f"max rel err {worst:.2e} over {n_instances} instances", {
            "max_rel_err": worst}
    return _timed(name, run)


# ----------------------------------------------------------------------
# small identities


def check_advantage_identity(n: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        rng = stream(seed, "init", 5)
        bad = 0
        for _ in range(n):
            r = rng.normal(size=2) * 10 ** rng.uniform(-6, 3, size=2)
            if r[0] == r[1]:
                continue
            a = group_advantages(r)
            want = np.array([1.0, -1.0]) if r[0] > r[1] else np.array([-1.0, 1.0])
            bad += not np.array_equal(a, want)
        return bad == 0, f"{bad} of {n} pairs deviate from (+1, -1)", {"bad": bad}
    return _timed("two-sample advantages are +-1", run)


def gradient_checks(n_instances: int = 50, seed: int = 0) -> list[CheckResult]:
    clip = HumanlineConfig(mode="clipping")
    out = []
    for obj in ("dpo", "kto", "grpo"):
        for hl in (None, clip):
            out.append(check_gradients(obj, hl, n_instances, seed))
    for obj in ("dpo", "kto"):
        out.append(check_gradients(obj, clip, n_instances // 5 or 1, seed, length_normalized=True))
    return out


def run_theory_suite(seed: int = 0, n_grad_instances: int = 50) -> list[CheckResult]:
    results = [
        check_prospect_examples(),
        check_utility_gap(seed=seed),
        check_rejection_law(seed=seed),
        check_token_distribution(seed=seed),
        check_beta_concentration(seed=seed),
        check_clip_equivalence(seed=seed),
        check_advantage_identity(seed=seed),
    ]
    results += gradient_checks(n_grad_instances, seed)
    return results


__all__ = [
    "BetaParams", "CheckResult", "check_advantage_identity", "check_beta_concentration",
    "check_clip_equivalence", "check_gradients", "check_prospect_examples",
    "check_rejection_law", "check_token_distribution", "check_utility_gap", "clip_agreement",
    "finite_difference", "gamble_utility", "gradient_checks", "injected_weights",
    "run_theory_suite",
]
