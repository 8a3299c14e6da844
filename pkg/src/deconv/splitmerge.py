"""Nonparametric engine: batch sweeps plus ELBO-gated split and merge moves.

The factor count is inferred by proposing candidate states (split one
factor in two, or merge a correlated pair), running a single trial
update sweep on the candidate, and accepting it only when its ELBO
estimate strictly beats the current one.  All ELBO estimates reuse the
same fixed evaluation substream, so every accept/reject decision is a
paired comparison under common random numbers.

Factor bookkeeping: a split keeps the first half in the original slot k
and appends the second half as the last factor (the beta remainder stays
last); a merge writes the combined factor at min(kA, kB) and drops
max(kA, kB).  Concentration mass is moved, never renormalized, so the
beta remainder keeps whatever weight it had.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import seeding
from .model import Dataset, Hyperparameters, elbo as model_elbo
from .report import FitReport
from .state import VariationalState
from .vi import (
    FitOptions,
    GradientEstimatorState,
    initialize,
    run_iteration,
)


# ---------------------------------------------------------------------------
# candidate construction


def _two_means(x, rng, max_iter=100):
    """Plain 2-means on the rows of x.

    Centroids start from a random row and the row farthest from it, then
    Lloyd updates run until assignments stop changing.  Returns the (2, M)
    centroid array, or None when the rows are degenerate (fewer than two
    distinct points, or one cluster swallows everything).
    """
    n = x.shape[0]
    if n < 2:
        return None
    i0 = int(rng.integers(n))
    d0 = ((x - x[i0]) ** 2).sum(axis=1)
    i1 = int(np.argmax(d0))
    if d0[i1] <= 1e-24:
        return None
    cent = np.stack([x[i0], x[i1]])
    assign = None
    for _ in range(max_iter):
        d = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        if assign.min() == assign.max():
            return None
        for j in (0, 1):
            cent[j] = x[assign == j].mean(axis=0)
    return cent


def split_candidate(state, k, t, rng):
    """Candidate state with factor k split in two; returns (candidate, fallback).

    Concentration mass moves with the step-size rule rho = (t+4)^-0.5:
    the original slot keeps rho of the beta/pi mass and the appended
    factor gets the rest (at t=0 the halves are exact).  The two global
    centers come from 2-means on the factor's N local mean vectors; the
    covariance and local blocks are copied bit-exact to both halves.
    `fallback` reports that 2-means was degenerate and the centers were
    instead the original row plus Gaussian noise of scale 1e-3.
    """
    kk = state.n_factors
    if not 0 <= k < kk:
        raise ValueError("factor index %d out of range for K=%d" % (k, kk))
    rho = (t + 4.0) ** -0.5

    lam_beta = np.insert(state.lam_beta, kk, (1.0 - rho) * state.lam_beta[k])
    lam_beta[k] = rho * state.lam_beta[k]
    lam_pi = np.concatenate(
        [state.lam_pi, ((1.0 - rho) * state.lam_pi[:, k])[:, None]], axis=1
    )
    lam_pi[:, k] = rho * state.lam_pi[:, k]

    cents = _two_means(state.lam_xbar_mean[:, k, :], rng)
    fallback = cents is None
    if fallback:
        cents = state.lam_mu_mean[k] + 1e-3 * rng.standard_normal(
            (2, state.n_features)
        )
    lam_mu_mean = np.concatenate([state.lam_mu_mean, cents[1][None, :]], axis=0)
    lam_mu_mean[k] = cents[0]

    cand = VariationalState(
        lam_beta=lam_beta,
        lam_pi=lam_pi,
        lam_mu_mean=lam_mu_mean,
        lam_sigma_psi=np.concatenate(
            [state.lam_sigma_psi, state.lam_sigma_psi[k][None, :, :]], axis=0
        ),
        lam_sigma_nu=np.append(state.lam_sigma_nu, state.lam_sigma_nu[k]),
        lam_xbar_mean=np.concatenate(
            [state.lam_xbar_mean, state.lam_xbar_mean[:, k : k + 1, :]], axis=1
        ),
        lam_xbar_scale=np.concatenate(
            [state.lam_xbar_scale, state.lam_xbar_scale[:, k : k + 1, :]], axis=1
        ),
        lam_p=state.lam_p.copy(),
    )
    return cand, fallback


def merge_candidate(state, ka, kb):
    """Candidate state with factors ka and kb combined into one.

    Concentrations (beta, pi) are summed; the global center and the
    inverse-Wishart parameters are beta-weighted averages; the local
    means and scales are pi-weighted averages per observation.  The
    merged factor lands at min(ka, kb).
    """
    kk = state.n_factors
    ka, kb = int(ka), int(kb)
    if ka == kb:
        raise ValueError("cannot merge a factor with itself")
    if not (0 <= ka < kk and 0 <= kb < kk):
        raise ValueError("factor pair (%d, %d) out of range for K=%d" % (ka, kb, kk))
    lo, hi = sorted((ka, kb))

    wa, wb = state.lam_beta[ka], state.lam_beta[kb]
    bw = wa + wb
    mu = (wa * state.lam_mu_mean[ka] + wb * state.lam_mu_mean[kb]) / bw
    nu = (wa * state.lam_sigma_nu[ka] + wb * state.lam_sigma_nu[kb]) / bw
    psi = (wa * state.lam_sigma_psi[ka] + wb * state.lam_sigma_psi[kb]) / bw

    pa, pb = state.lam_pi[:, ka], state.lam_pi[:, kb]
    pw = pa + pb
    xm = (
        pa[:, None] * state.lam_xbar_mean[:, ka] + pb[:, None] * state.lam_xbar_mean[:, kb]
    ) / pw[:, None]
    xs = (
        pa[:, None] * state.lam_xbar_scale[:, ka]
        + pb[:, None] * state.lam_xbar_scale[:, kb]
    ) / pw[:, None]

    lam_beta = np.delete(state.lam_beta, hi)  # remainder stays last
    lam_beta[lo] = bw
    lam_pi = np.delete(state.lam_pi, hi, axis=1)
    lam_pi[:, lo] = pw
    lam_mu_mean = np.delete(state.lam_mu_mean, hi, axis=0)
    lam_mu_mean[lo] = mu
    lam_sigma_psi = np.delete(state.lam_sigma_psi, hi, axis=0)
    lam_sigma_psi[lo] = psi
    lam_sigma_nu = np.delete(state.lam_sigma_nu, hi)
    lam_sigma_nu[lo] = nu
    lam_xbar_mean = np.delete(state.lam_xbar_mean, hi, axis=1)
    lam_xbar_mean[:, lo] = xm
    lam_xbar_scale = np.delete(state.lam_xbar_scale, hi, axis=1)
    lam_xbar_scale[:, lo] = xs

    return VariationalState(
        lam_beta=lam_beta,
        lam_pi=lam_pi,
        lam_mu_mean=lam_mu_mean,
        lam_sigma_psi=lam_sigma_psi,
        lam_sigma_nu=lam_sigma_nu,
        lam_xbar_mean=lam_xbar_mean,
        lam_xbar_scale=lam_xbar_scale,
        lam_p=state.lam_p.copy(),
    )


def merge_shortlist(state):
    """Factor pairs worth trying to merge, most promising first.

    Pairs are scored by the empirical covariance (across observations) of
    their normalized E[pi] columns; only positive covariances qualify.
    Comoving proportion columns suggest two factors explaining the same
    observations.
    """
    e_pi = state.e_pi()
    kk = state.n_factors
    if kk < 2 or e_pi.shape[0] < 2:
        return []
    c = np.atleast_2d(np.cov(e_pi, rowvar=False))
    pairs = [
        (c[i, j], i, j) for i in range(kk) for j in range(i + 1, kk) if c[i, j] > 0
    ]
    pairs.sort(key=lambda r: (-r[0], r[1], r[2]))
    return [(i, j) for _, i, j in pairs]


def trial_iteration(hp, data, state, est, opts, sched, t, rng, warnings=None):
    """One full update sweep on a candidate state, no convergence logic.

    Exactly the sweep a batch iteration runs, so an accepted candidate
    continues seamlessly; mutates `state` and `est` in place.
    """
    return run_iteration(hp, data, state, est, opts, sched, t, rng, warnings)


# ---------------------------------------------------------------------------
# optimizer bookkeeping across moves


def _split_est(est, k):
    """Accumulators for a split candidate: the new factor inherits row k."""
    new = est.copy()
    kk = new.acc["pi"].shape[1]
    new.acc["beta"] = np.insert(new.acc["beta"], kk, new.acc["beta"][k])
    new.acc["pi"] = np.concatenate([new.acc["pi"], new.acc["pi"][:, k : k + 1]], axis=1)
    for name in ("xbar_mean", "xbar_scale"):
        arr = new.acc[name]
        new.acc[name] = np.concatenate([arr, arr[:, k : k + 1, :]], axis=1)
    return new


def _merge_est(est, ka, kb):
    """Accumulators for a merge candidate: parents' rows averaged."""
    new = est.copy()
    lo, hi = sorted((int(ka), int(kb)))
    for name, axis in (("beta", 0), ("pi", 1), ("xbar_mean", 1), ("xbar_scale", 1)):
        arr = new.acc[name]
        merged = 0.5 * (np.take(arr, ka, axis=axis) + np.take(arr, kb, axis=axis))
        arr = np.delete(arr, hi, axis=axis)
        if axis == 0:
            arr[lo] = merged
        elif arr.ndim == 2:
            arr[:, lo] = merged
        else:
            arr[:, lo, :] = merged
        new.acc[name] = arr
    return new


# ---------------------------------------------------------------------------
# full nonparametric fit


def fit_nonparametric(
    hp: Hyperparameters,
    data: Dataset,
    k0: int,
    opts: Optional[FitOptions] = None,
    seed: int = 0,
    resume: Optional[dict] = None,
) -> FitReport:
    """Infer the factor count along with the fit; fully determined by `seed`.

    Starts from k0 seed clusters plus one diffuse catch-all factor, then
    cycles: a batch of plain update sweeps (stopped by a single sub-delta
    relative ELBO change or the batch cap), a merge phase over the
    covariance shortlist, and a split phase over the current factors in
    random order.  Every move gets one trial sweep and is accepted only
    on a strict paired-ELBO improvement; the run stops when a full
    merge+split phase accepts nothing and the batch had converged.

    Move trials draw from their own substream and do not advance the
    batch iteration clock t, so schedules decay only with real sweeps.

    Checkpoints (opts.checkpoint_every counts cycles here) are written at
    cycle boundaries, where the loop state is just counters; `resume`
    takes such a payload and reproduces the uninterrupted run exactly.
    """
    opts = opts or FitOptions()
    if k0 < 1:
        raise ValueError("need at least one starting factor")
    data.validate_domain()
    sched = opts.resolved_schedules(hp.obs_family)

    def eval_elbo(st):
        return model_elbo(
            hp, data, st, opts.elbo_samples, seeding.substream(seed, seeding.ELBO_EVAL)
        )

    if resume is not None:
        if resume["seed"] != seed:
            raise ValueError(
                "checkpoint seed %d does not match requested seed %d"
                % (resume["seed"], seed)
            )
        if resume.get("mode") != "nonparametric" or resume.get("k0") != k0:
            raise ValueError("checkpoint does not belong to this nonparametric run")
        state = resume["state"]
        est = GradientEstimatorState.zeros(
            state.n_obs, state.n_factors, state.n_features, opts.samples,
            decay=opts.rmsprop_decay, eps=opts.rmsprop_eps,
        )
        est.acc = resume["acc"]
        trace = list(resume["elbo_trace"])
        warnings = list(resume["warnings"])
        moves = list(resume["moves"])
        t = resume["iterations"]
        trial = resume["trial"]
        start_cycle = resume["cycle"]
    else:
        warnings = []
        moves = []
        state = initialize(
            hp, data, k0, seeding.substream(seed, seeding.INIT),
            nonparametric=True, noise=opts.init_noise, scale=opts.init_scale,
        )
        est = GradientEstimatorState.zeros(
            state.n_obs, state.n_factors, state.n_features, opts.samples,
            decay=opts.rmsprop_decay, eps=opts.rmsprop_eps,
        )
        trace = [eval_elbo(state)]
        t = 0
        trial = 0
        start_cycle = 0
    converged = False

    for cycle in range(start_cycle, opts.max_cycles):
        # batch phase
        batch_converged = False
        prev = trace[-1]
        for _ in range(opts.batch_max_iters):
            run_iteration(
                hp, data, state, est, opts, sched, t,
                seeding.substream(seed, seeding.ITERATION, t), warnings,
            )
            value = eval_elbo(state)
            trace.append(value)
            t += 1
            if not np.isfinite(value):
                warnings.append("iteration %d: non-finite ELBO estimate" % (t - 1))
            elif np.isfinite(prev) and abs(value - prev) / (abs(prev) + 1e-12) < opts.delta:
                batch_converged = True
                prev = value
                break
            prev = value

        baseline = trace[-1]
        accepted = 0

        # merge phase: retry from a fresh shortlist after every acceptance,
        # since factor indices shift when a pair collapses
        if opts.enable_merges:
            while state.n_factors >= 2:
                took = False
                for ka, kb in merge_shortlist(state):
                    cand = merge_candidate(state, ka, kb)
                    cand_est = _merge_est(est, ka, kb)
                    trial_iteration(
                        hp, data, cand, cand_est, opts, sched, t,
                        seeding.substream(seed, seeding.TRIAL, trial), warnings,
                    )
                    after = eval_elbo(cand)
                    ok = bool(np.isfinite(after) and after > baseline)
                    moves.append({
                        "kind": "merge",
                        "factors": [int(ka), int(kb)],
                        "elbo_before": float(baseline),
                        "elbo_after": float(after),
                        "accepted": ok,
                        "iteration": int(t),
                    })
                    trial += 1
                    if ok:
                        state, est, baseline = cand, cand_est, after
                        trace.append(after)
                        accepted += 1
                        took = True
                        break
                if not took:
                    break

        # split phase: each factor present at phase start gets one shot, in
        # random order; accepted splits append factors, so the recorded
        # indices stay valid and K can at most double
        if opts.enable_splits:
            k_phase = state.n_factors
            order = seeding.substream(seed, seeding.PHASE_ORDER, cycle).permutation(k_phase)
            for k in order:
                rng_trial = seeding.substream(seed, seeding.TRIAL, trial)
                cand, fallback = split_candidate(state, int(k), t, rng_trial)
                cand_est = _split_est(est, int(k))
                trial_iteration(
                    hp, data, cand, cand_est, opts, sched, t, rng_trial, warnings
                )
                after = eval_elbo(cand)
                ok = bool(np.isfinite(after) and after > baseline)
                moves.append({
                    "kind": "split",
                    "factors": [int(k)],
                    "elbo_before": float(baseline),
                    "elbo_after": float(after),
                    "accepted": ok,
                    "iteration": int(t),
                    "noise_fallback": bool(fallback),
                })
                trial += 1
                if ok:
                    state, est, baseline = cand, cand_est, after
                    trace.append(after)
                    accepted += 1
            assert state.n_factors <= 2 * k_phase

        if accepted == 0 and batch_converged:
            converged = True
            break
        if (
            opts.checkpoint_every
            and opts.checkpoint_dir
            and (cycle + 1) % opts.checkpoint_every == 0
        ):
            from .report import save_checkpoint

            save_checkpoint(
                opts.checkpoint_dir, seed, state, est, None, trace, warnings, t,
                extra={
                    "mode": "nonparametric",
                    "k0": int(k0),
                    "moves": moves,
                    "trial": int(trial),
                    "cycle": int(cycle + 1),
                },
            )

    return FitReport(
        mode="nonparametric",
        n_factors=state.n_factors,
        state=state,
        elbo_trace=trace,
        converged=converged,
        iterations=t,
        warnings=warnings,
        moves=moves,
        seed=seed,
        samples=opts.samples,
        elbo_samples=opts.elbo_samples,
    )
