"""Cell subproblems: assembly, stacked batch solves, balancing, fragments.

A composite cell J owns the X window of its member basic cells and the Y
window spanned by their current Y-marginal boxes. Against the background
marginal of all other cells it solves

    min  <c, pi> + eps*KL(pi | mu_J x nu)
       + lam*KL(P_X pi | mu_J) + lam*KL(P_Y pi + nu_minus_J | nu)

restricted to the window. Cells of one batch are stacked along a leading
axis and share every kernel sweep and one concatenated Newton solve. The
Newton sweep is bit-identical to per-cell solves (nodes are independent
and converged nodes are guarded by masks, never rewritten), and so is the
whole pipeline when the stacked cells share one Y-window size; mixed sizes
are padded with zero-nu columns, which are mathematically inert but shift
reduction lengths, so those solves agree with solo ones to rounding only.

After a solve the cell's Y-marginal is split by member rows, balanced so
each member hits its target share, truncated to a fresh bounding box, and
summarized by exact per-member score fragments (transport and entropy of
the edited plan), so the caller never stores a coupling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .measures import (
    Box,
    DivergenceSpec,
    GridMeasure,
    SparseCellMarginal,
    box_shape,
    box_union,
    extract_window,
    marginal_window,
    truncate_and_rebox,
)
from .partitions import BasicPartition, CompositePartition
from .scores import DualPair, cost_matrix
from .sinkhorn import DenseKernel, gap_kl_terms, y_halfstep_newton

logger = logging.getLogger(__name__)

__all__ = [
    "CellDuals",
    "CellProblem",
    "CellSolution",
    "CellSolverConfig",
    "balance_cell_masses",
    "compute_nu_minus",
    "make_cell_problems",
    "product_plan_fragments",
    "solve_cell_batch",
]


@dataclass(frozen=True)
class CellSolverConfig:
    delta: float = 2e-5
    max_iters: int = 10_000
    newton_tol: float = 1e-12
    newton_max_iters: int = 100
    trunc_threshold: float = 1e-15
    chunk_entries: int = 4_000_000  # cap on stacked window-tensor entries per chunk


@dataclass
class CellDuals:
    """Warm-start duals of one composite cell; beta is boxed since Y windows move."""

    alpha: np.ndarray
    beta_box: Box
    beta: np.ndarray


@dataclass
class CellProblem:
    """One composite cell subproblem, windowed and ready to solve."""

    j: int
    x_box: Box
    mu_win: np.ndarray  # (nx,) window X mass, zeros on padding
    y_box: Box
    nu_win: np.ndarray  # (ny,) window slice of nu
    m_win: np.ndarray | None  # background density d(nu_minus)/d(nu); None = zero
    alpha0: np.ndarray
    beta0: np.ndarray
    members: list  # real member basic-cell ids
    member_rows: list  # flat window row indices per member
    member_masses: np.ndarray  # mu mass per member
    x_coords: list  # per-axis window coordinates
    y_coords: list
    nu_total: float  # total mass of the global nu
    nu_minus_clamped: int = 0  # windowing deficits clamped during assembly


@dataclass
class CellSolution:
    """Solve output for one cell, carrying everything the caller commits."""

    j: int
    members: list
    member_rows: list
    y_box: Box
    duals: DualPair
    member_values: np.ndarray  # (n_members, ny) Y-marginals on the window, balanced
    raw_split: np.ndarray  # pre-balancing split of P_Y pi_J by member rows
    converged: bool
    iterations: int
    gap: float
    first_gap: float = 0.0  # gap at the first stopping check, before real work
    nu_i_new: list = field(default_factory=list)  # truncated marginal per member
    x_marg: list = field(default_factory=list)  # per member, on its retained nodes
    transport: np.ndarray | None = None  # per-member <c, pi> fragment
    kl: np.ndarray | None = None  # per-member KL(pi | mu x nu) fragment
    balance_fallbacks: int = 0
    truncated_mass: float = 0.0
    newton_clamped: int = 0
    nu_minus_clamped: int = 0
    balance_targets: np.ndarray | None = None  # per-member mass targets
    balance_target_miss: float = 0.0  # worst relative deviation from a target
    nu_j_drift_nodes: int = 0  # nodes whose column sum was not restored bitwise


def _rebox(values: np.ndarray, src_box: Box, dst_box: Box) -> np.ndarray:
    """Re-window raw (possibly signed) boxed values onto another box, fill 0."""
    out = np.zeros(box_shape(dst_box), dtype=np.float64)
    src, dst = [], []
    for (s_off, s_ext), (d_off, d_ext) in zip(src_box, dst_box):
        lo, hi = max(s_off, d_off), min(s_off + s_ext, d_off + d_ext)
        if lo >= hi:
            return out
        src.append(slice(lo - s_off, hi - s_off))
        dst.append(slice(lo - d_off, hi - d_off))
    out[tuple(dst)] = values.reshape(box_shape(src_box))[tuple(src)]
    return out


def compute_nu_minus(
    global_y: GridMeasure, nu_j: SparseCellMarginal, window: Box, nu: GridMeasure
) -> tuple[np.ndarray, int]:
    """Background density m = (P_Y pi - nu_J)/nu on the window, flattened.

    The global Y-marginal must dominate the cell's own node-wise; deficits
    beyond 1e-12 relative (rounding debris from assembly) are clamped to
    zero and counted.
    """
    pw = extract_window(global_y.mass, window, fill=0.0)
    cw = marginal_window(nu_j, window)
    nw = extract_window(nu.mass, window, fill=0.0)
    if (nw <= 0).any():
        raise ValueError("nu must be positive on the cell window")
    diff = pw - cw
    bad = diff < -1e-12 * np.maximum(pw, cw)
    n_clamped = int(np.count_nonzero(bad))
    m = np.clip(diff, 0.0, None) / nw
    return m.ravel(), n_clamped


def make_cell_problems(
    mu: GridMeasure,
    nu: GridMeasure,
    basic: BasicPartition,
    part: CompositePartition,
    cell_ids: list,
    nu_i: list,
    duals_store: dict,
    snapshot: GridMeasure,
) -> list:
    """Window up the listed composite cells against a Y-marginal snapshot.

    ``nu_i`` holds the current basic-cell Y-marginals; ``snapshot`` their
    assembled sum (the background is snapshot minus the cell's own part).
    ``duals_store`` maps (partition label, cell id) to warm-start duals.
    """
    nu_total = nu.total_mass
    problems = []
    for j in cell_ids:
        members = part.real_members(j)
        x_box = part.boxes[j]
        win_shape = box_shape(x_box)
        mu_win = extract_window(mu.mass, x_box, fill=0.0).ravel()
        flat = np.arange(mu_win.size).reshape(win_shape)
        rows = []
        for i in members:
            local = tuple(
                slice(b_off - w_off, b_off - w_off + b_ext)
                for (b_off, b_ext), (w_off, _) in zip(basic.cell_boxes[i], x_box)
            )
            rows.append(flat[local].ravel())
        boxes = [nu_i[i].box for i in members if not nu_i[i].is_empty]
        y_box = box_union(boxes) if boxes else nu.grid.full_box()
        cell_sum = np.zeros(box_shape(y_box), dtype=np.float64)
        for i in members:
            cell_sum += marginal_window(nu_i[i], y_box)
        m_win, n_clamped = compute_nu_minus(
            snapshot, SparseCellMarginal(y_box, cell_sum), y_box, nu
        )
        if not m_win.any():
            m_win = None
        stored = duals_store.get((part.label, j))
        if stored is None:
            alpha0 = np.zeros(mu_win.size)
            beta0 = np.zeros(cell_sum.size)
        else:
            alpha0 = stored.alpha
            beta0 = _rebox(stored.beta, stored.beta_box, y_box).ravel()
        problems.append(
            CellProblem(
                j=j,
                x_box=x_box,
                mu_win=mu_win,
                y_box=y_box,
                nu_win=extract_window(nu.mass, y_box, fill=0.0).ravel(),
                m_win=m_win,
                alpha0=alpha0,
                beta0=beta0,
                members=members,
                member_rows=rows,
                member_masses=basic.masses[members],
                x_coords=mu.grid.box_coords(x_box),
                y_coords=nu.grid.box_coords(y_box),
                nu_total=nu_total,
                nu_minus_clamped=n_clamped,
            )
        )
    return problems


def solve_cell_batch(
    problems: list, eps: float, div: DivergenceSpec, config: CellSolverConfig = CellSolverConfig()
) -> list:
    """Solve a batch of cell subproblems via stacked kernel sweeps.

    Zero-mass cells are returned untouched and converged. Live cells are
    stacked into chunks whose window tensors stay under ``chunk_entries``;
    per-cell freezing keeps every cell at its own stopping point.
    """
    out: list = [None] * len(problems)
    live = []
    for k, p in enumerate(problems):
        if p.mu_win.sum() > 0:
            live.append(k)
            continue
        n_mem = len(p.members)
        out[k] = CellSolution(
            j=p.j,
            members=p.members,
            member_rows=p.member_rows,
            y_box=p.y_box,
            duals=DualPair(p.alpha0.copy(), p.beta0.copy()),
            member_values=np.zeros((n_mem, p.nu_win.size)),
            raw_split=np.zeros((n_mem, p.nu_win.size)),
            converged=True,
            iterations=0,
            gap=0.0,
            nu_i_new=[SparseCellMarginal.empty(len(p.y_box)) for _ in p.members],
            x_marg=[np.zeros(0) for _ in p.members],
            transport=np.zeros(n_mem),
            kl=np.zeros(n_mem),
        )
    if not live:
        return out

    nx = problems[live[0]].mu_win.size
    if any(problems[k].mu_win.size != nx for k in live):
        raise ValueError("cells of one batch must share the X-window shape")
    ny_all = max(problems[k].nu_win.size for k in live)
    group_size = max(1, config.chunk_entries // max(nx * ny_all, 1))
    for lo in range(0, len(live), group_size):
        idx = live[lo : lo + group_size]
        sols = _solve_chunk([problems[k] for k in idx], eps, div, config)
        for k, sol in zip(idx, sols):
            out[k] = sol
    return out


def _solve_chunk(probs: list, eps: float, div: DivergenceSpec, config: CellSolverConfig) -> list:
    """Stacked Sinkhorn solve over one chunk of same-window-shape cells."""
    b_n = len(probs)
    nx = probs[0].mu_win.size
    ny = max(p.nu_win.size for p in probs)
    lam = div.lam

    cost = np.zeros((b_n, nx, ny))
    mu = np.zeros((b_n, nx))
    nu = np.zeros((b_n, ny))
    m = np.zeros((b_n, ny))
    alpha = np.zeros((b_n, nx))
    beta = np.zeros((b_n, ny))
    any_m = False
    for b, p in enumerate(probs):
        n = p.nu_win.size
        cost[b, :, :n] = cost_matrix(p.x_coords, p.y_coords)
        mu[b] = p.mu_win
        nu[b, :n] = p.nu_win
        if p.m_win is not None:
            m[b, :n] = p.m_win
            any_m = True
        alpha[b] = p.alpha0
        beta[b, :n] = p.beta0
    m_arg = m if any_m else None

    kernel = DenseKernel(cost, eps)
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    thr = config.delta * mu.sum(axis=1)
    frozen = np.zeros(b_n, dtype=bool)
    gap_b = np.full(b_n, np.inf)
    first_g = None  # gap at the first check; cells already converged at entry
    iters = np.zeros(b_n, dtype=int)
    clamped = 0

    for k in range(1, config.max_iters + 1):
        L = kernel.lse_x(beta / eps + log_nu)
        if k >= 2:
            terms, _ = gap_kl_terms(alpha, L, mu, eps, lam)
            g = lam * terms.sum(axis=1)
            if first_g is None:
                first_g = g.copy()
            newly = ~frozen & (g / lam <= thr)
            gap_b = np.where(newly, g, gap_b)
            frozen |= newly
            if frozen.all():
                break
        alpha = np.where(frozen[:, None], alpha, -(eps * lam / (eps + lam)) * L)
        z = kernel.lse_y(alpha / eps + log_mu)
        beta_new, n_deg = y_halfstep_newton(
            z, m_arg, eps, div, beta, tol=config.newton_tol, max_iters=config.newton_max_iters
        )
        clamped = max(clamped, n_deg)
        beta = np.where(frozen[:, None], beta, beta_new)
        iters = np.where(frozen, iters, k)

    L = kernel.lse_x(beta / eps + log_nu)
    if not frozen.all():
        terms, _ = gap_kl_terms(alpha, L, mu, eps, lam)
        g = lam * terms.sum(axis=1)
        gap_b = np.where(frozen, gap_b, g)
        if first_g is None:
            first_g = g.copy()
    converged_b = gap_b / lam <= thr

    # one extra X half-step gives the balancing reference mu_bar = e^{-a'/lam} mu;
    # the stored duals stay the post-Y-step pair the stopping gap was valid for
    alpha_extra = -(eps * lam / (eps + lam)) * L
    mu_bar = np.exp(-alpha_extra / lam) * mu

    # materialize the window plans once for splitting and score fragments;
    # sc = log(pi / (mu x nu)) is finite everywhere, so plan*sc never hits 0*inf
    sc = alpha[:, :, None] / eps + beta[:, None, :] / eps + kernel._neg_c
    with np.errstate(over="ignore"):
        plan = np.exp(sc + log_mu[:, :, None] + log_nu[:, None, :])

    sols = []
    for b, p in enumerate(probs):
        n = p.nu_win.size
        n_mem = len(p.members)
        split = np.empty((n_mem, n))
        tc = np.empty((n_mem, n))  # per-member column sums of plan * cost
        tl = np.empty((n_mem, n))  # per-member column sums of plan * sc
        mc = np.empty((n_mem, n))  # per-member column sums of mu * cost
        for i, rows in enumerate(p.member_rows):
            pw = plan[b, rows, :n]
            split[i] = pw.sum(axis=0)
            tc[i] = (pw * cost[b, rows, :n]).sum(axis=0)
            tl[i] = (pw * sc[b, rows, :n]).sum(axis=0)
            mc[i] = (cost[b, rows, :n] * mu[b, rows, None]).sum(axis=0)
        sol = CellSolution(
            j=p.j,
            members=p.members,
            member_rows=p.member_rows,
            y_box=p.y_box,
            duals=DualPair(alpha[b].copy(), beta[b, :n].copy()),
            member_values=split.copy(),
            raw_split=split,
            converged=bool(converged_b[b]),
            iterations=int(iters[b]),
            gap=float(gap_b[b]),
            first_gap=float(first_g[b]),
            newton_clamped=clamped,
            nu_minus_clamped=p.nu_minus_clamped,
        )
        balance_cell_masses(sol, mu_bar[b])
        _finalize(sol, p, plan[b, :, :n], tc, tl, mc, config)
        sols.append(sol)
    return sols


def _finalize(
    sol: CellSolution,
    p: CellProblem,
    plan: np.ndarray,
    tc: np.ndarray,
    tl: np.ndarray,
    mc: np.ndarray,
    config: CellSolverConfig,
) -> None:
    """Truncate balanced marginals and compute fragments of the edited plan.

    Balancing and truncation rescale each member's plan columns to its edited
    Y-marginal (factor f = final/raw per node); where the raw split carried
    nothing, the edited plan spreads the new mass over the member's rows
    proportionally to mu, which keeps the entropy fragment finite.
    """
    win_shape = box_shape(p.y_box)
    n_mem = len(p.members)
    transport = np.empty(n_mem)
    kl = np.empty(n_mem)
    for i, rows in enumerate(p.member_rows):
        marg, removed = truncate_and_rebox(
            SparseCellMarginal(p.y_box, sol.member_values[i].reshape(win_shape).copy()),
            config.trunc_threshold,
        )
        sol.truncated_mass += removed
        final = marginal_window(marg, p.y_box).ravel()
        r = sol.raw_split[i]
        pos = r > 0
        f = np.where(pos, final / np.where(pos, r, 1.0), 0.0)
        extra = np.where(pos, 0.0, final)
        mass_i = float(p.member_masses[i])
        transport[i] = float((f * tc[i]).sum() + (extra * mc[i]).sum() / mass_i)
        kl[i] = float(
            (f * tl[i]).sum()
            + xlogy(np.where(pos, final, 0.0), f).sum()
            + xlogy(extra, extra / (mass_i * p.nu_win)).sum()
            - final.sum()
            + mass_i * p.nu_total
        )
        xm = plan[rows] @ f
        extra_sum = float(extra.sum())
        if extra_sum:
            xm = xm + p.mu_win[rows] * (extra_sum / mass_i)
        sol.x_marg.append(xm[p.mu_win[rows] > 0])
        sol.nu_i_new.append(marg)
    sol.transport = transport
    sol.kl = kl


def balance_cell_masses(sol: CellSolution, mu_bar_win: np.ndarray) -> CellSolution:
    """Move mass between members at fixed y until each hits its target share.

    Targets are m_i = mu_bar(X_i) * |nu_J| / mu_bar(X_J) with the reference
    mu_bar = e^{-alpha/lam} mu. Transfers walk donor nodes in fixed index
    order taking what is there; per-node column sums over members are
    restored bitwise afterwards, so the cell total nu_J is preserved exactly.
    """
    vals = sol.member_values
    mbar = np.array([mu_bar_win[rows].sum() for rows in sol.member_rows])
    total = mbar.sum()
    if not total > 0:
        raise ValueError("balancing reference mass must be positive")
    masses = vals.sum(axis=1)
    nu_j = masses.sum()
    targets = mbar * (nu_j / total)
    sol.balance_targets = targets
    surplus = masses - targets
    tol = 1e-13 * np.maximum(targets, 1e-300)
    donors = [i for i in range(len(targets)) if surplus[i] > tol[i]]
    recips = [i for i in range(len(targets)) if surplus[i] < -tol[i]]
    if donors and recips:
        col_before = vals.sum(axis=0)
        di = ri = 0
        while di < len(donors) and ri < len(recips):
            d, r = donors[di], recips[ri]
            amount = min(surplus[d], -surplus[r])
            sol.balance_fallbacks += _move_mass(vals, d, r, amount)
            surplus[d] -= amount
            surplus[r] += amount
            if surplus[d] <= tol[d]:
                di += 1
            if surplus[r] >= -tol[r]:
                ri += 1
        # sub-ulp debris from prefix subtraction must not go negative
        np.clip(vals, 0.0, None, out=vals)
        sol.nu_j_drift_nodes = _restore_columns(vals, col_before)
    miss = np.abs(vals.sum(axis=1) - targets) / np.maximum(targets, 1e-300)
    sol.balance_target_miss = float(miss.max()) if miss.size else 0.0
    return sol


def _move_mass(vals: np.ndarray, d: int, r: int, amount: float) -> int:
    """Greedy node walk moving ``amount`` from row d to row r; 1 on fallback."""
    if amount <= 0:
        return 0
    row = vals[d]
    cum = np.cumsum(row)
    if not cum.size or cum[-1] < amount:
        # donor cannot cover the amount: hand over everything it has
        if cum.size and cum[-1] > 0:
            vals[r] += row
            vals[d] = 0.0
        return 1
    k = int(np.searchsorted(cum, amount))
    if k:
        vals[r, :k] += row[:k]
        vals[d, :k] = 0.0
    part = amount - (cum[k - 1] if k else 0.0)
    vals[d, k] -= part
    vals[r, k] += part
    return 0


def _restore_columns(vals: np.ndarray, col_before: np.ndarray) -> int:
    """Adjust one entry per drifted column until sums match bitwise.

    Transfers preserve each node's real sum over members but reassociate the
    float additions, so the recomputed sum can drift by ulps. Walking a single
    entry through adjacent floats moves the (monotone) sequential sum in steps
    no coarser than the target's spacing, so the exact value is recovered;
    blind additive nudges can instead oscillate around a rounding tie forever.
    Returns the number of columns left unrestored (expected zero).
    """
    bad = 0
    for c in np.flatnonzero(col_before - vals.sum(axis=0)):
        if not _fix_column(vals[:, c], col_before[c]):
            bad += 1
            drift = float(col_before[c] - vals[:, c].sum())
            logger.warning("node %d sum off by %r after restoration", int(c), drift)
    return bad


def _fix_column(col: np.ndarray, target: float) -> bool:
    """Walk entries of ``col`` by ulps until ``col.sum()`` equals ``target``."""
    order = np.argsort(col)[::-1]
    for t in order:
        if _walk_entry(col, t, target):
            return True
    # a rounding tie can make the target unreachable by moving any single
    # entry: the sum then jumps past it in both directions; offsetting a
    # second entry by one ulp shifts the tie and reopens the landing
    for t in order:
        x0 = col[t]
        for toward in (np.inf, -np.inf):
            x1 = np.nextafter(x0, toward)
            if x1 < 0:
                continue
            col[t] = x1
            for u in order:
                if u != t and _walk_entry(col, u, target):
                    return True
            col[t] = x0
    return bool(col.sum() == target)


def _walk_entry(col: np.ndarray, t: int, target: float, cap: int = 256) -> bool:
    x0 = x = col[t]
    for _ in range(cap):
        s = col.sum()
        if s == target:
            return True
        x = np.nextafter(x, np.inf if s < target else -np.inf)
        if x < 0:
            break
        col[t] = x
    col[t] = x0
    return bool(col.sum() == target)


def product_plan_fragments(
    mu_nodes: np.ndarray,
    x_node_coords: np.ndarray,
    nu_i: SparseCellMarginal,
    nu: GridMeasure,
) -> tuple[float, float]:
    """Exact score fragments of the product plan pi_i = mu_i x nu_i / |mu_i|.

    ``mu_nodes`` and ``x_node_coords`` (n, d) describe the cell's retained
    nodes. The squared-distance transport term reduces to per-axis moments;
    the entropy fragment KL(pi_i | mu_i x nu) has the closed form

        sum_y nu_i log(nu_i / nu) - |nu_i| log|mu_i| - |nu_i| + |mu_i| |nu|.

    Returns (transport, kl).
    """
    mass_mu = float(mu_nodes.sum())
    if mass_mu <= 0:
        raise ValueError("cell mu mass must be positive")
    nu_total = nu.total_mass
    mass_nu = nu_i.total_mass
    if nu_i.is_empty or mass_nu == 0.0:
        return 0.0, float(mass_mu * nu_total)
    y_axes = nu.grid.box_coords(nu_i.box)
    vals = nu_i.values
    transport = 0.0
    for a, ya in enumerate(y_axes):
        shape = [1] * vals.ndim
        shape[a] = ya.size
        yc = ya.reshape(shape)
        sx2 = float((mu_nodes * x_node_coords[:, a] ** 2).sum())
        sx1 = float((mu_nodes * x_node_coords[:, a]).sum())
        sy2 = float((vals * yc**2).sum())
        sy1 = float((vals * yc).sum())
        transport += sx2 * mass_nu - 2.0 * sx1 * sy1 + mass_mu * sy2
    transport /= mass_mu
    nu_box = extract_window(nu.mass, nu_i.box, fill=0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = xlogy(vals, vals / nu_box).sum()
    kl = float(entropy - mass_nu * np.log(mass_mu) - mass_nu + mass_mu * nu_total)
    return transport, kl
