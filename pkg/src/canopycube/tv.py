"""Spatio-temporal total-variation denoising of height cubes.

Solves, for an observed cube h of shape (T, H, W),

    min_g  ||h - g||_F^2
           + lambda_temp * sum_t ||g[t+1] - g[t]||_F
           + lambda_spat * sum_{i,j} (||g[:,i+1,j] - g[:,i,j]||_2
                                      + ||g[:,i,j+1] - g[:,i,j]||_2)

Note the two very different norm groupings: each temporal term couples a
full H x W difference slice, while each spatial term couples the length-T
difference vector of one pixel edge.

The solver is a first-order primal-dual iteration. With K the stacked
forward-difference operator (temporal, vertical, horizontal; Neumann
boundary, so ||K||^2 <= 4 + 4 + 4 = 12), iterate

    d_{n+1}    = project(d_n + sigma * K gbar_n)     per-group ball projection
    g_{n+1}    = (g_n - tau * K^T d_{n+1} + 2 tau h) / (1 + 2 tau)
    gbar_{n+1} = 2 g_{n+1} - g_n

with tau = sigma = 1/sqrt(12) so tau * sigma * ||K||^2 <= 1. The primal
update is the exact proximal map of the unweighted data term ||h - g||_F^2.

Nodata pixels are excluded from the data term and every difference touching
one contributes zero, which keeps the dual coordinates of masked differences
at zero throughout.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .raster import HeightCube

log = logging.getLogger(__name__)

#: Upper bound on the squared norm of the stacked difference operator.
OPERATOR_NORM_SQ_BOUND = 12.0

_DEFAULT_STEP = 1.0 / math.sqrt(OPERATOR_NORM_SQ_BOUND)


@dataclass(frozen=True)
class TvConfig:
    lambda_temp: float = 5.0
    lambda_spat: float = 0.5
    max_iters: int = 500
    rel_tol: float = 1e-4
    step_tau: float = _DEFAULT_STEP
    step_sigma: float = _DEFAULT_STEP
    log_every: int = 25
    check_feasibility: bool = False

    def __post_init__(self):
        if self.lambda_temp < 0 or self.lambda_spat < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.step_tau <= 0 or self.step_sigma <= 0:
            raise ValueError("step sizes must be positive")
        if self.step_tau * self.step_sigma > 1.0 / OPERATOR_NORM_SQ_BOUND + 1e-12:
            raise ValueError(
                f"tau*sigma={self.step_tau * self.step_sigma} exceeds "
                f"1/{OPERATOR_NORM_SQ_BOUND}, iteration may diverge"
            )
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be non-negative")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")


@dataclass(frozen=True)
class TvReport:
    """Convergence record: (iteration, objective, rel_change) samples."""

    iterations: int
    final_rel_change: float
    history: tuple[tuple[int, float, float], ...]


# ---------------------------------------------------------------------------
# difference operator and adjoint
# ---------------------------------------------------------------------------


def forward_diff(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """K g: forward differences along t, rows, and columns (Neumann edges)."""
    p = g[1:] - g[:-1]
    qh = g[:, 1:, :] - g[:, :-1, :]
    qw = g[:, :, 1:] - g[:, :, :-1]
    return p, qh, qw


def adjoint_diff(p: np.ndarray, qh: np.ndarray, qw: np.ndarray) -> np.ndarray:
    """K^T d, the negative divergence matching :func:`forward_diff`."""
    t, h, w = p.shape[0] + 1, qh.shape[1] + 1, qw.shape[2] + 1
    out = np.zeros((t, h, w), dtype=np.result_type(p, qh, qw))
    out[:-1] -= p
    out[1:] += p
    out[:, :-1, :] -= qh
    out[:, 1:, :] += qh
    out[:, :, :-1] -= qw
    out[:, :, 1:] += qw
    return out


def operator_norm_sq_estimate(shape: tuple[int, int, int], iters: int = 60,
                              seed: int = 0) -> float:
    """Power-iteration estimate of ||K||^2; always <= 12 in exact arithmetic."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(shape)
    g /= np.linalg.norm(g)
    est = 0.0
    for _ in range(iters):
        kg = forward_diff(g)
        g = adjoint_diff(*kg)
        nrm = np.linalg.norm(g)
        if nrm == 0.0:
            return 0.0
        est = nrm
        g /= nrm
    return float(est)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _group_norms(p: np.ndarray, qh: np.ndarray, qw: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(per-slice temporal norms, per-edge vertical/horizontal norms)."""
    npt = np.sqrt(np.sum(p * p, axis=(1, 2)))
    nqh = np.sqrt(np.sum(qh * qh, axis=0))
    nqw = np.sqrt(np.sum(qw * qw, axis=0))
    return npt, nqh, nqw


def _masks(valid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (valid[1:] & valid[:-1],
            valid[:, 1:, :] & valid[:, :-1, :],
            valid[:, :, 1:] & valid[:, :, :-1])


def tv_objective(g: HeightCube, h: HeightCube, cfg: TvConfig) -> float:
    """Objective value; nodata pixels are skipped in every term."""
    if g.values.shape != h.values.shape:
        raise ValueError("cubes must have identical shape")
    valid = g.finite_mask() & h.finite_mask()
    gv = np.where(valid, g.values.astype(np.float64), 0.0)
    hv = np.where(valid, h.values.astype(np.float64), 0.0)
    data = float(np.sum((hv - gv) ** 2))
    p, qh, qw = forward_diff(gv)
    mp, mh, mw = _masks(valid)
    p = np.where(mp, p, 0.0)
    qh = np.where(mh, qh, 0.0)
    qw = np.where(mw, qw, 0.0)
    npt, nqh, nqw = _group_norms(p, qh, qw)
    return data + cfg.lambda_temp * float(npt.sum()) \
        + cfg.lambda_spat * float(nqh.sum() + nqw.sum())


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def _project_groups(p, qh, qw, lam_t, lam_s):
    """In-place projection onto the per-group dual balls.

    lam_t may be a scalar or a per-slice vector of length T-1.
    """
    npt = np.sqrt(np.sum(p * p, axis=(1, 2)))
    lam = np.broadcast_to(np.asarray(lam_t, dtype=np.float64), npt.shape)
    scale = np.ones_like(npt)
    over = npt > lam
    scale[over] = lam[over] / npt[over]
    p *= scale[:, None, None]

    for q, lam in ((qh, lam_s), (qw, lam_s)):
        nq = np.sqrt(np.sum(q * q, axis=0))
        sc = np.ones_like(nq)
        over = nq > lam
        sc[over] = lam / nq[over]
        q *= sc[None, :, :]


def _denoise_array(hv: np.ndarray, valid: np.ndarray | None, cfg: TvConfig,
                   lam_t: float | np.ndarray | None = None
                   ) -> tuple[np.ndarray, TvReport]:
    """Core iteration on a float64 array; hv must be zero where invalid.

    lam_t overrides cfg.lambda_temp, optionally per temporal slice; the
    tiled driver passes a rescaled vector so a tile's slice-wide shrinkage
    matches what the full grid would apply.
    """
    tau, sigma = cfg.step_tau, cfg.step_sigma
    if lam_t is None:
        lam_t = cfg.lambda_temp
    masked = valid is not None and not valid.all()
    if masked:
        mp, mh, mw = _masks(valid)
        data_scale = np.where(valid, 1.0 / (1.0 + 2.0 * tau), 1.0)
        data_shift = np.where(valid, 2.0 * tau / (1.0 + 2.0 * tau) * hv, 0.0)
    g = hv.copy()
    gbar = g.copy()
    p = np.zeros((hv.shape[0] - 1, *hv.shape[1:]))
    qh = np.zeros((hv.shape[0], hv.shape[1] - 1, hv.shape[2]))
    qw = np.zeros((hv.shape[0], hv.shape[1], hv.shape[2] - 1))

    history: list[tuple[int, float, float]] = []
    rel = math.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        dp, dqh, dqw = forward_diff(gbar)
        if masked:
            dp *= mp
            dqh *= mh
            dqw *= mw
        p += sigma * dp
        qh += sigma * dqh
        qw += sigma * dqw
        _project_groups(p, qh, qw, lam_t, cfg.lambda_spat)
        if cfg.check_feasibility:
            npt, nqh, nqw = _group_norms(p, qh, qw)
            tol = 1e-9
            if (npt > np.asarray(lam_t) * (1 + tol) + tol).any() or \
               (nqh > cfg.lambda_spat * (1 + tol) + tol).any() or \
               (nqw > cfg.lambda_spat * (1 + tol) + tol).any():
                raise AssertionError("dual iterate escaped its ball")

        v = g - tau * adjoint_diff(p, qh, qw)
        if masked:
            g_new = v * data_scale + data_shift
        else:
            g_new = (v + 2.0 * tau * hv) / (1.0 + 2.0 * tau)

        diff = g_new - g
        rel = float(np.linalg.norm(diff)) / max(float(np.linalg.norm(g)), 1.0)
        gbar = g_new + diff  # over-relaxation with theta = 1
        g = g_new

        if it % cfg.log_every == 0 or it == 1 or rel < cfg.rel_tol:
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    f"non-finite values in iterate at iteration {it}"
                )
            obj = _objective_arrays(g, hv, valid, cfg, lam_t)
            history.append((it, obj, rel))
        if rel < cfg.rel_tol:
            break

    if not history or history[-1][0] != it:
        history.append((it, _objective_arrays(g, hv, valid, cfg, lam_t), rel))
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite values in final iterate")
    return g, TvReport(iterations=it, final_rel_change=rel, history=tuple(history))


def _objective_arrays(g, hv, valid, cfg, lam_t=None) -> float:
    if lam_t is None:
        lam_t = cfg.lambda_temp
    p, qh, qw = forward_diff(g)
    if valid is not None and not valid.all():
        mp, mh, mw = _masks(valid)
        p = p * mp
        qh = qh * mh
        qw = qw * mw
        data = float(np.sum(((hv - g) ** 2)[valid]))
    else:
        data = float(np.sum((hv - g) ** 2))
    npt, nqh, nqw = _group_norms(p, qh, qw)
    return data + float(np.sum(np.asarray(lam_t) * npt)) \
        + cfg.lambda_spat * float(nqh.sum() + nqw.sum())


def denoise(h: HeightCube, cfg: TvConfig = TvConfig()) -> tuple[HeightCube, TvReport]:
    """Denoise a cube; nodata pixels pass through untouched."""
    valid = h.finite_mask()
    all_valid = bool(valid.all())
    hv = h.values.astype(np.float64)
    if not all_valid:
        hv = np.where(valid, hv, 0.0)
    if cfg.lambda_temp == 0.0 and cfg.lambda_spat == 0.0:
        # Zero dual, prox fixed point: the input is already the minimizer.
        report = TvReport(1, 0.0, ((1, _objective_arrays(hv, hv, None, cfg), 0.0),))
        return h, report

    g, report = _denoise_array(hv, None if all_valid else valid, cfg)
    out = np.clip(g, 0.0, None).astype(np.float32)
    if not all_valid:
        out[~valid] = np.float32(h.meta.nodata)
    return HeightCube(h.meta, h.years, out), report


# ---------------------------------------------------------------------------
# spatial tiling for cubes too large to solve in one piece
# ---------------------------------------------------------------------------


def halo_width(cfg: TvConfig) -> int:
    """Influence margin for tiled solves; beyond it coupling is negligible."""
    return int(math.ceil(cfg.lambda_spat * 10.0)) + 8


def _tile_spans(extent: int, tile: int) -> list[tuple[int, int]]:
    spans = []
    start = 0
    while start < extent:
        spans.append((start, min(start + tile, extent)))
        start += tile
    return spans


def denoise_tiled(h: HeightCube, cfg: TvConfig = TvConfig(), tile_size: int = 512,
                  workers: int = 1) -> tuple[HeightCube, tuple[TvReport, ...]]:
    """Denoise in spatial tiles with a halo, center-cropped after solving.

    The temporal penalty couples every pixel of a difference slice through
    one Frobenius norm, so a tile solved in isolation would shrink its
    temporal differences harder than the full grid would (its slice norm is
    smaller). Each tile therefore runs with the temporal strength rescaled
    by the tile's share of each slice-difference norm, measured on the
    input; spatial groups are per pixel edge and need no adjustment.

    Output is independent of ``workers``; tiles only ever write their own
    core region.
    """
    if tile_size < 1:
        raise ValueError("tile_size must be positive")
    hgt, wid = h.meta.shape
    if hgt <= tile_size and wid <= tile_size:
        cube, report = denoise(h, cfg)
        return cube, (report,)

    halo = halo_width(cfg)
    spans_r = _tile_spans(hgt, tile_size)
    spans_c = _tile_spans(wid, tile_size)
    jobs = [(r0, r1, c0, c1) for r0, r1 in spans_r for c0, c1 in spans_c]
    valid = h.finite_mask()
    hv = np.where(valid, h.values.astype(np.float64), 0.0)
    out = np.empty_like(hv)

    diff_sq = (hv[1:] - hv[:-1]) ** 2
    if not valid.all():
        diff_sq *= valid[1:] & valid[:-1]
    full_slice_norms = np.sqrt(np.sum(diff_sq, axis=(1, 2)))

    def solve(job):
        r0, r1, c0, c1 = job
        er0, er1 = max(0, r0 - halo), min(hgt, r1 + halo)
        ec0, ec1 = max(0, c0 - halo), min(wid, c1 + halo)
        sub_valid = valid[:, er0:er1, ec0:ec1]
        sub = hv[:, er0:er1, ec0:ec1]
        tile_slice_norms = np.sqrt(
            np.sum(diff_sq[:, er0:er1, ec0:ec1], axis=(1, 2)))
        share = np.divide(tile_slice_norms, full_slice_norms,
                          out=np.ones_like(tile_slice_norms),
                          where=full_slice_norms > 0.0)
        g, report = _denoise_array(
            np.ascontiguousarray(sub),
            None if sub_valid.all() else np.ascontiguousarray(sub_valid),
            cfg,
            lam_t=cfg.lambda_temp * share,
        )
        core = g[:, r0 - er0:r0 - er0 + (r1 - r0), c0 - ec0:c0 - ec0 + (c1 - c0)]
        return job, core, report

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, jobs))
    else:
        results = [solve(j) for j in jobs]

    reports = []
    for (r0, r1, c0, c1), core, report in results:
        out[:, r0:r1, c0:c1] = core
        reports.append(report)
        log.info("tv tile rows=%d:%d cols=%d:%d iters=%d rel=%.3g",
                 r0, r1, c0, c1, report.iterations, report.final_rel_change)

    vals = np.clip(out, 0.0, None).astype(np.float32)
    vals[~valid] = np.float32(h.meta.nodata)
    return HeightCube(h.meta, h.years, vals), tuple(reports)
