"""Dense third-order tensor algebra and Tucker decomposition by HOOI.

Tensors are plain ``numpy.ndarray`` objects of shape ``(m, n, p)`` indexed
``A[i, j, k]``. Modes are 0-based axis numbers (0, 1, 2). Unfoldings follow
the Kolda-Bader convention: in the mode-0 unfolding, column ``j + k * n``
holds fiber ``A[:, j, k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

Ranks = Tuple[int, int, int]


class RankError(ValueError):
    """Requested Tucker ranks exceed the tensor dimensions."""


def _check_mode(A: np.ndarray, mode: int) -> None:
    if A.ndim != 3:
        raise ValueError(f"expected a 3rd-order tensor, got ndim={A.ndim}")
    if mode not in (0, 1, 2):
        raise ValueError(f"mode must be 0, 1 or 2, got {mode}")


def unfold(A: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(A.shape[mode], prod(other dims))``."""
    _check_mode(A, mode)
    return np.reshape(np.moveaxis(A, mode, 0), (A.shape[mode], -1), order="F")


def fold(M: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(shape)
    moved = (shape[mode],) + tuple(s for i, s in enumerate(shape) if i != mode)
    return np.moveaxis(np.reshape(M, moved, order="F"), 0, mode)


def mode_product(A: np.ndarray, X: np.ndarray, mode: int) -> np.ndarray:
    """``A x_mode X``: contracts mode ``mode`` of ``A`` with the columns of ``X``.

    For mode 0: ``out[i, j, k] = sum_l A[l, j, k] * X[i, l]``.
    """
    _check_mode(A, mode)
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != A.shape[mode]:
        raise ValueError(
            f"dimension mismatch: matrix {X.shape} against mode {mode} of size {A.shape[mode]}"
        )
    out = np.tensordot(X, A, axes=([1], [mode]))
    return np.moveaxis(out, 0, mode)


def multi_mode_product(A: np.ndarray, matrices: Sequence[np.ndarray], transpose: bool = False):
    """Apply one matrix per mode; with ``transpose`` each matrix is transposed first."""
    out = A
    for mode, X in enumerate(matrices):
        out = mode_product(out, X.T if transpose else X, mode)
    return out


@dataclass(frozen=True)
class TuckerModel:
    """Core tensor plus column-orthonormal factors: ``A ~ core x0 P x1 Q x2 R``."""

    core: np.ndarray
    factors: Tuple[np.ndarray, np.ndarray, np.ndarray]
    n_iter: int = 0
    fit_history: Tuple[float, ...] = field(default=(), compare=False)

    @property
    def ranks(self) -> Ranks:
        return tuple(self.core.shape)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(F.shape[0] for F in self.factors)


def _check_ranks(A: np.ndarray, ranks: Sequence[int]) -> Ranks:
    if A.ndim != 3:
        raise ValueError(f"expected a 3rd-order tensor, got ndim={A.ndim}")
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 3 or any(r < 1 for r in ranks):
        raise RankError(f"ranks must be three positive integers, got {ranks}")
    if any(r > s for r, s in zip(ranks, A.shape)):
        raise RankError(f"ranks {ranks} exceed tensor shape {A.shape}")
    return ranks


def reconstruct(model: TuckerModel) -> np.ndarray:
    return multi_mode_product(model.core, model.factors)


def fit_error(A: np.ndarray, model: TuckerModel) -> float:
    """Frobenius norm of the residual ``A - reconstruct(model)``."""
    return float(np.linalg.norm(A - reconstruct(model)))


def _batch_unfold(A: np.ndarray, mode: int) -> np.ndarray:
    # Column order is irrelevant for left singular vectors, so skip the
    # Kolda-Bader permutation here.
    G = A.shape[0]
    return np.reshape(np.moveaxis(A, mode + 1, 1), (G, A.shape[mode + 1], -1))


def _batch_leading(M: np.ndarray, r: int) -> np.ndarray:
    """Leading ``r`` left singular vectors of every ``M[g]``, sign-normalised.

    Works from the eigenvectors of the smaller Gram matrix, which is much
    cheaper than a batched SVD for these small shapes. Ill-conditioned items
    on the wide-Gram path fall back to the SVD.
    """
    G, m, n = M.shape
    if m <= n or r > n:
        _, V = np.linalg.eigh(M @ np.swapaxes(M, 1, 2))
        U = V[:, :, ::-1][:, :, :r]
    else:
        w, V = np.linalg.eigh(np.swapaxes(M, 1, 2) @ M)
        s = np.sqrt(np.clip(w[:, ::-1][:, :r], 0.0, None))
        V = V[:, :, ::-1][:, :, :r]
        bad = ~(s[:, -1] > 1e-4 * s[:, 0])
        U = M @ V / np.where(s > 0, s, 1.0)[:, None, :]
        if bad.any():
            U[bad] = np.linalg.svd(M[bad])[0][:, :, :r]
    pivot = np.argmax(np.abs(U), axis=1)
    signs = np.sign(np.take_along_axis(U, pivot[:, None, :], axis=1))
    signs[signs == 0] = 1.0
    return U * signs


def _batch_expand(core: np.ndarray, factors) -> np.ndarray:
    out = core
    for m in range(3):
        out = _apply_t(out, np.swapaxes(factors[m], 1, 2), m)
    return out


def _start_variants(sweep_modes: Sequence[int]) -> List[Tuple[int, ...]]:
    # The first mode of a sweep is recomputed before its start value is used,
    # so only the later sweep modes give distinct starts.
    free = list(sweep_modes[1:])
    return [tuple(m for b, m in enumerate(free) if code >> b & 1) for code in range(2 ** len(free))]


def tucker_batch(
    A: np.ndarray, ranks: Sequence[int], max_iters: int = 50, tol: float = 1e-8, starts: int = 1
):
    """HOSVD-initialised HOOI on a stack of equally shaped tensors ``A[g]``.

    Returns ``(core, (P, Q, R), n_iter, history)`` with a leading batch axis
    on every array; ``history`` is (G, max_iters + 1) padded with NaN. With
    ``max_iters=0`` this is the truncated HOSVD.

    ``starts > 1`` also runs HOOI from alternative starts in which the last
    column of some initial factors is replaced by the next singular vector of
    that unfolding, and keeps the best fit per tensor. HOOI only finds a
    local optimum, and these extra starts escape most poor ones.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 4:
        raise ValueError("expected a stack of 3rd-order tensors")
    ranks = _check_ranks(A[0], ranks)
    if starts < 1:
        raise ValueError("starts must be at least 1")
    # A factor spanning its whole mode cannot change the fit, so it is only
    # refreshed once the other factors have settled.
    full = [m for m in range(3) if ranks[m] == A.shape[m + 1]]
    sweep_modes = [m for m in range(3) if m not in full]
    variants = _start_variants(sweep_modes)[:starts] if max_iters > 0 else [()]
    extra = {m for v in variants for m in v}
    leading = [_batch_leading(_batch_unfold(A, m), ranks[m] + (m in extra)) for m in range(3)]

    best = None
    for swapped in variants:
        factors = []
        for m in range(3):
            F = leading[m]
            if m in swapped:
                F = np.concatenate([F[:, :, : ranks[m] - 1], F[:, :, ranks[m] :]], axis=2)
            factors.append(F[:, :, : ranks[m]].copy())
        run = _hooi_run(A, factors, ranks, sweep_modes, max_iters, tol)
        if best is None:
            best = run
            continue
        win = run[4] < best[4]
        for slot, new in zip(best, run):
            if isinstance(slot, list):
                for m in range(3):
                    slot[m][win] = new[m][win]
            else:
                slot[win] = new[win]
    core, factors, n_iter, history, _ = best
    if full and max_iters > 0:
        for m in full:
            factors[m] = _batch_leading(_batch_unfold(_proj_except(A, factors, m), m), ranks[m])
        core = _proj_core(A, factors)
    return core, tuple(factors), n_iter, history


def _hooi_run(A, factors, ranks, sweep_modes, max_iters, tol):
    G = A.shape[0]
    core = _proj_core(A, factors)
    err = np.sqrt(np.sum((A - _batch_expand(core, factors)) ** 2, axis=(1, 2, 3)))
    norm_a = np.sqrt(np.sum(A * A, axis=(1, 2, 3)))
    history = np.full((G, max_iters + 1), np.nan)
    history[:, 0] = err
    n_iter = np.zeros(G, dtype=np.int64)
    active = np.ones(G, dtype=bool)
    for it in range(1, max_iters + 1):
        ia = np.nonzero(active)[0]
        if ia.size == 0:
            break
        fa = [F[ia] for F in factors]
        Aa = A[ia]
        for m in sweep_modes:
            proj = _proj_except(Aa, fa, m)
            fa[m] = _batch_leading(_batch_unfold(proj, m), ranks[m])
        Ca = _proj_core(Aa, fa)
        ea = np.sqrt(np.sum((Aa - _batch_expand(Ca, fa)) ** 2, axis=(1, 2, 3)))
        better = ea <= err[ia]
        upd = ia[better]
        for m in range(3):
            factors[m][upd] = fa[m][better]
        core[upd] = Ca[better]
        change = np.abs(err[ia] - ea)
        err[upd] = ea[better]
        history[ia, it] = ea
        n_iter[ia] = it
        done = ~better | (change <= tol * np.maximum(norm_a[ia], np.finfo(float).tiny))
        active[ia[done]] = False
    return core, factors, n_iter, history, err


def _proj_except(A: np.ndarray, fs, skip: int) -> np.ndarray:
    out = A
    for m in range(3):
        if m != skip:
            out = _apply_t(out, fs[m], m)
    return out


def _proj_core(A: np.ndarray, fs) -> np.ndarray:
    out = A
    for m in range(3):
        out = _apply_t(out, fs[m], m)
    return out


def _apply_t(A: np.ndarray, F: np.ndarray, mode: int) -> np.ndarray:
    """Batched ``A[g] x_mode F[g].T``."""
    G, n0, n1, n2 = A.shape
    r = F.shape[2]
    if mode == 0:
        out = np.swapaxes(F, 1, 2) @ A.reshape(G, n0, n1 * n2)
        return out.reshape(G, r, n1, n2)
    if mode == 2:
        return (A.reshape(G, n0 * n1, n2) @ F).reshape(G, n0, n1, r)
    return np.swapaxes(F, 1, 2)[:, None] @ A


def hosvd_init(A: np.ndarray, ranks: Sequence[int]) -> TuckerModel:
    """Truncated HOSVD: leading left singular vectors of each unfolding."""
    core, factors, _, hist = tucker_batch(np.asarray(A)[None], ranks, max_iters=0)
    return TuckerModel(core[0], tuple(F[0] for F in factors), 0, (float(hist[0, 0]),))


def hooi(
    A: np.ndarray,
    ranks: Sequence[int],
    max_iters: int = 50,
    tol: float = 1e-8,
    starts: Optional[int] = None,
) -> TuckerModel:
    """Higher-order orthogonal iteration from an HOSVD start.

    Each sweep replaces every factor by the leading left singular vectors of
    the unfolding of ``A`` projected on the other two factors. Iteration stops
    when the residual norm changes by less than ``tol * ||A||`` or after
    ``max_iters`` sweeps. ``fit_history`` holds the residual norm after
    initialization and after each sweep of the winning start.

    ``starts`` caps the number of starts tried (see :func:`tucker_batch`);
    the default tries all of them, at most four.
    """
    core, factors, n_iter, hist = tucker_batch(np.asarray(A)[None], ranks, max_iters, tol, starts or 4)
    h = hist[0]
    return TuckerModel(
        core[0], tuple(F[0] for F in factors), int(n_iter[0]), tuple(float(v) for v in h[~np.isnan(h)])
    )


def threshold_mask(core: np.ndarray, delta: float) -> np.ndarray:
    """Entries kept by hard thresholding; leading axes beyond the last three are batch axes."""
    if not 0 <= delta <= 1:
        raise ValueError("threshold fraction must lie in [0, 1]")
    if core.size == 0:
        raise ValueError("empty core")
    mag = np.abs(core)
    tau = delta * np.max(mag, axis=(-3, -2, -1), keepdims=True)
    return mag > tau


def hard_threshold_core(model: TuckerModel, delta: float) -> TuckerModel:
    """Zero every core entry whose magnitude is not strictly above ``delta * max|core|``."""
    kept = np.where(threshold_mask(model.core, delta), model.core, 0.0)
    return TuckerModel(kept, model.factors, model.n_iter, model.fit_history)


def denoise_batch(
    A: np.ndarray,
    ranks: Sequence[int],
    delta: float,
    max_iters: int = 50,
    tol: float = 1e-8,
    starts: int = 1,
) -> np.ndarray:
    """Tucker-compress, hard-threshold and re-expand every tensor of a stack."""
    core, factors, _, _ = tucker_batch(A, ranks, max_iters, tol, starts)
    core = np.where(threshold_mask(core, delta), core, 0.0)
    return _batch_expand(core, factors)
