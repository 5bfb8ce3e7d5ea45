"""Pairwise working-set (SMO) solver for the binary C-SVM dual.

    min_a  1/2 a^T Q a - e^T a   s.t.  y^T a = 0,  0 <= a_i <= C,
    Q_ij = y_i y_j K_ij.

Working-set selection uses second-order information (Fan, Chen & Lin, 2005);
the update and clipping follow the classic LIBSVM formulation.
"""

import numpy as np

TAU = 1e-12


class ConvergenceError(RuntimeError):
    """The solver hit its iteration cap before reaching the KKT tolerance."""


def solve_dual(K, y, C, tol=1e-4, max_iter=1_000_000):
    """Return ``(alpha, b, n_iter)`` with decision ``sum_i alpha_i y_i K(x, x_i) + b``.

    ``K`` is the full (n, n) Gram matrix, ``y`` is in {-1, +1}.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    K = np.asarray(K, dtype=np.float64)
    Q = (y[:, None] * y[None, :]) * K
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    pos = y > 0

    for it in range(max_iter):
        at_upper = alpha >= C
        at_lower = alpha <= 0
        up = np.where(pos, ~at_upper, ~at_lower)
        low = np.where(pos, ~at_lower, ~at_upper)
        minus_yG = -y * G

        cand = np.where(up, minus_yG, -np.inf)
        i = int(np.argmax(cand))
        gmax = cand[i]
        lowvals = np.where(low, minus_yG, np.inf)
        gmin = lowvals.min()
        if gmax - gmin < tol:
            break

        b_it = gmax - minus_yG
        a_it = QD[i] + QD - 2.0 * K[i]
        a_it = np.where(a_it > 0, a_it, TAU)
        score = np.where(low & (b_it > 0), -(b_it * b_it) / a_it, np.inf)
        j = int(np.argmin(score))
        if not np.isfinite(score[j]):
            break

        ai_old, aj_old = alpha[i], alpha[j]
        Qij = Q[i, j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Qij
            delta = (-G[i] - G[j]) / max(quad, TAU)
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Qij
            delta = (G[i] - G[j]) / max(quad, TAU)
            s = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if s > C:
                if ai > C:
                    ai, aj = C, s - C
            elif aj < 0:
                aj, ai = 0.0, s
            if s > C:
                if aj > C:
                    aj, ai = C, s - C
            elif ai < 0:
                ai, aj = 0.0, s

        alpha[i], alpha[j] = ai, aj
        G += Q[i] * (ai - ai_old) + Q[j] * (aj - aj_old)
    else:
        raise ConvergenceError(f"SMO did not reach tol={tol} within {max_iter} iterations")

    return alpha, -_rho(alpha, G, y, C), it


def _rho(alpha, G, y, C):
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        return float(yG[free].mean())
    pos = y > 0
    at_upper = alpha >= C
    # bounds from the KKT conditions of bounded variables
    ub_mask = np.where(at_upper, ~pos, pos)
    lb_mask = ~ub_mask
    ub = yG[ub_mask].min() if np.any(ub_mask) else np.inf
    lb = yG[lb_mask].max() if np.any(lb_mask) else -np.inf
    if not np.isfinite(ub):
        return float(lb)
    if not np.isfinite(lb):
        return float(ub)
    return float((ub + lb) / 2.0)
