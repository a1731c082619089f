"""Independent reference computations used by the tests."""
import itertools

import numpy as np


def l1_projection_by_vertices(gamma, k, tau, orth=None, tol=1e-9):
    """min |u|_1 s.t. |Gamma^T u - e_k|_inf <= tau (and orth^T u = 0) by exhaustive vertex enumeration.

    Every vertex of the feasible set cut by the coordinate hyperplanes is the
    solution of ``r`` active equations drawn from the ``2p`` constraint faces and
    the ``r`` hyperplanes ``u_i = 0``; the L1 norm is linear on each cell, so the
    minimum is attained at one of them.  Returns ``(objective, u)``; ``inf`` when
    infeasible.
    """
    gamma = np.asarray(gamma, dtype=float)
    r, p = gamma.shape
    xi = np.zeros(p)
    xi[k] = 1.0
    rows = [gamma[:, j] for j in range(p)] * 2 + list(np.eye(r))
    rhs = list(xi + tau) + list(xi - tau) + [0.0] * r
    need = r
    fixed_rows, fixed_rhs = [], []
    if orth is not None:
        fixed_rows, fixed_rhs = [np.asarray(orth, dtype=float)], [0.0]
        need = r - 1
    best, best_u = np.inf, None
    for combo in itertools.combinations(range(len(rows)), need):
        M = np.array(fixed_rows + [rows[i] for i in combo])
        b = np.array(fixed_rhs + [rhs[i] for i in combo])
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        u = np.linalg.solve(M, b)
        if np.abs(gamma.T @ u - xi).max() > tau + tol:
            continue
        if orth is not None and abs(np.dot(orth, u)) > tol:
            continue
        val = np.abs(u).sum()
        if val < best:
            best, best_u = val, u
    return best, best_u


def w_hat_direct(G, gam, J, R, S):
    """Covariance of the max-statistic's Gaussian approximation, written out literally.

    ``G`` is n x r (moments at theta_hat), ``gam`` the r x p mean Jacobian.  The
    blocks are formed with explicit index bookkeeping and ``inv``, independently of
    the library's ordering helpers.  Returns ``(W, J_order)``.
    """
    n = G.shape[0]
    RJ = [j for j in sorted(R) if j in J]
    RJc = [j for j in sorted(R) if j not in J]
    RcJ = [j for j in sorted(J) if j not in R]
    Rord = RJ + RJc
    Jord = RJ + RcJ
    Iord = RJ + RJc + RcJ
    V = lambda idx: G[:, idx].T @ G[:, idx] / n
    gS = gam[:, sorted(S)]
    Vr_inv = np.linalg.inv(V(Rord))
    Jstar = gS[Rord].T @ Vr_inv @ gS[Rord]
    B = gS[Jord] @ np.linalg.inv(Jstar) @ gS[Rord].T @ Vr_inv
    a, b, c = len(RJ), len(RJc), len(RcJ)
    B11, B12 = B[:a, :a], B[:a, a:]
    B21, B22 = B[a:, :a], B[a:, a:]
    top = np.hstack([np.eye(a) - B11, -B12, np.zeros((a, c))])
    bottom = np.hstack([-B21, -B22, np.eye(c)])
    Q = np.vstack([top, bottom])
    D = np.diag(1 / np.sqrt(np.diag(V(Jord))))
    W = D @ Q @ V(Iord) @ Q.T @ D
    return W, Jord
