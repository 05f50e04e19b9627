import numpy as np

from fbsdelab.lq import LQSpec


def random_spec(seed: int, n: int = 2, m_u: int = 2) -> LQSpec:
    """Random LQ data with R, Q - S'R^-1 S and H built from positive factors."""
    rng = np.random.default_rng(seed)
    g = lambda *shape: rng.standard_normal(shape)
    Mr, Nq, Kh = g(m_u, m_u), g(n, n), g(n, n)
    R = Mr.T @ Mr + np.eye(m_u)
    S = g(m_u, n)
    Q = S.T @ np.linalg.solve(R, S) + Nq.T @ Nq
    return LQSpec(n, m_u, A=0.5 * g(n, n), B=0.5 * g(n, m_u), C=0.3 * g(n, n),
                  D=0.2 * g(n, m_u), Q=0.5 * (Q + Q.T), S=S, R=R, H=Kh.T @ Kh,
                  b=g(n), sigma=g(n), q=g(n), rho=g(m_u), h=g(n))


def fixed_point_spec(**kw) -> LQSpec:
    return LQSpec(1, 1, B=1.0, Q=1.0, R=1.0, H=1.0, **kw)
