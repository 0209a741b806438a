"""Independent reference computations used by the tests.

Nothing here imports the propagation or assembly code under test.
"""
import numpy as np

ORDER = ("ES1", "ES0", "A1", "GS1", "GS0", "ES_NV0", "GS_NV0")


def scalar_rhs(p, r):
    """Time derivative of the populations, written one level at a time (MHz)."""
    es1, es0, a1, gs1, gs0, esz, gsz = r
    return np.array([
        -(p.gamma_es + p.gamma_es1_to_a1 + p.gamma_ion) * es1 + p.gamma_532 * gs1,
        -(p.gamma_es + p.gamma_es0_to_a1 + p.gamma_ion) * es0 + p.gamma_532 * gs0,
        p.gamma_es1_to_a1 * es1 + p.gamma_es0_to_a1 * es0 - p.gamma_a1 * a1,
        p.gamma_es * es1 + p.p_a1_to_gs1 * p.gamma_a1 * a1 - p.gamma_532 * gs1 + (2 * p.gamma_rec / 3) * esz,
        p.gamma_es * es0 + (1 - p.p_a1_to_gs1) * p.gamma_a1 * a1 - p.gamma_532 * gs0 + (p.gamma_rec / 3) * esz,
        -(p.gamma_rec + p.gamma_es_nv0) * esz + p.gamma_532_nv0 * gsz,
        p.gamma_ion * es1 + p.gamma_ion * es0 + p.gamma_es_nv0 * esz - p.gamma_532_nv0 * gsz,
    ])


def assemble_from_rhs(p):
    """Generator recovered column by column from the scalar equations."""
    return np.column_stack([scalar_rhs(p, e) for e in np.eye(7)])


def rk4(p, rho0, t_end, dt):
    """Classical RK4 on the scalar equations; times in ns."""
    f = lambda r: 1e-3 * scalar_rhs(p, r)
    n = max(1, int(np.ceil(t_end / dt)))
    h = t_end / n
    r = np.array(rho0, dtype=float)
    for _ in range(n):
        k1 = f(r)
        k2 = f(r + 0.5 * h * k1)
        k3 = f(r + 0.5 * h * k2)
        k4 = f(r + h * k3)
        r = r + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return r


def rk4_trajectory(p, rho0, times, max_step):
    out, r, t_prev = [], np.array(rho0, float), 0.0
    for t in times:
        if t > t_prev:
            r = rk4(p, r, t - t_prev, max_step)
        out.append(r.copy())
        t_prev = t
    return np.array(out)


def pl_of(p, r):
    return p.gamma_es * (r[..., 0] + r[..., 1]) + p.gamma_es_nv0 * r[..., 5]


def five_level_contrast(p, t_end, n=20000):
    """NV- only model (no NV0 levels), integrated by RK4 + Simpson's rule."""
    a = assemble_from_rhs(p)[:5, :5] * 1e-3
    f = lambda r: a @ r
    h = t_end / n
    alphas = []
    for start in (4, 3):
        r = np.zeros(5)
        r[start] = 1.0
        pl = [p.gamma_es * (r[0] + r[1])]
        for _ in range(n):
            k1 = f(r); k2 = f(r + 0.5 * h * k1); k3 = f(r + 0.5 * h * k2); k4 = f(r + h * k3)
            r = r + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            pl.append(p.gamma_es * (r[0] + r[1]))
        pl = np.array(pl)
        simpson = h / 3 * (pl[0] + pl[-1] + 4 * pl[1:-1:2].sum() + 2 * pl[2:-1:2].sum())
        alphas.append(simpson * 1e-3)
    a0, a1 = alphas
    return (a0 - a1) / a0, a0, a1


def charge_euler(r_ion, r_rec, rho_minus0, t_end, n=200000):
    """Two-level charge model by RK4 with many steps."""
    h = t_end / n
    f = lambda x: -r_ion * x + r_rec * (1 - x)
    x = rho_minus0
    for _ in range(n):
        k1 = f(x); k2 = f(x + 0.5 * h * k1); k3 = f(x + 0.5 * h * k2); k4 = f(x + h * k3)
        x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def five_level_alphas_eig(p, t_end):
    """NV- only model integrated in closed form through its eigenbasis."""
    a = assemble_from_rhs(p)[:5, :5] * 1e-3
    w, v = np.linalg.eig(a)
    vinv = np.linalg.inv(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(np.abs(w) > 1e-14, np.expm1(w * t_end) / w, t_end)
    integ = (v * g) @ vinv  # integral of exp(a t) over [0, t_end]
    c = np.zeros(5)
    c[0] = c[1] = p.gamma_es * 1e-3
    a0 = (c @ integ[:, 4]).real
    a1 = (c @ integ[:, 3]).real
    return a0, a1
