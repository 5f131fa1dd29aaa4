"""Compiled right-hand sides shared by the dynamics, orbit and trace modules.

Field kinds are dispatched on the integer codes of ``fields.KIND_CODES`` and
the flat parameter vector ``fp = (v0, v1, v2, g, a)``.
"""
import numba as nb
import numpy as np


@nb.njit(cache=True)
def em_point(code, fp, x, gphi, hphi, A, gA):
    """Fill gradient/Hessian of phi and A, dA_j/dx_k; return phi."""
    for i in range(3):
        gphi[i] = 0.0
        A[i] = 0.0
        for j in range(3):
            hphi[i, j] = 0.0
            gA[i, j] = 0.0
    phi = 0.0
    if code == 1:
        b0, b1, b2 = fp[0], fp[1], fp[2]
        gA[0, 1] = -0.5 * b2
        gA[0, 2] = 0.5 * b1
        gA[1, 0] = 0.5 * b2
        gA[1, 2] = -0.5 * b0
        gA[2, 0] = -0.5 * b1
        gA[2, 1] = 0.5 * b0
        for i in range(3):
            for j in range(3):
                A[i] += gA[i, j] * x[j]
    elif code == 2:
        for i in range(3):
            phi -= fp[i] * x[i]
            gphi[i] = -fp[i]
    elif code == 3:
        for i in range(3):
            phi += 0.5 * fp[i] * x[i] * x[i]
            gphi[i] = fp[i] * x[i]
            hphi[i, i] = fp[i]
    elif code == 4:
        g, a = fp[3], fp[4]
        X, Y = x[0], x[1]
        phi = g * X * X * Y * Y + a * (X ** 4 + Y ** 4)
        gphi[0] = 2 * g * X * Y * Y + 4 * a * X ** 3
        gphi[1] = 2 * g * X * X * Y + 4 * a * Y ** 3
        hphi[0, 0] = 2 * g * Y * Y + 12 * a * X * X
        hphi[0, 1] = 4 * g * X * Y
        hphi[1, 0] = 4 * g * X * Y
        hphi[1, 1] = 2 * g * X * X + 12 * a * Y * Y
    return phi


@nb.njit(cache=True)
def flow_rhs(z, sgn, code, fp, m, e, c, njac, out):
    """Joint right-hand side for (x, p, J, R).

    Layout: z[0:3] = x, z[3:6] = p, then ``njac`` flags whether a 6x6
    Jacobian follows (row-major), and the last entry is the principal
    function R with dR/dt = p.xdot - H.
    """
    gphi = np.empty(3)
    hphi = np.empty((3, 3))
    A = np.empty(3)
    gA = np.empty((3, 3))
    x = z[0:3]
    phi = em_point(code, fp, x, gphi, hphi, A, gA)
    pi = np.empty(3)
    for i in range(3):
        pi[i] = z[3 + i] - (e / c) * A[i]
    pi2 = pi[0] ** 2 + pi[1] ** 2 + pi[2] ** 2
    eps = np.sqrt(c * c * pi2 + m * m * c ** 4)
    v = np.empty(3)
    for i in range(3):
        v[i] = sgn * c * c * pi[i] / eps
        out[i] = v[i]
    for i in range(3):
        s = 0.0
        for j in range(3):
            s += gA[j, i] * v[j]
        out[3 + i] = -e * gphi[i] + (e / c) * s
    pv = z[3] * v[0] + z[4] * v[1] + z[5] * v[2]
    out[len(z) - 1] = pv - (e * phi + sgn * eps)
    if njac:
        # K = d xdot / d p ; G = d pi / d x
        K = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                K[i, j] = sgn * (c * c / eps) * ((1.0 if i == j else 0.0) - c * c * pi[i] * pi[j] / (eps * eps))
        G = -(e / c) * gA
        KG = K @ G
        L = np.zeros((6, 6))
        for i in range(3):
            for j in range(3):
                L[i, j] = KG[i, j]
                L[i, 3 + j] = K[i, j]
        gAt = gA.T
        Mx = (e / c) * (gAt @ KG)
        Mp = (e / c) * (gAt @ K)
        for i in range(3):
            for j in range(3):
                L[3 + i, j] = -e * hphi[i, j] + Mx[i, j]
                L[3 + i, 3 + j] = Mp[i, j]
        for r in range(6):
            for col in range(6):
                s = 0.0
                for k in range(6):
                    s += L[r, k] * z[6 + 6 * k + col]
                out[6 + 6 * r + col] = s


# ---------------------------------------------------------------------------
# planar batch kernels (z = 0 plane, B along z, E in plane)
#
# state layout (22): x, y, px, py, J (4x4 row-major, order x,y,px,py), R, eta
# eta integrates -1/2 w_z with w the spin precession vector of the branch,
# which is the full spin phase in planar mode because M2 is diagonal.


@nb.njit(cache=True)
def em_planar(code, fp, X, Y):
    """Scalar planar field data at (X, Y, 0).

    Returns (phi, dphi/dx, dphi/dy, phi_xx, phi_xy, phi_yy, A_x, A_y,
    dA_x/dx, dA_x/dy, dA_y/dx, dA_y/dy). Allocation-free, for the hot loops.
    """
    phi = gx = gy = hxx = hxy = hyy = 0.0
    ax = ay = a00 = a01 = a10 = a11 = 0.0
    if code == 1:
        b2 = fp[2]
        a01 = -0.5 * b2
        a10 = 0.5 * b2
        ax = a01 * Y
        ay = a10 * X
    elif code == 2:
        phi = -fp[0] * X - fp[1] * Y
        gx = -fp[0]
        gy = -fp[1]
    elif code == 3:
        phi = 0.5 * (fp[0] * X * X + fp[1] * Y * Y)
        gx = fp[0] * X
        gy = fp[1] * Y
        hxx = fp[0]
        hyy = fp[1]
    elif code == 4:
        g, a = fp[3], fp[4]
        phi = g * X * X * Y * Y + a * (X ** 4 + Y ** 4)
        gx = 2 * g * X * Y * Y + 4 * a * X ** 3
        gy = 2 * g * X * X * Y + 4 * a * Y ** 3
        hxx = 2 * g * Y * Y + 12 * a * X * X
        hxy = 4 * g * X * Y
        hyy = 2 * g * X * X + 12 * a * Y * Y
    return phi, gx, gy, hxx, hxy, hyy, ax, ay, a00, a01, a10, a11


@nb.njit(cache=True)
def planar_rhs(z, sgn, code, fp, m, e, c, full, out):
    phi, gx, gy, hxx, hxy, hyy, ax, ay, a00, a01, a10, a11 = em_planar(code, fp, z[0], z[1])
    px = z[2] - (e / c) * ax
    py = z[3] - (e / c) * ay
    eps = np.sqrt(c * c * (px * px + py * py) + m * m * c ** 4)
    vx = sgn * c * c * px / eps
    vy = sgn * c * c * py / eps
    out[0] = vx
    out[1] = vy
    out[2] = -e * gx + (e / c) * (a00 * vx + a10 * vy)
    out[3] = -e * gy + (e / c) * (a01 * vx + a11 * vy)
    if not full:
        return
    # linearization: K = d xdot / d pi, G = d pi / d x
    f = sgn * c * c / eps
    q = c * c / (eps * eps)
    k00 = f * (1 - q * px * px)
    k01 = -f * q * px * py
    k11 = f * (1 - q * py * py)
    s = -(e / c)
    g00 = s * a00
    g01 = s * a01
    g10 = s * a10
    g11 = s * a11
    kg00 = k00 * g00 + k01 * g10
    kg01 = k00 * g01 + k01 * g11
    kg10 = k01 * g00 + k11 * g10
    kg11 = k01 * g01 + k11 * g11
    r = e / c
    # Mx = r gA^T K G, Mp = r gA^T K (2x2 blocks)
    l20 = -e * hxx + r * (a00 * kg00 + a10 * kg10)
    l21 = -e * hxy + r * (a00 * kg01 + a10 * kg11)
    l22 = r * (a00 * k00 + a10 * k01)
    l23 = r * (a00 * k01 + a10 * k11)
    l30 = -e * hxy + r * (a01 * kg00 + a11 * kg10)
    l31 = -e * hyy + r * (a01 * kg01 + a11 * kg11)
    l32 = r * (a01 * k00 + a11 * k01)
    l33 = r * (a01 * k01 + a11 * k11)
    for cc in range(4):
        j0 = z[4 + cc]
        j1 = z[8 + cc]
        j2 = z[12 + cc]
        j3 = z[16 + cc]
        out[4 + cc] = kg00 * j0 + kg01 * j1 + k00 * j2 + k01 * j3
        out[8 + cc] = kg10 * j0 + kg11 * j1 + k01 * j2 + k11 * j3
        out[12 + cc] = l20 * j0 + l21 * j1 + l22 * j2 + l23 * j3
        out[16 + cc] = l30 * j0 + l31 * j1 + l32 * j2 + l33 * j3
    out[20] = z[2] * vx + z[3] * vy - (e * phi + sgn * eps)
    # spin precession vector w (z-component) of the branch
    Bz = a10 - a01
    cross = -px * gy + py * gx
    wz = -sgn * (e * c / eps) * Bz + (e * c * c / (eps * (eps + m * c * c))) * cross
    out[21] = -0.5 * wz


@nb.njit(cache=True)
def planar_rk4(z0, T, nsteps, sgn, code, fp, m, e, c):
    """Fixed-step RK4 over [0, T]; returns final state and the number of
    sign changes of det(dx/dp0) at the step nodes."""
    z = z0.copy()
    k1 = np.empty(22)
    k2 = np.empty(22)
    k3 = np.empty(22)
    k4 = np.empty(22)
    tmp = np.empty(22)
    h = T / nsteps
    detprev = 0.0
    nu = 0
    for s in range(nsteps):
        planar_rhs(z, sgn, code, fp, m, e, c, True, k1)
        for j in range(22):
            tmp[j] = z[j] + 0.5 * h * k1[j]
        planar_rhs(tmp, sgn, code, fp, m, e, c, True, k2)
        for j in range(22):
            tmp[j] = z[j] + 0.5 * h * k2[j]
        planar_rhs(tmp, sgn, code, fp, m, e, c, True, k3)
        for j in range(22):
            tmp[j] = z[j] + h * k3[j]
        planar_rhs(tmp, sgn, code, fp, m, e, c, True, k4)
        for j in range(22):
            z[j] += h / 6.0 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j])
        det = z[6] * z[11] - z[7] * z[10]
        if s > 0 and det * detprev < 0:
            nu += 1
        detprev = det
    return z, nu


@nb.njit(cache=True)
def planar_initial(x, y, px, py):
    z = np.zeros(22)
    z[0] = x
    z[1] = y
    z[2] = px
    z[3] = py
    for j in range(4):
        z[4 + 5 * j] = 1.0
    return z


@nb.njit(cache=True)
def planar_newton_loops(X, P, T, steps_per_time, maxit, tol, sgn, code, fp, m, e, c):
    """Damped Newton on p0 for closed loops x_T(x, p0) = x, batch version.

    Returns corrected momenta, final states, Morse counts and a convergence
    mask. The Jacobian is the dx/dp0 block of the linearized flow.
    """
    n = P.shape[0]
    Z = np.empty((n, 22))
    NU = np.zeros(n, np.int64)
    ok = np.zeros(n, np.bool_)
    nsteps = max(8, int(np.ceil(T * steps_per_time)))
    for i in range(n):
        px, py = P[i, 0], P[i, 1]
        z = planar_initial(X[i, 0], X[i, 1], px, py)
        nu = 0
        for it in range(maxit + 1):
            z, nu = planar_rk4(planar_initial(X[i, 0], X[i, 1], px, py), T, nsteps, sgn, code, fp, m, e, c)
            rx = z[0] - X[i, 0]
            ry = z[1] - X[i, 1]
            if np.sqrt(rx * rx + ry * ry) < tol:
                ok[i] = True
                break
            if it == maxit:
                break
            b11 = z[6]
            b12 = z[7]
            b21 = z[10]
            b22 = z[11]
            det = b11 * b22 - b12 * b21
            if det == 0.0:
                break
            dpx = (b22 * rx - b12 * ry) / det
            dpy = (-b21 * rx + b11 * ry) / det
            dn = np.sqrt(dpx * dpx + dpy * dpy)
            if dn > 0.2:
                dpx *= 0.2 / dn
                dpy *= 0.2 / dn
            px -= dpx
            py -= dpy
            if not (np.isfinite(px) and np.isfinite(py)):
                break
        P[i, 0] = px
        P[i, 1] = py
        Z[i, :] = z
        NU[i] = nu
    return P, Z, NU, ok


@nb.njit(cache=True)
def planar_positions(x0, y0, P, tgrid, substeps, sgn, code, fp, m, e, c):
    """Positions x_t for a batch of initial momenta at the times ``tgrid``.

    Plain RK4 on (x, p) only, ``substeps`` steps between grid times; used to
    seed loop searches.
    """
    n = P.shape[0]
    nt = tgrid.shape[0]
    out = np.empty((n, nt, 2))
    k1 = np.empty(22)
    k2 = np.empty(22)
    k3 = np.empty(22)
    k4 = np.empty(22)
    tmp = np.empty(22)
    for i in range(n):
        z = planar_initial(x0, y0, P[i, 0], P[i, 1])
        t = 0.0
        for k in range(nt):
            h = (tgrid[k] - t) / substeps
            for s in range(substeps):
                planar_rhs(z, sgn, code, fp, m, e, c, False, k1)
                for j in range(4):
                    tmp[j] = z[j] + 0.5 * h * k1[j]
                planar_rhs(tmp, sgn, code, fp, m, e, c, False, k2)
                for j in range(4):
                    tmp[j] = z[j] + 0.5 * h * k2[j]
                planar_rhs(tmp, sgn, code, fp, m, e, c, False, k3)
                for j in range(4):
                    tmp[j] = z[j] + h * k3[j]
                planar_rhs(tmp, sgn, code, fp, m, e, c, False, k4)
                for j in range(4):
                    z[j] += h / 6.0 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j])
            t = tgrid[k]
            out[i, k, 0] = z[0]
            out[i, k, 1] = z[1]
    return out


@nb.njit(cache=True)
def spatial_rk4(x0, p0, T, nsteps, sgn, code, fp, m, e, c):
    """Fixed-step RK4 of (x, p, J, R) over [0, T]; returns the 43-vector.

    Used as the inner loop of boundary-value Newton iterations, where the
    adaptive integrator's per-step overhead would dominate.
    """
    z = np.zeros(43)
    for i in range(3):
        z[i] = x0[i]
        z[3 + i] = p0[i]
    for j in range(6):
        z[6 + 7 * j] = 1.0
    k1 = np.empty(43)
    k2 = np.empty(43)
    k3 = np.empty(43)
    k4 = np.empty(43)
    tmp = np.empty(43)
    h = T / nsteps
    for s in range(nsteps):
        flow_rhs(z, sgn, code, fp, m, e, c, True, k1)
        for j in range(43):
            tmp[j] = z[j] + 0.5 * h * k1[j]
        flow_rhs(tmp, sgn, code, fp, m, e, c, True, k2)
        for j in range(43):
            tmp[j] = z[j] + 0.5 * h * k2[j]
        flow_rhs(tmp, sgn, code, fp, m, e, c, True, k3)
        for j in range(43):
            tmp[j] = z[j] + h * k3[j]
        flow_rhs(tmp, sgn, code, fp, m, e, c, True, k4)
        for j in range(43):
            z[j] += h / 6.0 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j])
    return z


@nb.njit(cache=True)
def planar_vector_field(Z, sgn, code, fp, m, e, c):
    """(xdot, pdot) at each row (x, y, px, py) of ``Z``."""
    n = Z.shape[0]
    out = np.empty((n, 4))
    buf = np.empty(22)
    for i in range(n):
        planar_rhs(Z[i], sgn, code, fp, m, e, c, False, buf)
        for j in range(4):
            out[i, j] = buf[j]
    return out
