"""Independent brute-force reference computations used by the tests.

Nothing here imports the assembly or solver code under test: element
matrices come from Gauss quadrature of the bilinear shape functions and all
solves are dense.
"""
import numpy as np

GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def q1_shape_grads(xi, eta, hx, hy):
    """Gradients of the 4 bilinear shape functions (SW, SE, NW, NE) at a reference point."""
    s = [(-1, -1), (1, -1), (-1, 1), (1, 1)]
    gx = np.array([sx * (1 + sy * eta) / 4 for sx, sy in s]) * 2 / hx
    gy = np.array([sy * (1 + sx * xi) / 4 for sx, sy in s]) * 2 / hy
    return gx, gy


def q1_shape(xi, eta):
    s = [(-1, -1), (1, -1), (-1, 1), (1, 1)]
    return np.array([(1 + sx * xi) * (1 + sy * eta) / 4 for sx, sy in s])


def gauss_element_stiffness(hx, hy):
    K = np.zeros((4, 4))
    for xi in GAUSS:
        for eta in GAUSS:
            gx, gy = q1_shape_grads(xi, eta, hx, hy)
            K += (np.outer(gx, gx) + np.outer(gy, gy)) * hx * hy / 4
    return K


def gauss_element_mass(hx, hy):
    M = np.zeros((4, 4))
    for xi in GAUSS:
        for eta in GAUSS:
            N = q1_shape(xi, eta)
            M += np.outer(N, N) * hx * hy / 4
    return M


def node_index(nx, i, j):
    return j * (nx + 1) + i


def cell_corners(nx, i, j):
    sw = node_index(nx, i, j)
    return [sw, sw + 1, sw + nx + 1, sw + nx + 2]


def dense_stiffness(nx, ny, coef, lx=1.0, ly=1.0):
    hx, hy = lx / nx, ly / ny
    K = gauss_element_stiffness(hx, hy)
    A = np.zeros(((nx + 1) * (ny + 1),) * 2)
    c = np.asarray(coef, float).reshape(ny, nx)
    for j in range(ny):
        for i in range(nx):
            idx = cell_corners(nx, i, j)
            A[np.ix_(idx, idx)] += c[j, i] * K
    return A


def dense_dirichlet_solve(A, b, nodes, values):
    """Replace Dirichlet rows by identity rows and solve the full system densely."""
    A = A.copy()
    b = np.asarray(b, float).copy()
    A[nodes, :] = 0.0
    A[nodes, nodes] = 1.0
    b[nodes] = values
    return np.linalg.solve(A, b)


def left_right_nodes(nx, ny, p_left=1.0, p_right=0.0):
    left = [node_index(nx, 0, j) for j in range(ny + 1)]
    right = [node_index(nx, nx, j) for j in range(ny + 1)]
    return np.array(left + right), np.array([p_left] * (ny + 1) + [p_right] * (ny + 1))


def harmonic_extension(A, boundary, values):
    """Dense harmonic extension: A_II u_I = -A_IB g."""
    n = A.shape[0]
    inner = np.setdiff1d(np.arange(n), boundary)
    u = np.zeros(n)
    u[boundary] = values
    u[inner] = np.linalg.solve(A[np.ix_(inner, inner)], -A[np.ix_(inner, boundary)] @ values)
    return u


def dual_norm_by_eigen(K, r):
    """sup_v r.v / ||v||_K through the eigen-expansion of K."""
    w, V = np.linalg.eigh(K)
    c = V.T @ r
    return float(np.sqrt(np.sum(c * c / w)))


def coarse_q1_solution(Nx, Ny, nx, ny, p_left=1.0, p_right=0.0):
    """Coarse bilinear FEM for unit coefficient interpolated to the fine nodes."""
    A = dense_stiffness(Nx, Ny, np.ones(Nx * Ny))
    nodes, vals = left_right_nodes(Nx, Ny, p_left, p_right)
    P = dense_dirichlet_solve(A, np.zeros(A.shape[0]), nodes, vals).reshape(Ny + 1, Nx + 1)
    x = np.linspace(0, Nx, nx + 1)
    y = np.linspace(0, Ny, ny + 1)
    out = np.zeros((ny + 1, nx + 1))
    for jj, yy in enumerate(y):
        J = min(int(yy), Ny - 1)
        ty = yy - J
        for ii, xx in enumerate(x):
            I = min(int(xx), Nx - 1)
            tx = xx - I
            out[jj, ii] = (
                P[J, I] * (1 - tx) * (1 - ty) + P[J, I + 1] * tx * (1 - ty) + P[J + 1, I] * (1 - tx) * ty + P[J + 1, I + 1] * tx * ty
            )
    return out.ravel()


def upwind_1d(S, F, meas, dt, f, inflow_S=1.0):
    """Donor-cell update on a chain of volumes with uniform positive flux F through every face."""
    S = np.asarray(S, float)
    fS = f(S)
    flux_in = np.concatenate([[F * f(np.array([inflow_S]))[0]], F * fS[:-1]])
    flux_out = F * fS
    return S + dt * (flux_in - flux_out) / meas


def dense_mass(nx, ny, weight, lx=1.0, ly=1.0):
    hx, hy = lx / nx, ly / ny
    Me = gauss_element_mass(hx, hy)
    M = np.zeros(((nx + 1) * (ny + 1),) * 2)
    w = np.asarray(weight, float).reshape(ny, nx)
    for j in range(ny):
        for i in range(nx):
            idx = cell_corners(nx, i, j)
            M[np.ix_(idx, idx)] += w[j, i] * Me
    return M
