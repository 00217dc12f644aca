"""Compiled inner loops: pair potential, force assembly, Verlet, Metropolis.

Potential parameters travel as a flat float64 vector so that every kernel
shares one pair routine:

    [alpha, amplitude, shells, taper_on, r_on, r_c, mean_shift]
"""

import math

import numpy as np
from numba import njit

I_ALPHA, I_AMP, I_SHELLS, I_TAPER, I_RON, I_RC, I_SHIFT = range(7)


@njit(cache=True, error_model="numpy", inline="always")
def wrap_disp(d):
    return d - math.floor(d + 0.5)


@njit(cache=True, error_model="numpy", inline="always")
def radial(r, p):
    """f(r) and f'(r) for one image, taper included, mean shift excluded."""
    amp = p[I_AMP]
    if amp == 0.0:
        return 0.0, 0.0
    taper = p[I_TAPER] != 0.0
    r_c = p[I_RC]
    if taper and r >= r_c:
        return 0.0, 0.0
    e = 1.0 - p[I_ALPHA]
    if e == 0.0:
        g = amp
        dg = 0.0
    elif e == -0.5:
        g = amp / math.sqrt(r)
        dg = e * g / r
    else:
        g = amp * r**e
        dg = e * g / r
    if taper:
        r_on = p[I_RON]
        if r > r_on:
            w = r_c - r_on
            u = (r - r_on) / w
            s = 1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
            ds = -30.0 * u * u * (1.0 - u) * (1.0 - u) / w
            return g * s, dg * s + g * ds
    return g, dg


@njit(cache=True, error_model="numpy", inline="always")
def pair(dx, dy, dz, p):
    """phi and grad phi at a minimal-image displacement; r is |d|."""
    shells = int(p[I_SHELLS])
    phi = -p[I_SHIFT]
    gx = 0.0
    gy = 0.0
    gz = 0.0
    r0 = math.sqrt(dx * dx + dy * dy + dz * dz)
    if shells == 0:
        if r0 > 0.0:
            f, df = radial(r0, p)
            phi += f
            c = df / r0
            gx = c * dx
            gy = c * dy
            gz = c * dz
        else:
            f, df = radial(0.0, p)
            phi += f
        return phi, gx, gy, gz, r0
    for a in range(-shells, shells + 1):
        for b in range(-shells, shells + 1):
            for c3 in range(-shells, shells + 1):
                ex = dx + a
                ey = dy + b
                ez = dz + c3
                r = math.sqrt(ex * ex + ey * ey + ez * ez)
                if r > 0.0:
                    f, df = radial(r, p)
                    phi += f
                    c = df / r
                    gx += c * ex
                    gy += c * ey
                    gz += c * ez
                else:
                    f, df = radial(0.0, p)
                    phi += f
    return phi, gx, gy, gz, r0


@njit(cache=True, error_model="numpy")
def eval_pairs(disp, p, phi_out, grad_out):
    for k in range(disp.shape[0]):
        phi, gx, gy, gz, r = pair(disp[k, 0], disp[k, 1], disp[k, 2], p)
        phi_out[k] = phi
        grad_out[k, 0] = gx
        grad_out[k, 1] = gy
        grad_out[k, 2] = gz


@njit(cache=True, error_model="numpy")
def forces_allpairs(pos, p, out):
    """Mean-field forces into ``out``; returns (E_pot, min pair distance)."""
    n = pos.shape[0]
    out[:, :] = 0.0
    epot = 0.0
    rmin = np.inf
    for i in range(n):
        xi = pos[i, 0]
        yi = pos[i, 1]
        zi = pos[i, 2]
        for j in range(i + 1, n):
            dx = wrap_disp(xi - pos[j, 0])
            dy = wrap_disp(yi - pos[j, 1])
            dz = wrap_disp(zi - pos[j, 2])
            phi, gx, gy, gz, r = pair(dx, dy, dz, p)
            if r < rmin:
                rmin = r
            epot += phi
            out[i, 0] -= gx
            out[i, 1] -= gy
            out[i, 2] -= gz
            out[j, 0] += gx
            out[j, 1] += gy
            out[j, 2] += gz
    inv = 1.0 / n
    for i in range(n):
        out[i, 0] *= inv
        out[i, 1] *= inv
        out[i, 2] *= inv
    return epot * inv, rmin


@njit(cache=True, error_model="numpy")
def forces_cells(pos, p, m, out):
    """Linked-cell force assembly; valid only for a cutoff <= 1/m, m >= 3."""
    n = pos.shape[0]
    ncell = m * m * m
    head = np.full(ncell, -1, np.int64)
    nxt = np.full(n, -1, np.int64)
    cell_of = np.empty((n, 3), np.int64)
    for i in range(n):
        cx = int(pos[i, 0] * m) % m
        cy = int(pos[i, 1] * m) % m
        cz = int(pos[i, 2] * m) % m
        cell_of[i, 0] = cx
        cell_of[i, 1] = cy
        cell_of[i, 2] = cz
        c = (cx * m + cy) * m + cz
        nxt[i] = head[c]
        head[c] = i
    out[:, :] = 0.0
    epot = 0.0
    rmin = np.inf
    counted = 0
    for i in range(n):
        for ax in range(-1, 2):
            for ay in range(-1, 2):
                for az in range(-1, 2):
                    cx = (cell_of[i, 0] + ax) % m
                    cy = (cell_of[i, 1] + ay) % m
                    cz = (cell_of[i, 2] + az) % m
                    j = head[(cx * m + cy) * m + cz]
                    while j >= 0:
                        if j != i:
                            dx = wrap_disp(pos[i, 0] - pos[j, 0])
                            dy = wrap_disp(pos[i, 1] - pos[j, 1])
                            dz = wrap_disp(pos[i, 2] - pos[j, 2])
                            phi, gx, gy, gz, r = pair(dx, dy, dz, p)
                            if r < rmin:
                                rmin = r
                            epot += 0.5 * phi
                            counted += 1
                            out[i, 0] -= gx
                            out[i, 1] -= gy
                            out[i, 2] -= gz
                        j = nxt[j]
    # pairs beyond the neighbouring cells sit past the cutoff and only carry
    # the constant -mean_shift
    npairs = n * (n - 1) // 2
    epot -= p[I_SHIFT] * (npairs - 0.5 * counted)
    inv = 1.0 / n
    for i in range(n):
        out[i, 0] *= inv
        out[i, 1] *= inv
        out[i, 2] *= inv
    return epot * inv, rmin


@njit(cache=True, error_model="numpy", inline="always")
def _forces(pos, p, m, out):
    if m >= 3:
        return forces_cells(pos, p, m, out)
    return forces_allpairs(pos, p, out)


@njit(cache=True, error_model="numpy", inline="always")
def _wrap_pos(x):
    y = x - math.floor(x)
    if y >= 1.0:
        y = 0.0
    return y


@njit(cache=True, error_model="numpy")
def verlet(pos, vel, p, dt, nsteps, stride, floor, m, snaps_x, snaps_v, energy):
    """Velocity Verlet, in place.

    Snapshots are taken every ``stride`` steps (index 0 is the initial
    state); ``energy[k]`` holds H after step k.  Returns
    (status, steps_done, min distance) with status 1 when a pair came
    closer than ``floor``.
    """
    n = pos.shape[0]
    f = np.empty_like(pos)
    epot, rmin = _forces(pos, p, m, f)
    ekin = 0.0
    for i in range(n):
        ekin += 0.5 * (vel[i, 0] ** 2 + vel[i, 1] ** 2 + vel[i, 2] ** 2)
    energy[0] = ekin + epot
    snaps_x[0] = pos
    snaps_v[0] = vel
    gmin = rmin
    if rmin < floor:
        return 1, 0, gmin
    h = 0.5 * dt
    for k in range(1, nsteps + 1):
        for i in range(n):
            for a in range(3):
                vel[i, a] += h * f[i, a]
                pos[i, a] = _wrap_pos(pos[i, a] + dt * vel[i, a])
        epot, rmin = _forces(pos, p, m, f)
        ekin = 0.0
        for i in range(n):
            for a in range(3):
                vel[i, a] += h * f[i, a]
            ekin += 0.5 * (vel[i, 0] ** 2 + vel[i, 1] ** 2 + vel[i, 2] ** 2)
        energy[k] = ekin + epot
        if rmin < gmin:
            gmin = rmin
        if k % stride == 0:
            snaps_x[k // stride] = pos
            snaps_v[k // stride] = vel
        if rmin < floor:
            return 1, k, gmin
    return 0, nsteps, gmin


@njit(cache=True, error_model="numpy")
def particle_energy(pos, i, x, y, z, p, floor):
    """sum_j phi(x - X_j) over j != i, and whether any r < floor."""
    n = pos.shape[0]
    s = 0.0
    bad = False
    for j in range(n):
        if j == i:
            continue
        dx = wrap_disp(x - pos[j, 0])
        dy = wrap_disp(y - pos[j, 1])
        dz = wrap_disp(z - pos[j, 2])
        phi, gx, gy, gz, r = pair(dx, dy, dz, p)
        if r < floor:
            bad = True
        s += phi
    return s, bad


@njit(cache=True, error_model="numpy")
def potential_energy(pos, p):
    n = pos.shape[0]
    e = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dx = wrap_disp(pos[i, 0] - pos[j, 0])
            dy = wrap_disp(pos[i, 1] - pos[j, 1])
            dz = wrap_disp(pos[i, 2] - pos[j, 2])
            phi, gx, gy, gz, r = pair(dx, dy, dz, p)
            e += phi
    return e / n


@njit(cache=True, error_model="numpy")
def metropolis(pos, p, beta, step, normals, uniforms, floor, trace):
    """Systematic-scan single-particle Metropolis sweeps, in place.

    ``normals`` has shape (sweeps, n, 3), ``uniforms`` (sweeps, n).
    ``trace[s]`` receives E_pot after sweep s.  Returns accepted count.
    """
    n = pos.shape[0]
    inv = 1.0 / n
    epot = potential_energy(pos, p)
    accepted = 0
    for s in range(normals.shape[0]):
        for i in range(n):
            x = _wrap_pos(pos[i, 0] + step * normals[s, i, 0])
            y = _wrap_pos(pos[i, 1] + step * normals[s, i, 1])
            z = _wrap_pos(pos[i, 2] + step * normals[s, i, 2])
            e_new, bad = particle_energy(pos, i, x, y, z, p, floor)
            if bad:
                continue
            e_old, _ = particle_energy(pos, i, pos[i, 0], pos[i, 1], pos[i, 2], p, -1.0)
            de = (e_new - e_old) * inv
            if de <= 0.0 or uniforms[s, i] < math.exp(-beta * de):
                pos[i, 0] = x
                pos[i, 1] = y
                pos[i, 2] = z
                epot += de
                accepted += 1
        trace[s] = epot
    return accepted
