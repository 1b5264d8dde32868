# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled chain loop: per-set proposals, Metropolis patch, OU thermostat, estimators.

Mirrors the pure-Python path in ``integrate`` and ``thermostat`` operation for
operation. All random numbers arrive pre-drawn, so both paths consume the same
streams.
"""

from libc.math cimport exp, sqrt, rint, cos, sin, fabs, fmod, INFINITY, isfinite, M_PI

import numpy as np

cdef enum:
    POT_ZERO = 0
    POT_LJ = 1
    POT_COSINE = 2

cdef enum:
    BAND_FULL = 0
    BAND_FAST = 1
    BAND_SLOW = 2

cdef enum:
    PROP_VERLET = 0
    PROP_RESPA = 1
    PROP_RATTLE = 2


cdef struct Pot:
    int kind
    double box
    double rc2
    double shift
    double rs2
    double amp
    double k


cdef inline double _mi(double dx, double box) nogil:
    return dx - box * rint(dx / box)


cdef double set_energy_forces(double[:, ::1] q, const Py_ssize_t[::1] idx, Py_ssize_t lo, Py_ssize_t hi,
                              char[::1] in_set, const Py_ssize_t[::1] partner, Pot* pot, int band,
                              double[:, ::1] f, bint want_f, int* overlap) noexcept nogil:
    """Full-band energy of terms touching the set; forces of ``band`` on its members."""
    cdef Py_ssize_t n = q.shape[0], d = q.shape[1]
    cdef Py_ssize_t a, i, k, c
    cdef double e = 0.0, r2, inv2, inv6, w, dx[3], fi[3], qi
    cdef double lo2, hi2
    if pot.kind == POT_ZERO:
        if want_f:
            for a in range(hi - lo):
                for c in range(d):
                    f[a, c] = 0.0
        return 0.0
    if pot.kind == POT_COSINE:
        for a in range(hi - lo):
            i = idx[lo + a]
            for c in range(d):
                qi = pot.k * q[i, c]
                e += pot.amp * (1.0 - cos(qi))
                if want_f:
                    f[a, c] = -pot.amp * pot.k * sin(qi)
        return e
    lo2 = pot.rs2 if band == BAND_SLOW else 0.0
    hi2 = pot.rs2 if band == BAND_FAST else pot.rc2
    for a in range(hi - lo):
        i = idx[lo + a]
        for c in range(d):
            fi[c] = 0.0
        for k in range(n):
            if k == i or partner[i] == k:
                continue
            r2 = 0.0
            for c in range(d):
                dx[c] = _mi(q[i, c] - q[k, c], pot.box)
                r2 += dx[c] * dx[c]
            if r2 >= pot.rc2:
                continue
            if r2 == 0.0:
                overlap[0] = 1
                e = INFINITY
                continue
            inv2 = 1.0 / r2
            inv6 = inv2 * inv2 * inv2
            if not in_set[k] or i < k:
                e += 4.0 * (inv6 * inv6 - inv6) - pot.shift
            if want_f and r2 < hi2 and r2 >= lo2:
                w = 24.0 * inv2 * (2.0 * inv6 * inv6 - inv6)
                for c in range(d):
                    fi[c] += w * dx[c]
        if want_f:
            for c in range(d):
                f[a, c] = fi[c]
    return e


cdef inline double _wrap(double x, double box) nogil:
    # same operation order as numpy.mod followed by the upper-edge fix
    cdef double y = fmod(x, box)
    if y < 0.0:
        y += box
    if y >= box:
        y -= box
    return y


def run_chain(double[:, ::1] q, double[:, ::1] p, const double[::1] masses,
              const Py_ssize_t[::1] set_ptr, const Py_ssize_t[::1] set_idx,
              const Py_ssize_t[::1] partner, dict pot_args, dict prop_args,
              double beta, const double[::1] decay, const double[::1] noise_std,
              bint constrained_ou, const double[:, ::1] uniforms, const double[:, ::1] normals,
              bint metropolize,
              double[::1] set_prob_sum, long[::1] set_accept, long[::1] counters, double[::1] scalars,
              double[:, ::1] ring, const Py_ssize_t[::1] lags, double[::1] acc, long[::1] ac_state,
              Py_ssize_t offset, Py_ssize_t skip, double[:, ::1] q_out, double[:, ::1] p_out, Py_ssize_t thin,
              double[::1] obs, long[::1] rec_accepted, double[::1] rec_dh, long[::1] rec_fail,
              double blowup_threshold):
    """Advance the chain ``uniforms.shape[0]`` steps in place.

    ``counters``: [failures, steps_done, blowup_step (-1 if none), overlaps, thin_written].
    ``scalars``: [U, max|H|, max|g|, max|dg M^-1 p|, max H].
    ``ac_state``: [head, filled, count] of the momentum ring buffer.
    ``obs``: running sums [p^2, p^4, n_coords, cos(2 pi q / L), cos^2, n_q].
    Returns the number of steps taken.
    """
    cdef Py_ssize_t n = q.shape[0], d = q.shape[1], nu = n * d
    cdef Py_ssize_t m = set_ptr.shape[0] - 1
    cdef Py_ssize_t n_steps = uniforms.shape[0]
    cdef Py_ssize_t L = ring.shape[0], n_lags = lags.shape[0]
    cdef Py_ssize_t step, j, lo, hi, a, i, c, s, it, row, li, b, ia, ib
    cdef Pot pot
    cdef int band_all = BAND_FULL, overlap = 0, failed
    cdef int prop = prop_args["kind"]
    cdef double h = prop_args["h"]
    cdef double hf = prop_args.get("h_fast", h)
    cdef Py_ssize_t nf = prop_args.get("n_fast", 1)
    cdef double tol = prop_args.get("tol", 1e-12)
    cdef Py_ssize_t max_iter = prop_args.get("max_iter", 50)
    cdef double l0sq = prop_args.get("rest_length", 1.0) ** 2
    cdef double e_old, e_new, k_old, k_new, dh, prob, zeta, U, H, kin, tmp
    cdef double msum, lam, mu, g, dg, ma, mb, r0[3], rf[3], r1[3], v[3], nrm, proj_p, proj_x
    cdef double ghat[6], xi_b[6], pb[6]
    cdef bint accept
    cdef long n_acc_step, n_fail_step
    cdef double dh_sum_step
    cdef Py_ssize_t n_dh_step
    cdef double[:, ::1] f = np.zeros((max(n, 1), d))
    cdef double[:, ::1] q_save = np.zeros((max(n, 1), d))
    cdef double[:, ::1] p_save = np.zeros((max(n, 1), d))
    cdef char[::1] in_set = np.zeros(n, dtype=np.int8)
    cdef Py_ssize_t head = ac_state[0], filled = ac_state[1]
    cdef long ac_count = ac_state[2]
    cdef Py_ssize_t n_written = counters[4]
    cdef bint do_rec = rec_accepted.shape[0] > 0
    cdef Py_ssize_t done = 0
    cdef double box

    pot.kind = pot_args["kind"]
    pot.box = pot_args["box"]
    pot.rc2 = pot_args.get("r_cut", 0.0) ** 2
    pot.shift = pot_args.get("shift", 0.0)
    pot.rs2 = pot_args.get("r_split", 0.0) ** 2
    pot.amp = pot_args.get("amplitude", 1.0)
    pot.k = 2.0 * M_PI / pot.box
    box = pot.box
    U = scalars[0]

    with nogil:
        for step in range(n_steps):
            n_acc_step = 0
            n_fail_step = 0
            dh_sum_step = 0.0
            n_dh_step = 0
            for j in range(m):
                lo = set_ptr[j]
                hi = set_ptr[j + 1]
                failed = 0
                overlap = 0
                for a in range(hi - lo):
                    i = set_idx[lo + a]
                    in_set[i] = 1
                    for c in range(d):
                        q_save[a, c] = q[i, c]
                        p_save[a, c] = p[i, c]
                k_old = 0.0
                for a in range(hi - lo):
                    i = set_idx[lo + a]
                    for c in range(d):
                        k_old += p[i, c] * p[i, c] / masses[i]
                k_old *= 0.5

                if prop == PROP_VERLET:
                    e_old = set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_FULL, f, True, &overlap)
                    for a in range(hi - lo):
                        i = set_idx[lo + a]
                        for c in range(d):
                            p[i, c] = p[i, c] + 0.5 * h * f[a, c]
                            q[i, c] = _wrap(q[i, c] + h * p[i, c] / masses[i], box)
                    e_new = set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_FULL, f, True, &overlap)
                    for a in range(hi - lo):
                        i = set_idx[lo + a]
                        for c in range(d):
                            p[i, c] = p[i, c] + 0.5 * h * f[a, c]

                elif prop == PROP_RESPA:
                    e_old = set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_SLOW, f, True, &overlap)
                    for a in range(hi - lo):
                        i = set_idx[lo + a]
                        for c in range(d):
                            p[i, c] = p[i, c] + 0.5 * h * f[a, c]
                    for it in range(nf):
                        set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_FAST, f, True, &overlap)
                        for a in range(hi - lo):
                            i = set_idx[lo + a]
                            for c in range(d):
                                p[i, c] = p[i, c] + 0.5 * hf * f[a, c]
                                q[i, c] = _wrap(q[i, c] + hf * p[i, c] / masses[i], box)
                        set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_FAST, f, True, &overlap)
                        for a in range(hi - lo):
                            i = set_idx[lo + a]
                            for c in range(d):
                                p[i, c] = p[i, c] + 0.5 * hf * f[a, c]
                    e_new = set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_SLOW, f, True, &overlap)
                    for a in range(hi - lo):
                        i = set_idx[lo + a]
                        for c in range(d):
                            p[i, c] = p[i, c] + 0.5 * h * f[a, c]

                else:
                    # RATTLE on a two-particle set
                    ia = set_idx[lo]
                    ib = set_idx[lo + 1]
                    ma = masses[ia]
                    mb = masses[ib]
                    msum = 1.0 / ma + 1.0 / mb
                    e_old = set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_FULL, f, True, &overlap)
                    for c in range(d):
                        r0[c] = _mi(q[ia, c] - q[ib, c], box)
                        p[ia, c] = p[ia, c] + 0.5 * h * f[0, c]
                        p[ib, c] = p[ib, c] + 0.5 * h * f[1, c]
                        rf[c] = r0[c] + h * (p[ia, c] / ma - p[ib, c] / mb)
                    lam = 0.0
                    failed = 1
                    for it in range(max_iter):
                        g = 0.0
                        dg = 0.0
                        for c in range(d):
                            r1[c] = rf[c] - h * h * lam * msum * r0[c]
                            g += r1[c] * r1[c]
                            dg += r1[c] * r0[c]
                        g -= l0sq
                        if fabs(g) <= tol:
                            failed = 0
                            break
                        dg *= -2.0 * h * h * msum
                        if dg == 0.0 or not isfinite(dg):
                            break
                        lam -= g / dg
                    if failed:
                        g = 0.0
                        for c in range(d):
                            r1[c] = rf[c] - h * h * lam * msum * r0[c]
                            g += r1[c] * r1[c]
                        if fabs(g - l0sq) <= tol:
                            failed = 0
                    if not failed:
                        for c in range(d):
                            p[ia, c] = p[ia, c] - 0.5 * h * lam * 2.0 * r0[c]
                            p[ib, c] = p[ib, c] + 0.5 * h * lam * 2.0 * r0[c]
                            q[ia, c] = _wrap(q[ia, c] + h * p[ia, c] / ma, box)
                            q[ib, c] = _wrap(q[ib, c] + h * p[ib, c] / mb, box)
                        for c in range(d):
                            r1[c] = rf[c] - h * h * lam * msum * r0[c]
                        e_new = set_energy_forces(q, set_idx, lo, hi, in_set, partner, &pot, BAND_FULL, f, True, &overlap)
                        tmp = 0.0
                        nrm = 0.0
                        for c in range(d):
                            p[ia, c] = p[ia, c] + 0.5 * h * f[0, c]
                            p[ib, c] = p[ib, c] + 0.5 * h * f[1, c]
                            v[c] = p[ia, c] / ma - p[ib, c] / mb
                            tmp += r1[c] * v[c]
                            nrm += r1[c] * r1[c]
                        mu = tmp / (h * msum * nrm)
                        for c in range(d):
                            p[ia, c] = p[ia, c] - 0.5 * h * mu * 2.0 * r1[c]
                            p[ib, c] = p[ib, c] + 0.5 * h * mu * 2.0 * r1[c]
                    else:
                        e_new = INFINITY

                k_new = 0.0
                for a in range(hi - lo):
                    i = set_idx[lo + a]
                    for c in range(d):
                        k_new += p[i, c] * p[i, c] / masses[i]
                k_new *= 0.5
                dh = (k_new - k_old) + (e_new - e_old)
                if overlap or failed or not isfinite(dh):
                    dh = INFINITY
                if dh <= 0.0:
                    prob = 1.0
                elif isfinite(dh):
                    prob = exp(-beta * dh)
                else:
                    prob = 0.0
                if metropolize:
                    zeta = uniforms[step, j]
                    accept = zeta < prob and not failed and not overlap
                else:
                    accept = True
                set_prob_sum[j] += prob
                if failed:
                    counters[0] += 1
                    n_fail_step += 1
                if overlap:
                    counters[3] += 1
                if accept:
                    set_accept[j] += 1
                    n_acc_step += 1
                    U += e_new - e_old
                else:
                    for a in range(hi - lo):
                        i = set_idx[lo + a]
                        for c in range(d):
                            q[i, c] = q_save[a, c]
                            p[i, c] = -p_save[a, c]
                if isfinite(dh):
                    dh_sum_step += dh
                    n_dh_step += 1
                for a in range(hi - lo):
                    in_set[set_idx[lo + a]] = 0

            # thermostat
            if constrained_ou:
                for i in range(n):
                    b = partner[i]
                    if b < 0:
                        for c in range(d):
                            p[i, c] = decay[i] * p[i, c] + noise_std[i] * normals[step, i * d + c]
                        continue
                    if b < i:
                        continue
                    nrm = 0.0
                    for c in range(d):
                        tmp = 2.0 * _mi(q[i, c] - q[b, c], box)
                        ghat[c] = tmp
                        ghat[d + c] = -tmp
                        nrm += 2.0 * tmp * tmp
                    nrm = sqrt(nrm)
                    proj_p = 0.0
                    proj_x = 0.0
                    for c in range(d):
                        ghat[c] /= nrm
                        ghat[d + c] /= nrm
                        pb[c] = p[i, c]
                        pb[d + c] = p[b, c]
                        xi_b[c] = normals[step, i * d + c]
                        xi_b[d + c] = normals[step, b * d + c]
                    for c in range(2 * d):
                        proj_p += ghat[c] * pb[c]
                        proj_x += ghat[c] * xi_b[c]
                    for c in range(2 * d):
                        pb[c] = pb[c] + (decay[i] - 1.0) * (pb[c] - ghat[c] * proj_p) \
                            + noise_std[i] * (xi_b[c] - ghat[c] * proj_x)
                    for c in range(d):
                        p[i, c] = pb[c]
                        p[b, c] = pb[d + c]
            else:
                for i in range(n):
                    for c in range(d):
                        p[i, c] = decay[i] * p[i, c] + noise_std[i] * normals[step, i * d + c]

            kin = 0.0
            for i in range(n):
                for c in range(d):
                    tmp = p[i, c] * p[i, c]
                    kin += tmp / masses[i]
                    obs[0] += tmp
                    obs[1] += tmp * tmp
            kin *= 0.5
            obs[2] += nu
            if pot.kind == POT_COSINE:
                for i in range(n):
                    for c in range(d):
                        tmp = cos(pot.k * q[i, c])
                        obs[3] += tmp
                        obs[4] += tmp * tmp
                obs[5] += nu
            H = kin + U
            if fabs(H) > scalars[1] or not isfinite(H):
                scalars[1] = fabs(H)
            if H > scalars[4] or not isfinite(H):
                scalars[4] = H

            if prop == PROP_RATTLE:
                for i in range(n):
                    b = partner[i]
                    if b <= i:
                        continue
                    g = 0.0
                    tmp = 0.0
                    for c in range(d):
                        r1[c] = _mi(q[i, c] - q[b, c], box)
                        g += r1[c] * r1[c]
                        tmp += 2.0 * r1[c] * (p[i, c] / masses[i] - p[b, c] / masses[b])
                    g = fabs(g - l0sq)
                    if g > scalars[2]:
                        scalars[2] = g
                    if fabs(tmp) > scalars[3]:
                        scalars[3] = fabs(tmp)

            if do_rec:
                rec_accepted[step] = n_acc_step
                rec_dh[step] = dh_sum_step / n_dh_step if n_dh_step > 0 else INFINITY
                rec_fail[step] = n_fail_step

            counters[1] += 1
            done += 1
            if offset + step >= skip:
                if L > 0:
                    for s in range(nu):
                        ring[head, s] = p[s // d, s % d]
                    filled += 1
                    if filled >= L:
                        for li in range(n_lags):
                            row = head - lags[li]
                            if row < 0:
                                row += L
                            tmp = 0.0
                            for s in range(nu):
                                tmp += ring[head, s] * ring[row, s]
                            acc[li] += tmp
                        ac_count += 1
                    head += 1
                    if head == L:
                        head = 0
                if thin > 0 and (offset + step - skip) % thin == 0 and n_written < q_out.shape[0]:
                    for i in range(n):
                        for c in range(d):
                            q_out[n_written, i * d + c] = q[i, c]
                            p_out[n_written, i * d + c] = p[i, c]
                    n_written += 1

            if not metropolize and (not isfinite(H) or fabs(H) > blowup_threshold):
                counters[2] = counters[1] - 1
                break

    scalars[0] = U
    ac_state[0] = head
    ac_state[1] = filled
    ac_state[2] = ac_count
    counters[4] = n_written
    return done
