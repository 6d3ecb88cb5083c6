"""Compiled event loops.

All kernels seed numba's internal generator on entry, so a kernel call is a
pure function of its arguments.  Levels are 0-based here.  Status codes:
0 ok, 1 truncation overflow, 2 event log full, 3 envelope violation,
4 strip overflow.
"""
import numpy as np
from numba import njit

OK, OVERFLOW, LOG_FULL, ENVELOPE, STRIP = 0, 1, 2, 3, 4


@njit(cache=True)
def _fluid_at(t, fdt, fstates, fdrifts, out):
    n = fstates.shape[0] - 1
    i = int(t / fdt)
    if i > n - 1:
        i = n - 1
    if i < 0:
        i = 0
    s = (t - i * fdt) / fdt
    if s < 0.0:
        s = 0.0
    elif s > 1.0:
        s = 1.0
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    for k in range(fstates.shape[1]):
        out[k] = (
            h00 * fstates[i, k]
            + h10 * fdt * fdrifts[i, k]
            + h01 * fstates[i + 1, k]
            + h11 * fdt * fdrifts[i + 1, k]
        )


@njit(cache=True)
def _pos(v):
    return v if v > 0.0 else 0.0


@njit(cache=True)
def _rate(x, k, sign, lam, d):
    # sign 0: lambda_+^k, sign 1: lambda_-^k, positive-part extension
    K = x.shape[0]
    if sign == 0:
        prev = 1.0 if k == 0 else _pos(x[k - 1])
        return lam * _pos(prev**d - _pos(x[k]) ** d)
    nxt = 0.0 if k == K - 1 else _pos(x[k + 1])
    return _pos(_pos(x[k]) - nxt)


@njit(cache=True)
def _count_rate(n, N, k, sign, lam, d):
    K = n.shape[0]
    if sign == 0:
        prev = 1.0 if k == 0 else n[k - 1] / N
        return lam * (prev**d - (n[k] / N) ** d)
    nxt = 0 if k == K - 1 else n[k + 1]
    return (n[k] - nxt) / N


@njit(cache=True)
def _drift(x, lam, d, out):
    for k in range(x.shape[0]):
        out[k] = _rate(x, k, 0, lam, d) - _rate(x, k, 1, lam, d)


@njit(cache=True)
def _grad(x, g, lam, d, out):
    K = x.shape[0]
    for k in range(K):
        v = -(lam * d * x[k] ** (d - 1) + 1.0) * g[k]
        if k > 0:
            v += lam * d * x[k - 1] ** (d - 1) * g[k - 1]
        if k < K - 1:
            v += g[k + 1]
        out[k] = v


@njit(cache=True)
def _check_dev(n, N, x, t, sup, thr, first_hit):
    for k in range(n.shape[0]):
        dev = abs(n[k] / N - x[k])
        if dev > sup[k]:
            sup[k] = dev
        if dev > thr[k] and first_hit[k] == np.inf:
            first_hit[k] = t


@njit(cache=True)
def tail_kernel(counts0, N, lam, d, service, frozen, t_end, obs_times, seed,
                fdt, fstates, fdrifts, thr, ev_t, ev_type, ev_lvl, record):
    """Direct-method simulation of the tail-count chain."""
    np.random.seed(seed)
    K = counts0.shape[0]
    n = counts0.copy()
    nobs = obs_times.shape[0]
    obs = np.zeros((nobs, K), np.int64)
    sup = np.zeros(K)
    first_hit = np.full(K, np.inf)
    first_pos = np.full(K, np.inf)
    has_fluid = fstates.shape[0] > 0
    x = np.zeros(K)
    pw = np.empty(K)
    for k in range(K):
        pw[k] = (n[k] / N) ** d
        if n[k] > 0:
            first_pos[k] = 0.0
    if has_fluid:
        _fluid_at(0.0, fdt, fstates, fdrifts, x)
        _check_dev(n, N, x, 0.0, sup, thr, first_hit)
    t = 0.0
    j = 0
    nev = 0
    status = OK
    up_rate = N * lam
    while True:
        down_rate = float(n[0]) if service else 0.0
        total = up_rate + down_rate
        t_new = t + -np.log(1.0 - np.random.random()) / total
        while j < nobs and obs_times[j] < t_new:
            obs[j] = n
            j += 1
        if t_new > t_end:
            break
        if has_fluid:
            _fluid_at(t_new, fdt, fstates, fdrifts, x)
            _check_dev(n, N, x, t_new, sup, thr, first_hit)
        if np.random.random() * total < up_rate:
            u = np.random.random()
            k = 0
            while k < K and pw[k] > u:
                k += 1
            # arrival joins level k+1 (0-based k)
            if k >= K - 1:
                status = OVERFLOW
                t = t_new
                break
            sign = 0
        else:
            i = np.random.randint(0, n[0])
            k = 0
            while k + 1 < K and n[k + 1] > i:
                k += 1
            sign = 1
        if record:
            if nev >= ev_t.shape[0]:
                status = LOG_FULL
                t = t_new
                break
            ev_t[nev] = t_new
            ev_type[nev] = sign
            ev_lvl[nev] = k + 1
        nev += 1
        if not frozen:
            n[k] += 1 if sign == 0 else -1
            pw[k] = (n[k] / N) ** d
            if n[k] > 0 and first_pos[k] == np.inf:
                first_pos[k] = t_new
        if has_fluid:
            _check_dev(n, N, x, t_new, sup, thr, first_hit)
        t = t_new
    while j < nobs:
        obs[j] = n
        j += 1
    if has_fluid and status == OK:
        _fluid_at(t_end, fdt, fstates, fdrifts, x)
        _check_dev(n, N, x, t_end, sup, thr, first_hit)
    return obs, sup, first_hit, first_pos, nev, status, t


@njit(cache=True)
def queue_kernel(lengths0, lam, d, t_end, obs_times, seed, K):
    """Queue-level simulation; choices uniform with replacement."""
    np.random.seed(seed)
    N = lengths0.shape[0]
    L = lengths0.copy()
    busy = np.empty(N, np.int64)
    where = np.full(N, -1, np.int64)
    nb = 0
    n = np.zeros(K, np.int64)
    status = OK
    for i in range(N):
        if L[i] > K:
            status = OVERFLOW
        for lvl in range(min(L[i], K)):
            n[lvl] += 1
        if L[i] > 0:
            busy[nb] = i
            where[i] = nb
            nb += 1
    nobs = obs_times.shape[0]
    obs = np.zeros((nobs, K), np.int64)
    t = 0.0
    j = 0
    nev = 0
    arr = N * lam
    while status == OK:
        total = arr + nb
        t_new = t + -np.log(1.0 - np.random.random()) / total
        while j < nobs and obs_times[j] < t_new:
            obs[j] = n
            j += 1
        if t_new > t_end:
            break
        if np.random.random() * total < arr:
            best = -1
            best_len = 1 << 62
            ties = 0
            for _ in range(d):
                i = np.random.randint(0, N)
                if L[i] < best_len:
                    best, best_len, ties = i, L[i], 1
                elif L[i] == best_len:
                    ties += 1
                    if np.random.random() * ties < 1.0:
                        best = i
            if best_len + 1 > K:
                status = OVERFLOW
                t = t_new
                break
            L[best] += 1
            n[best_len] += 1
            if best_len == 0:
                busy[nb] = best
                where[best] = nb
                nb += 1
        else:
            p = np.random.randint(0, nb)
            i = busy[p]
            n[L[i] - 1] -= 1
            L[i] -= 1
            if L[i] == 0:
                last = busy[nb - 1]
                busy[p] = last
                where[last] = p
                where[i] = -1
                nb -= 1
        nev += 1
        t = t_new
    while j < nobs:
        obs[j] = n
        j += 1
    return obs, L, nev, status


@njit(cache=True)
def _gamma_rhs(t, g, sqrt_n, comp, fdt, fstates, fdrifts, lam, d, x, b, out):
    _fluid_at(t, fdt, fstates, fdrifts, x)
    _grad(x, g, lam, d, out)
    if comp:
        _drift(x, lam, d, b)
        for k in range(g.shape[0]):
            out[k] -= sqrt_n * b[k]


@njit(cache=True)
def _advance_gamma(g, t0, t1, hmax, sqrt_n, comp, fdt, fstates, fdrifts, lam, d, work):
    # RK4 on [t0, t1] for dg/dt = -sqrt(N) b(x_t) + J(x_t) g
    span = t1 - t0
    if span <= 0.0:
        return
    nsub = int(np.ceil(span / hmax))
    h = span / nsub
    K = g.shape[0]
    x = work[0]
    b = work[1]
    k1 = work[2]
    k2 = work[3]
    k3 = work[4]
    k4 = work[5]
    tmp = work[6]
    for s in range(nsub):
        ts = t0 + s * h
        _gamma_rhs(ts, g, sqrt_n, comp, fdt, fstates, fdrifts, lam, d, x, b, k1)
        for k in range(K):
            tmp[k] = g[k] + 0.5 * h * k1[k]
        _gamma_rhs(ts + 0.5 * h, tmp, sqrt_n, comp, fdt, fstates, fdrifts, lam, d, x, b, k2)
        for k in range(K):
            tmp[k] = g[k] + 0.5 * h * k2[k]
        _gamma_rhs(ts + 0.5 * h, tmp, sqrt_n, comp, fdt, fstates, fdrifts, lam, d, x, b, k3)
        for k in range(K):
            tmp[k] = g[k] + h * k3[k]
        _gamma_rhs(ts + h, tmp, sqrt_n, comp, fdt, fstates, fdrifts, lam, d, x, b, k4)
        for k in range(K):
            g[k] += h / 6.0 * (k1[k] + 2 * k2[k] + 2 * k3[k] + k4[k])


@njit(cache=True)
def _check_jump(n, N, g, sqrt_n, x, t, m, sup_x, sup_xt, sup_g, thr4, thr6, thr5,
                hit4, hit6, hit5):
    for k in range(n.shape[0]):
        xk = n[k] / N
        dev = abs(xk - x[k])
        if dev > sup_x[k]:
            sup_x[k] = dev
        if dev > thr4[k] and hit4[k] == np.inf:
            hit4[k] = t
        dev6 = abs(xk - x[k] - g[k] / sqrt_n)
        if dev6 > sup_xt[k]:
            sup_xt[k] = dev6
        if dev6 > thr6[k] and hit6[k] == np.inf:
            hit6[k] = t
        ag = abs(g[k])
        if ag > sup_g[k]:
            sup_g[k] = ag
    if m >= 1 and hit5[0] == np.inf and abs(g[m - 1]) > thr5:
        hit5[0] = t


@njit(cache=True)
def jump_kernel(counts0, N, lam, d, t_end, obs_times, seed, fdt, fstates, fdrifts,
                env, hmax, force_joint, jumps, comp, thr4, thr6, thr5, m,
                mk_t, mk_lvl, mk_sign, record):
    """Joint chain (X, W): each candidate atom of the envelope is split into
    joint, X-only and W-only parts; gamma follows the W marks."""
    np.random.seed(seed)
    K = counts0.shape[0]
    n = counts0.copy()
    g = np.zeros(K)
    sqrt_n = np.sqrt(N)
    nobs = obs_times.shape[0]
    obs_n = np.zeros((nobs, K), np.int64)
    obs_g = np.zeros((nobs, K))
    sup_x = np.zeros(K)
    sup_xt = np.zeros(K)
    sup_g = np.zeros(K)
    hit4 = np.full(K, np.inf)
    hit6 = np.full(K, np.inf)
    hit5 = np.full(1, np.inf)
    first_pos = np.full(K, np.inf)
    marks = np.zeros((2, K), np.int64)
    kinds = np.zeros(3, np.int64)
    work = np.zeros((7, K))
    x = np.zeros(K)
    B = np.zeros((2, K))
    for k in range(K):
        if n[k] > 0:
            first_pos[k] = 0.0
    _fluid_at(0.0, fdt, fstates, fdrifts, x)
    _check_jump(n, N, g, sqrt_n, x, 0.0, m, sup_x, sup_xt, sup_g, thr4, thr6, thr5,
                hit4, hit6, hit5)
    t_clock = 0.0
    t_g = 0.0
    j = 0
    nmk = 0
    status = OK
    while True:
        total = 0.0
        for s in range(2):
            for k in range(K):
                rx = env[s, k] if force_joint else _count_rate(n, N, k, s, lam, d)
                B[s, k] = max(rx, env[s, k])
                total += B[s, k]
        t_new = t_clock + -np.log(1.0 - np.random.random()) / (N * total)
        while j < nobs and obs_times[j] < t_new:
            _advance_gamma(g, t_g, obs_times[j], hmax, sqrt_n, comp, fdt, fstates,
                           fdrifts, lam, d, work)
            t_g = obs_times[j]
            obs_n[j] = n
            obs_g[j] = g
            j += 1
        if t_new > t_end:
            break
        t_clock = t_new
        u = np.random.random() * total
        s = 0
        k = 0
        acc = B[0, 0]
        while acc < u and not (s == 1 and k == K - 1):
            k += 1
            if k == K:
                s, k = 1, 0
            acc += B[s, k]
        _fluid_at(t_new, fdt, fstates, fdrifts, x)
        r_fl = _rate(x, k, s, lam, d)
        if r_fl > B[s, k] * (1.0 + 1e-9) + 1e-300:
            status = ENVELOPE
            break
        r_x = r_fl if force_joint else _count_rate(n, N, k, s, lam, d)
        v = np.random.random() * B[s, k]
        lo = min(r_x, r_fl)
        move_x = False
        move_w = False
        if v < lo:
            move_x = True
            move_w = True
            kinds[0] += 1
        elif v < r_x:
            move_x = True
            kinds[1] += 1
        elif v < r_fl:
            move_w = True
            kinds[2] += 1
        else:
            continue
        _advance_gamma(g, t_g, t_new, hmax, sqrt_n, comp, fdt, fstates, fdrifts,
                       lam, d, work)
        t_g = t_new
        _check_jump(n, N, g, sqrt_n, x, t_new, m, sup_x, sup_xt, sup_g, thr4, thr6,
                    thr5, hit4, hit6, hit5)
        step = 1 if s == 0 else -1
        if move_x:
            if s == 0 and k == K - 1:
                status = OVERFLOW
                break
            n[k] += step
            if n[k] > 0 and first_pos[k] == np.inf:
                first_pos[k] = t_new
        if move_w:
            marks[s, k] += 1
            if jumps:
                g[k] += step / sqrt_n
            if record:
                if nmk >= mk_t.shape[0]:
                    status = LOG_FULL
                    break
                mk_t[nmk] = t_new
                mk_lvl[nmk] = k + 1
                mk_sign[nmk] = step
            nmk += 1
        _check_jump(n, N, g, sqrt_n, x, t_new, m, sup_x, sup_xt, sup_g, thr4, thr6,
                    thr5, hit4, hit6, hit5)
    if status == OK:
        _advance_gamma(g, t_g, t_end, hmax, sqrt_n, comp, fdt, fstates, fdrifts,
                       lam, d, work)
        t_g = t_end
        _fluid_at(t_end, fdt, fstates, fdrifts, x)
        _check_jump(n, N, g, sqrt_n, x, t_end, m, sup_x, sup_xt, sup_g, thr4, thr6,
                    thr5, hit4, hit6, hit5)
    while j < nobs:
        obs_n[j] = n
        obs_g[j] = g
        j += 1
    return (obs_n, obs_g, sup_x, sup_xt, sup_g, hit4, hit6, hit5[0], first_pos,
            marks, kinds, nmk, status, t_g)


@njit(cache=True)
def _alive(deaths, count, t):
    c = 0
    for i in range(count):
        if deaths[i] > t:
            c += 1
    return c


@njit(cache=True)
def cutoff_kernel(counts0, N, lam, d, m, t_end, obs_times, seed, fdt, fstates,
                  fdrifts, height, atoms_on, thr4, hat_cap, cap):
    """Levels below m by direct method; level m from the shared atoms.

    Returns X counts and the reconstructed M/M/inf count at the observation
    times plus the first-hit times T1 (level m+1 occupied), T2 (one-sided
    atom), T3 (reconstructed count above ``hat_cap``) and per-level T4.
    The X side freezes at T1, after which the cutoff construction no longer
    describes it; the M/M/inf side runs to ``t_end``.
    """
    np.random.seed(seed)
    K = counts0.shape[0]
    n = counts0.copy()
    mi = m - 1  # 0-based index of level m
    deaths_x = np.empty(cap)
    deaths_h = np.empty(cap)
    nx = 0
    nh = 0
    for i in range(n[mi]):
        life = -np.log(1.0 - np.random.random())
        deaths_x[nx] = life
        deaths_h[nh] = life
        nx += 1
        nh += 1
    nobs = obs_times.shape[0]
    obs_n = np.zeros((nobs, K), np.int64)
    obs_h = np.zeros(nobs, np.int64)
    hit4 = np.full(K, np.inf)
    sup = np.zeros(K)
    T1 = np.inf
    T2 = np.inf
    T3 = np.inf
    if n[mi] > hat_cap:
        T3 = 0.0
    x = np.zeros(K)
    x_prev = np.zeros(K)
    x_run = True
    n_atoms = 0
    n_acc = np.zeros(2, np.int64)
    status = OK
    _fluid_at(0.0, fdt, fstates, fdrifts, x)
    _check_low(n, N, x, 0.0, mi, sup, thr4, hit4)
    t = 0.0
    j = 0
    while True:
        # next X-side departure at level m
        t_dep = np.inf
        idx = -1
        if x_run:
            for i in range(nx):
                if deaths_x[i] > t and deaths_x[i] < t_dep:
                    t_dep = deaths_x[i]
                    idx = i
        pw_low = (n[mi - 1] / N) ** d
        up_g = N * lam * (1.0 - pw_low) if x_run else 0.0
        down_g = float(n[0] - n[mi]) if x_run else 0.0
        h = height if atoms_on else 0.0
        total = up_g + down_g + h
        t_cand = np.inf
        if total > 0.0:
            t_cand = t + -np.log(1.0 - np.random.random()) / total
        t_next = min(t_cand, t_dep)
        while j < nobs and obs_times[j] < t_next:
            obs_n[j] = n
            obs_h[j] = _alive(deaths_h, nh, obs_times[j])
            j += 1
        if t_next > t_end:
            break
        if t_dep <= t_cand:
            _fluid_at(t_dep, fdt, fstates, fdrifts, x)
            _check_low(n, N, x, t_dep, mi, sup, thr4, hit4)
            n[mi] -= 1
            _check_low(n, N, x, t_dep, mi, sup, thr4, hit4)
            t = t_dep
            continue
        t = t_cand
        u = np.random.random() * total
        if u < up_g + down_g:
            _fluid_at(t, fdt, fstates, fdrifts, x)
            _check_low(n, N, x, t, mi, sup, thr4, hit4)
            if u < up_g:
                v = pw_low + np.random.random() * (1.0 - pw_low)
                k = 0
                while k < mi and (n[k] / N) ** d > v:
                    k += 1
                n[k] += 1
            else:
                i = n[mi] + np.random.randint(0, n[0] - n[mi])
                k = 0
                while k + 1 < mi and n[k + 1] > i:
                    k += 1
                n[k] -= 1
            _check_low(n, N, x, t, mi, sup, thr4, hit4)
            continue
        n_atoms += 1
        xa = np.random.random() * height
        life = -np.log(1.0 - np.random.random())
        _fluid_at(t, fdt, fstates, fdrifts, x_prev)
        lvl_low = x_prev[mi - 1] if x_prev[mi - 1] > 0.0 else 0.0
        thr_hat = N * lam * lvl_low**d
        thr_x = N * lam * (n[mi - 1] / N) ** d
        if thr_hat > height or (x_run and thr_x > height):
            status = STRIP
            break
        acc_h = xa <= thr_hat
        acc_x = x_run and xa <= thr_x
        if acc_h:
            if nh >= cap:
                status = LOG_FULL
                break
            deaths_h[nh] = t + life
            nh += 1
            n_acc[1] += 1
            if T3 == np.inf and _alive(deaths_h, nh, t) > hat_cap:
                T3 = t
        if x_run and acc_x != acc_h and T2 == np.inf:
            T2 = t
        if acc_x:
            n_acc[0] += 1
            if xa <= N * lam * (n[mi] / N) ** d:
                n[mi + 1] += 1
                T1 = t
                x_run = False
            else:
                if nx >= cap:
                    status = LOG_FULL
                    break
                deaths_x[nx] = t + life
                nx += 1
                n[mi] += 1
    while j < nobs:
        obs_n[j] = n
        obs_h[j] = _alive(deaths_h, nh, obs_times[j])
        j += 1
    if status == OK and x_run:
        _fluid_at(t_end, fdt, fstates, fdrifts, x)
        _check_low(n, N, x, t_end, mi, sup, thr4, hit4)
    return obs_n, obs_h, sup, hit4, T1, T2, T3, n_atoms, n_acc, status


@njit(cache=True)
def _check_low(n, N, x, t, mi, sup, thr, hit):
    for k in range(mi):
        dev = abs(n[k] / N - x[k])
        if dev > sup[k]:
            sup[k] = dev
        if dev > thr[k] and hit[k] == np.inf:
            hit[k] = t


@njit(cache=True)
def fluid_rk4(x0, lam, d, dt, n_steps):
    """Classical RK4 for the fluid ODE, projected onto S_0 after each step."""
    K = x0.shape[0]
    states = np.empty((n_steps + 1, K))
    states[0] = x0
    x = x0.copy()
    k1 = np.empty(K)
    k2 = np.empty(K)
    k3 = np.empty(K)
    k4 = np.empty(K)
    tmp = np.empty(K)
    proj = 0.0
    for i in range(n_steps):
        _drift(x, lam, d, k1)
        for k in range(K):
            tmp[k] = x[k] + 0.5 * dt * k1[k]
        _drift(tmp, lam, d, k2)
        for k in range(K):
            tmp[k] = x[k] + 0.5 * dt * k2[k]
        _drift(tmp, lam, d, k3)
        for k in range(K):
            tmp[k] = x[k] + dt * k3[k]
        _drift(tmp, lam, d, k4)
        prev = 1.0
        for k in range(K):
            v = x[k] + dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k])
            y = min(max(v, 0.0), prev)
            if abs(y - v) > proj:
                proj = abs(y - v)
            x[k] = y
            prev = y
        states[i + 1] = x
    return states, proj
