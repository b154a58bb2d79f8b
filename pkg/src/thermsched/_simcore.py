"""Compiled discrete-event scheduling kernel.

Everything here works on flat integer arrays in microseconds; the Python
wrapper in ``simulator`` builds them and interprets the results.
"""

import numpy as np
from numba import njit

# job phases
P_C1, P_QUEUED, P_LOCKED, P_M1, P_K, P_M2, P_C2, P_IDLE = 0, 1, 2, 3, 4, 5, 6, 7
# server policies
POLLING, DEFERRABLE, SPORADIC = 0, 1, 2
# event kinds
EV_RELEASE, EV_COMPLETE, EV_RUN, EV_STOP, EV_REPLENISH, EV_DEPLETE = 0, 1, 2, 3, 4, 5
EV_LOCK, EV_UNLOCK, EV_GPU_ON, EV_GPU_OFF, EV_MODE, EV_MISS = 6, 7, 8, 9, 10, 11

RING = 256
BIG = np.int64(1) << 62


@njit(cache=True)
def _log(ev, n_ev, t, kind, a, b):
    if n_ev[0] < ev.shape[0]:
        i = n_ev[0]
        ev[i, 0] = t
        ev[i, 1] = kind
        ev[i, 2] = a
        ev[i, 3] = b
        n_ev[0] += 1
    else:
        n_ev[1] = 1


@njit(cache=True)
def _push(rt, ra, rb, head, cnt, s, t, a, b):
    if cnt[s] == RING:
        # out of slots: fold into the newest entry and delay it (conservative)
        last = (head[s] + cnt[s] - 1) % RING
        rt[s, last] = t
        ra[s, last] += a
        rb[s, last] += b
        return
    i = (head[s] + cnt[s]) % RING
    rt[s, i] = t
    ra[s, i] = a
    rb[s, i] = b
    cnt[s] += 1


@njit(cache=True)
def simulate_kernel(c1, m1, kk, m2, c2, period, offset, gpu_use, prio, srv_of, bin_rank,
                    s_reg, s_res, s_per, s_pol, s_core, s_prio, n_cores,
                    g_budget, g_period, queue_fcfs,
                    mode_t, mode_s, mode_a,
                    max_jobs, horizon, record, ev_cap):
    n = c1.shape[0]
    ns = s_reg.shape[0]
    ev = np.zeros((ev_cap if record else 1, 4), dtype=np.int64)
    n_ev = np.zeros(2, dtype=np.int64)

    phase = np.full(n, P_IDLE, dtype=np.int64)
    rem = np.zeros(n, dtype=np.int64)
    nrel = np.zeros(n, dtype=np.int64)
    cur = np.zeros(n, dtype=np.int64)
    qseq = np.zeros(n, dtype=np.int64)
    in_round = np.zeros(n, dtype=np.bool_)
    max_resp = np.zeros(n, dtype=np.int64)
    misses = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=np.int64)

    breg = s_reg.copy()
    bres = s_res.copy()
    active = np.ones(ns, dtype=np.bool_)
    next_rep = s_per.copy()
    srv_running = np.zeros(ns, dtype=np.bool_)
    chunk_t = np.zeros(ns, dtype=np.int64)
    chunk_a = np.zeros(ns, dtype=np.int64)
    chunk_b = np.zeros(ns, dtype=np.int64)
    consumed = np.zeros(ns, dtype=np.int64)
    rt = np.zeros((ns + 1, RING), dtype=np.int64)
    ra = np.zeros((ns + 1, RING), dtype=np.int64)
    rb = np.zeros((ns + 1, RING), dtype=np.int64)
    rhead = np.zeros(ns + 1, dtype=np.int64)
    rcnt = np.zeros(ns + 1, dtype=np.int64)
    GS = ns  # ring slot used by the GPU server

    gb = g_budget
    holder = -1
    g_running = False
    g_chunk_t = 0
    g_chunk_a = 0
    seq = 0

    run_task = np.full(n_cores, -1, dtype=np.int64)
    run_srv = np.full(n_cores, -1, dtype=np.int64)
    run_pool = np.zeros(n_cores, dtype=np.int64)
    prev_task = np.full(n_cores, -1, dtype=np.int64)

    mode_i = 0
    total_rel = 0
    now = 0

    while True:
        # ---- 1. replenishments -------------------------------------------------
        for s in range(ns):
            if s_pol[s] == SPORADIC:
                while rcnt[s] > 0 and rt[s, rhead[s]] <= now:
                    h = rhead[s]
                    breg[s] = min(s_reg[s], breg[s] + ra[s, h])
                    bres[s] = min(s_res[s], bres[s] + rb[s, h])
                    rhead[s] = (h + 1) % RING
                    rcnt[s] -= 1
                    if record:
                        _log(ev, n_ev, now, EV_REPLENISH, s, breg[s] + bres[s])
            elif next_rep[s] <= now:
                breg[s] = s_reg[s]
                bres[s] = s_res[s]
                next_rep[s] = (now // s_per[s] + 1) * s_per[s]
                if record:
                    _log(ev, n_ev, now, EV_REPLENISH, s, breg[s] + bres[s])
        while rcnt[GS] > 0 and rt[GS, rhead[GS]] <= now:
            h = rhead[GS]
            gb = min(g_budget, gb + ra[GS, h])
            rhead[GS] = (h + 1) % RING
            rcnt[GS] -= 1
        while mode_i < mode_t.shape[0] and mode_t[mode_i] <= now:
            active[mode_s[mode_i]] = mode_a[mode_i] != 0
            if record:
                _log(ev, n_ev, now, EV_MODE, mode_s[mode_i], mode_a[mode_i])
            mode_i += 1

        # ---- 2. releases ------------------------------------------------------------
        for i in range(n):
            while total_rel < max_jobs and offset[i] + nrel[i] * period[i] <= now:
                nrel[i] += 1
                total_rel += 1
                if record:
                    _log(ev, n_ev, now, EV_RELEASE, i, nrel[i] - 1)
                if phase[i] == P_IDLE:
                    phase[i] = P_C1
                    rem[i] = c1[i]

        # ---- 3. settle zero-length phases, lock hand-off, completions --------------
        changed = True
        while changed:
            changed = False
            for i in range(n):
                if phase[i] == P_IDLE or rem[i] > 0 and phase[i] != P_QUEUED and phase[i] != P_LOCKED:
                    continue
                p = phase[i]
                if p == P_C1:
                    if gpu_use[i]:
                        phase[i] = P_QUEUED
                        qseq[i] = seq
                        seq += 1
                    else:
                        phase[i] = -1  # completes below
                    changed = True
                elif p == P_LOCKED:
                    if gb >= m1[i] + kk[i] + m2[i]:
                        phase[i] = P_M1
                        rem[i] = m1[i]
                        changed = True
                elif p == P_M1:
                    phase[i] = P_K
                    rem[i] = kk[i]
                    changed = True
                elif p == P_K:
                    phase[i] = P_M2
                    rem[i] = m2[i]
                    changed = True
                elif p == P_M2:
                    holder = -1
                    if record:
                        _log(ev, n_ev, now, EV_UNLOCK, i, cur[i])
                    phase[i] = P_C2
                    rem[i] = c2[i]
                    changed = True
                elif p == P_C2:
                    phase[i] = -1
                    changed = True
                if phase[i] == -1:
                    resp = now - (offset[i] + cur[i] * period[i])
                    if resp > max_resp[i]:
                        max_resp[i] = resp
                    if resp > period[i]:
                        misses[i] += 1
                        if record:
                            _log(ev, n_ev, now, EV_MISS, i, cur[i])
                    done[i] += 1
                    if record:
                        _log(ev, n_ev, now, EV_COMPLETE, i, cur[i])
                    cur[i] += 1
                    if cur[i] < nrel[i]:
                        phase[i] = P_C1
                        rem[i] = c1[i]
                    else:
                        phase[i] = P_IDLE
            if holder < 0:
                pick = -1
                if queue_fcfs:
                    for i in range(n):
                        if phase[i] == P_QUEUED and in_round[i]:
                            if pick < 0 or bin_rank[i] < bin_rank[pick]:
                                pick = i
                    if pick < 0:
                        for i in range(n):
                            if phase[i] == P_QUEUED:
                                in_round[i] = True
                                if pick < 0 or bin_rank[i] < bin_rank[pick]:
                                    pick = i
                else:
                    for i in range(n):
                        if phase[i] == P_QUEUED and (pick < 0 or prio[i] > prio[pick]):
                            pick = i
                if pick >= 0:
                    holder = pick
                    in_round[pick] = False
                    phase[pick] = P_LOCKED
                    if record:
                        _log(ev, n_ev, now, EV_LOCK, pick, cur[pick])
                    changed = True

        # ---- 4. dispatch -------------------------------------------------------------
        for c in range(n_cores):
            run_task[c] = -1
            run_srv[c] = -1
        for c in range(n_cores):
            best_s = -1
            best_t = -1
            best_pool = 0
            # servers on this core in priority order
            while True:
                cand_s = -1
                for s in range(ns):
                    if s_core[s] != c or not active[s]:
                        continue
                    if s == best_s or (best_s >= 0 and s_prio[s] >= s_prio[best_s]):
                        continue
                    if cand_s < 0 or s_prio[s] > s_prio[cand_s]:
                        cand_s = s
                if cand_s < 0:
                    break
                best_s = cand_s
                s = cand_s
                boosted = -1
                normal = -1
                for i in range(n):
                    if srv_of[i] != s:
                        continue
                    p = phase[i]
                    if (p == P_M1 or p == P_M2) and rem[i] > 0:
                        boosted = i
                    elif (p == P_C1 or p == P_C2) and rem[i] > 0:
                        if normal < 0 or prio[i] > prio[normal]:
                            normal = i
                if boosted >= 0:
                    if bres[s] > 0:
                        best_t, best_pool = boosted, 1
                    elif breg[s] > 0:
                        best_t, best_pool = boosted, 0
                elif normal >= 0:
                    if breg[s] > 0:
                        best_t, best_pool = normal, 0
                elif s_pol[s] == POLLING and breg[s] > 0:
                    breg[s] = 0
                    if record:
                        _log(ev, n_ev, now, EV_DEPLETE, s, 0)
                if best_t >= 0:
                    run_task[c] = best_t
                    run_srv[c] = s
                    run_pool[c] = best_pool
                    break
            if record and run_task[c] != prev_task[c]:
                if prev_task[c] >= 0:
                    _log(ev, n_ev, now, EV_STOP, c, prev_task[c])
                if run_task[c] >= 0:
                    _log(ev, n_ev, now, EV_RUN, c, run_task[c])
            prev_task[c] = run_task[c]

        # ---- 5. chunk bookkeeping for sporadic replenishment ---------------------------
        for s in range(ns):
            running = False
            for c in range(n_cores):
                if run_srv[c] == s:
                    running = True
            if running and not srv_running[s]:
                chunk_t[s] = now
                chunk_a[s] = 0
                chunk_b[s] = 0
            elif not running and srv_running[s]:
                if s_pol[s] == SPORADIC and chunk_a[s] + chunk_b[s] > 0:
                    _push(rt, ra, rb, rhead, rcnt, s, chunk_t[s] + s_per[s], chunk_a[s], chunk_b[s])
            srv_running[s] = running
        g_now = False
        if holder >= 0:
            if phase[holder] == P_K and rem[holder] > 0:
                g_now = True
            elif phase[holder] == P_M1 or phase[holder] == P_M2:
                for c in range(n_cores):
                    if run_task[c] == holder:
                        g_now = True
        if g_now and not g_running:
            g_chunk_t = now
            g_chunk_a = 0
            if record:
                _log(ev, n_ev, now, EV_GPU_ON, holder, phase[holder])
        elif not g_now and g_running:
            if g_chunk_a > 0:
                _push(rt, ra, rb, rhead, rcnt, GS, g_chunk_t + g_period, g_chunk_a, 0)
            if record:
                _log(ev, n_ev, now, EV_GPU_OFF, -1, 0)
        g_running = g_now

        # ---- 6. next event time --------------------------------------------------------
        nxt = BIG
        if total_rel < max_jobs:
            for i in range(n):
                t = offset[i] + nrel[i] * period[i]
                if t < nxt:
                    nxt = t
        else:
            busy = False
            for i in range(n):
                if phase[i] != P_IDLE:
                    busy = True
            if not busy:
                break
        for c in range(n_cores):
            i = run_task[c]
            if i >= 0:
                s = run_srv[c]
                left = bres[s] if run_pool[c] == 1 else breg[s]
                step = rem[i] if rem[i] < left else left
                if now + step < nxt:
                    nxt = now + step
        if holder >= 0 and phase[holder] == P_K and rem[holder] > 0:
            if now + rem[holder] < nxt:
                nxt = now + rem[holder]
        for s in range(ns):
            if s_pol[s] == SPORADIC:
                if rcnt[s] > 0 and rt[s, rhead[s]] < nxt:
                    nxt = rt[s, rhead[s]]
            elif next_rep[s] < nxt:
                nxt = next_rep[s]
        if rcnt[GS] > 0 and rt[GS, rhead[GS]] < nxt:
            nxt = rt[GS, rhead[GS]]
        if mode_i < mode_t.shape[0] and mode_t[mode_i] < nxt:
            nxt = mode_t[mode_i]
        if nxt > horizon:
            nxt = horizon
        if nxt <= now:
            break
        dt = nxt - now

        # ---- 7. advance ----------------------------------------------------------------
        if dt > 0:
            for c in range(n_cores):
                i = run_task[c]
                if i >= 0:
                    s = run_srv[c]
                    rem[i] -= dt
                    consumed[s] += dt
                    if run_pool[c] == 1:
                        bres[s] -= dt
                        chunk_b[s] += dt
                    else:
                        breg[s] -= dt
                        chunk_a[s] += dt
            if holder >= 0 and phase[holder] == P_K and rem[holder] > 0:
                rem[holder] -= dt
            if g_running:
                gb -= dt
                g_chunk_a += dt
        now = nxt
        if now >= horizon:
            break

    # jobs still pending at the end that are already late
    for i in range(n):
        for j in range(cur[i], nrel[i]):
            if now - (offset[i] + j * period[i]) > period[i]:
                misses[i] += 1
                late = now - (offset[i] + j * period[i])
                if late > max_resp[i]:
                    max_resp[i] = late
    return max_resp, misses, done, nrel, consumed, ev[:n_ev[0]], n_ev[1], now
