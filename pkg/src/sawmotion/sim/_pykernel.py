"""Pure-Python rollout loop; reference semantics for the compiled kernel."""
from math import sqrt

KP, KD, A_MAX, V_MAX, ROOT_A_MAX, ROOT_V_MAX, YAW_RATE_MAX, H0, H_FALL, K_REC, K_FALL, C_D, E_CAP, C_V, DT, K_YAW = range(16)


def _clamp(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def rollout(prm, lo, hi, q, qd, s, fall_frame, offset, q_ref, qd_ref, root_ref, out_q, out_qd, out_s):
    """Same contract as the compiled ``rollout``: mutates q, qd, s and the out arrays."""
    p = prm.tolist()
    lo_, hi_ = lo.tolist(), hi.tolist()
    q_, qd_, s_ = q.tolist(), qd.tolist(), s.tolist()
    qr_all, qdr_all, rr_all = q_ref.tolist(), qd_ref.tolist(), root_ref.tolist()
    S = len(q_)
    dt = p[DT]
    kp, kd, a_max, v_max, ra_max = p[KP], p[KD], p[A_MAX], p[V_MAX], p[ROOT_A_MAX]
    rows_q, rows_qd, rows_s = [], [], []
    for t in range(len(qr_all)):
        if fall_frame < 0:
            qr, qdr, rr = qr_all[t], qdr_all[t], rr_all[t]
            e = 0.0
            for i in range(S):
                a = kp * (qr[i] - q_[i]) + kd * (qdr[i] - qd_[i])
                a = _clamp(a, -a_max, a_max)
                v = _clamp(qd_[i] + a * dt, -v_max, v_max)
                qd_[i] = v
                q_[i] = _clamp(q_[i] + v * dt, lo_[i], hi_[i])
                err = qr[i] - q_[i]
                e = e + err * err
            e = e / S
            for k in range(2):
                a = kp * (rr[k] - s_[k]) + kd * (rr[2 + k] - s_[2 + k])
                a = _clamp(a, -ra_max, ra_max)
                s_[2 + k] = s_[2 + k] + a * dt
                s_[k] = s_[k] + s_[2 + k] * dt
            rate = p[K_YAW] * (rr[4] - s_[4]) + rr[5]
            rate = _clamp(rate, -p[YAW_RATE_MAX], p[YAW_RATE_MAX])
            s_[4] = s_[4] + rate * dt
            vx, vy = rr[2], rr[3]
            speed = sqrt(vx * vx + vy * vy)
            over = speed - p[ROOT_V_MAX]
            if over > 0.0:
                e = e + p[C_V] * (over * over)
            over = e - p[E_CAP]
            if over < 0.0:
                over = 0.0
            acc = p[K_REC] * (p[H0] - s_[5]) - p[K_FALL] * over - p[C_D] * s_[6]
            s_[6] = s_[6] + dt * acc
            s_[5] = s_[5] + dt * s_[6]
            if s_[5] < p[H_FALL]:
                fall_frame = offset + t
        rows_q.append(list(q_))
        rows_qd.append(list(qd_))
        rows_s.append(list(s_))
    if rows_q:
        out_q[:] = rows_q
        out_qd[:] = rows_qd
        out_s[:] = rows_s
    q[:] = q_
    qd[:] = qd_
    s[:] = s_
    return fall_frame
