# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rollout loop for the proxy tracker.

Must stay operation-for-operation identical to ``_pykernel.rollout``;
build without -ffast-math and with -ffp-contract=off.
"""
from libc.math cimport sqrt

# parameter slots, shared with _pykernel
cdef enum:
    KP, KD, A_MAX, V_MAX, ROOT_A_MAX, ROOT_V_MAX, YAW_RATE_MAX, H0, H_FALL, K_REC, K_FALL, C_D, E_CAP, C_V, DT, K_YAW


cdef inline double _clamp(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def rollout(const double[::1] prm, const double[::1] lo, const double[::1] hi,
            double[::1] q, double[::1] qd, double[::1] s, long fall_frame, long offset,
            const double[:, ::1] q_ref, const double[:, ::1] qd_ref,
            const double[:, ::1] root_ref,
            double[:, ::1] out_q, double[:, ::1] out_qd, double[:, ::1] out_s):
    """Advance the state over every reference frame, writing one output row per frame.

    ``s`` is [px, py, vx, vy, yaw, h, hv]; ``root_ref`` rows are
    [px, py, vx, vy, yaw, yaw_rate].  Returns the fall frame or -1.
    """
    cdef Py_ssize_t T = q_ref.shape[0]
    cdef Py_ssize_t S = q_ref.shape[1]
    cdef Py_ssize_t t, i, k
    cdef double dt = prm[DT]
    cdef double kp = prm[KP], kd = prm[KD], a_max = prm[A_MAX], v_max = prm[V_MAX]
    cdef double ra_max = prm[ROOT_A_MAX]
    cdef double a, v, err, e, vx, vy, speed, over, rate, acc
    with nogil:
        for t in range(T):
            if fall_frame < 0:
                e = 0.0
                for i in range(S):
                    a = kp * (q_ref[t, i] - q[i]) + kd * (qd_ref[t, i] - qd[i])
                    a = _clamp(a, -a_max, a_max)
                    v = _clamp(qd[i] + a * dt, -v_max, v_max)
                    qd[i] = v
                    q[i] = _clamp(q[i] + v * dt, lo[i], hi[i])
                    err = q_ref[t, i] - q[i]
                    e = e + err * err
                e = e / S
                for k in range(2):
                    a = kp * (root_ref[t, k] - s[k]) + kd * (root_ref[t, 2 + k] - s[2 + k])
                    a = _clamp(a, -ra_max, ra_max)
                    s[2 + k] = s[2 + k] + a * dt
                    s[k] = s[k] + s[2 + k] * dt
                rate = prm[K_YAW] * (root_ref[t, 4] - s[4]) + root_ref[t, 5]
                rate = _clamp(rate, -prm[YAW_RATE_MAX], prm[YAW_RATE_MAX])
                s[4] = s[4] + rate * dt
                vx = root_ref[t, 2]
                vy = root_ref[t, 3]
                speed = sqrt(vx * vx + vy * vy)
                over = speed - prm[ROOT_V_MAX]
                if over > 0.0:
                    e = e + prm[C_V] * (over * over)
                over = e - prm[E_CAP]
                if over < 0.0:
                    over = 0.0
                acc = prm[K_REC] * (prm[H0] - s[5]) - prm[K_FALL] * over - prm[C_D] * s[6]
                s[6] = s[6] + dt * acc
                s[5] = s[5] + dt * s[6]
                if s[5] < prm[H_FALL]:
                    fall_frame = offset + t
            for i in range(S):
                out_q[t, i] = q[i]
                out_qd[t, i] = qd[i]
            for k in range(7):
                out_s[t, k] = s[k]
    return fall_frame
