"""Constant-velocity Kalman filter over (centre x, centre y, aspect, height).

Noise model follows the usual DeepSORT defaults: position and velocity
standard deviations proportional to the box height.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

STD_WEIGHT_POSITION = 1.0 / 20
STD_WEIGHT_VELOCITY = 1.0 / 160

_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)

# 0.95 quantile of the chi-square distribution, indexed by degrees of freedom
CHI2INV95 = {1: 3.8415, 2: 5.9915, 3: 7.8147, 4: 9.4877, 5: 11.070, 6: 12.592, 7: 14.067, 8: 15.507, 9: 16.919}


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray


def to_xyah(box):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, w / h, h])


def xyah_to_box(m):
    x, y, a, h = m[:4]
    w = a * h
    return (x - w / 2, y - h / 2, x + w / 2, y + h / 2)


def kalman_initiate(measurement):
    z = np.asarray(measurement, dtype=float)
    mean = np.r_[z, np.zeros(4)]
    h = z[3]
    std = [
        2 * STD_WEIGHT_POSITION * h,
        2 * STD_WEIGHT_POSITION * h,
        1e-2,
        2 * STD_WEIGHT_POSITION * h,
        10 * STD_WEIGHT_VELOCITY * h,
        10 * STD_WEIGHT_VELOCITY * h,
        1e-5,
        10 * STD_WEIGHT_VELOCITY * h,
    ]
    return KalmanState(mean, np.diag(np.square(std)))


def kalman_predict(s):
    h = s.mean[3]
    std = [STD_WEIGHT_POSITION * h] * 2 + [1e-2, STD_WEIGHT_POSITION * h]
    std += [STD_WEIGHT_VELOCITY * h] * 2 + [1e-5, STD_WEIGHT_VELOCITY * h]
    Q = np.diag(np.square(std))
    mean = _F @ s.mean
    cov = _F @ s.covariance @ _F.T + Q
    return KalmanState(mean, (cov + cov.T) / 2)


def kalman_project(s):
    """Mean and covariance in measurement space."""
    h = s.mean[3]
    R = np.diag(np.square([STD_WEIGHT_POSITION * h, STD_WEIGHT_POSITION * h, 1e-1, STD_WEIGHT_POSITION * h]))
    return _H @ s.mean, _H @ s.covariance @ _H.T + R


def kalman_update(s, measurement):
    z = np.asarray(measurement, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("measurement must be finite")
    proj_mean, proj_cov = kalman_project(s)
    try:
        chol = scipy.linalg.cho_factor(proj_cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise ValueError("innovation covariance is singular") from None
    gain = scipy.linalg.cho_solve(chol, (s.covariance @ _H.T).T, check_finite=False).T
    mean = s.mean + gain @ (z - proj_mean)
    cov = s.covariance - gain @ proj_cov @ gain.T
    return KalmanState(mean, (cov + cov.T) / 2)


def squared_mahalanobis(s, measurements):
    """Squared Mahalanobis distance of measurement row(s) to the projected state."""
    mean, cov = kalman_project(s)
    return mahalanobis_sq(mean, cov, measurements)


def mahalanobis_sq(mean, cov, measurements):
    z = np.atleast_2d(np.asarray(measurements, dtype=float)) - mean
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("projected covariance is singular") from None
    y = scipy.linalg.solve_triangular(L, z.T, lower=True, check_finite=False)
    return np.sum(y * y, axis=0)
