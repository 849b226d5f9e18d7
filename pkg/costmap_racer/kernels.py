"""
Compiled hot loops.

Everything here works on plain float64/float32 arrays so the service layer can
hand over views without conversion. Parallel kernels only ever write to
disjoint slots of their output, so results do not depend on thread count.
"""

import math

import numpy as np
from numba import njit, prange

GRAVITY = 9.81

# VehicleParams.as_array() layout
P_MASS, P_IZ, P_LF, P_LR, P_CF, P_CR, P_MU, P_GAIN, P_DRAG1, P_DRAG2, P_MAX_STEER, P_KIN_SPEED = range(12)


@njit(cache=True)
def sample_cell(grid, row, col):
    """
    Bilinear lookup in continuous cell-index coordinates.

        Args:
            grid (numpy.ndarray (H, W)): raster, row-major
            row (float): continuous row index, cell centers at integers
            col (float): continuous column index

        Returns:
            value (float): interpolated value, 1.0 outside the raster footprint
            inside (bool): whether (row, col) lies within the footprint
    """
    h, w = grid.shape
    if not (row >= -0.5 and row <= h - 0.5 and col >= -0.5 and col <= w - 0.5):
        return 1.0, False

    row = min(max(row, 0.0), h - 1.0)
    col = min(max(col, 0.0), w - 1.0)

    if h > 1:
        r0 = min(int(math.floor(row)), h - 2)
        r1 = r0 + 1
    else:
        r0 = 0
        r1 = 0
    if w > 1:
        c0 = min(int(math.floor(col)), w - 2)
        c1 = c0 + 1
    else:
        c0 = 0
        c1 = 0
    fr = row - r0
    fc = col - c0

    v00 = float(grid[r0, c0])
    v01 = float(grid[r0, c1])
    v10 = float(grid[r1, c0])
    v11 = float(grid[r1, c1])
    top = v00 * (1.0 - fc) + v01 * fc
    bottom = v10 * (1.0 - fc) + v11 * fc
    return top * (1.0 - fr) + bottom * fr, True


@njit(cache=True, parallel=True)
def sample_cells(grid, rows, cols, out_values, out_valid):
    """Vectorized sample_cell over flat coordinate arrays."""
    for i in prange(rows.shape[0]):
        value, inside = sample_cell(grid, rows[i], cols[i])
        out_values[i] = value
        out_valid[i] = inside


@njit(cache=True, parallel=True)
def sample_patches(cost, origin_x, origin_y, resolution, poses, forward, left, out_values, out_valid):
    """
    Sample egocentric patches for a batch of poses.

        Args:
            cost (numpy.ndarray (H, W)): map raster
            origin_x, origin_y (float): world coordinates of cell (0, 0)
            resolution (float): cells per meter
            poses (numpy.ndarray (N, >=3)): p_x, p_y, psi in the first three columns
            forward, left (numpy.ndarray (P, )): pixel-center offsets in the vehicle frame
            out_values (numpy.ndarray (N, P)): sampled costs
            out_valid (numpy.ndarray (N, P)): inside-map flags
    """
    n = poses.shape[0]
    p = forward.shape[0]
    for i in prange(n):
        px = poses[i, 0]
        py = poses[i, 1]
        c = math.cos(poses[i, 2])
        s = math.sin(poses[i, 2])
        for j in range(p):
            x = px + forward[j] * c - left[j] * s
            y = py + forward[j] * s + left[j] * c
            value, inside = sample_cell(cost, (y - origin_y) * resolution, (x - origin_x) * resolution)
            out_values[i, j] = value
            out_valid[i, j] = inside


@njit(cache=True, parallel=True)
def patch_mae(cost, origin_x, origin_y, resolution, poses, forward, left, observed, observed_valid, out_mae):
    """
    Mean absolute error between each pose's expected patch and one observation.

    Pixels outside the map or without an observation are skipped; a pose with
    no usable pixel gets the worst-case error 1.
    """
    n = poses.shape[0]
    p = forward.shape[0]
    for i in prange(n):
        px = poses[i, 0]
        py = poses[i, 1]
        c = math.cos(poses[i, 2])
        s = math.sin(poses[i, 2])
        total = 0.0
        count = 0
        for j in range(p):
            if not observed_valid[j]:
                continue
            x = px + forward[j] * c - left[j] * s
            y = py + forward[j] * s + left[j] * c
            value, inside = sample_cell(cost, (y - origin_y) * resolution, (x - origin_x) * resolution)
            if inside:
                total += abs(value - observed[j])
                count += 1
        if count > 0:
            out_mae[i] = total / count
        else:
            out_mae[i] = 1.0


@njit(cache=True)
def bicycle_step(x, y, psi, vx, vy, r, steering, throttle, dt, params):
    """
    One semi-implicit Euler step of the dynamic bicycle model.

    Below the kinematic speed the lateral states follow the kinematic bicycle
    so the slip-angle terms stay well defined near standstill. Braking never
    reverses the vehicle.

        Args:
            x, y, psi (float): pose in the map frame
            vx, vy (float): body-frame velocities
            r (float): yaw rate
            steering, throttle (float): normalized commands in [-1, 1]
            dt (float): step length
            params (numpy.ndarray (12, )): VehicleParams.as_array()

        Returns:
            (x, y, psi, vx, vy, r) after the step
    """
    mass = params[P_MASS]
    lf = params[P_LF]
    lr = params[P_LR]
    wheelbase = lf + lr

    steering = min(max(steering, -1.0), 1.0)
    throttle = min(max(throttle, -1.0), 1.0)
    delta = steering * params[P_MAX_STEER]

    ax = params[P_GAIN] * throttle - params[P_DRAG1] * vx - params[P_DRAG2] * vx * abs(vx)

    if vx > params[P_KIN_SPEED]:
        load_front = mass * GRAVITY * lr / wheelbase
        load_rear = mass * GRAVITY * lf / wheelbase
        alpha_f = delta - math.atan2(vy + lf * r, vx)
        alpha_r = -math.atan2(vy - lr * r, vx)
        limit_f = params[P_MU] * load_front
        limit_r = params[P_MU] * load_rear
        fyf = min(max(params[P_CF] * alpha_f, -limit_f), limit_f)
        fyr = min(max(params[P_CR] * alpha_r, -limit_r), limit_r)

        dvx = ax - fyf * math.sin(delta) / mass + vy * r
        dvy = (fyr + fyf * math.cos(delta)) / mass - vx * r
        dr = (lf * fyf * math.cos(delta) - lr * fyr) / params[P_IZ]

        vx_next = vx + dvx * dt
        vy_next = vy + dvy * dt
        r_next = r + dr * dt
    else:
        vx_next = vx + ax * dt
        r_next = vx_next * math.tan(delta) / wheelbase
        vy_next = r_next * lr

    if vx_next < 0.0:
        vx_next = 0.0
        vy_next = 0.0
        r_next = 0.0

    psi_next = psi + r_next * dt
    c = math.cos(psi_next)
    s = math.sin(psi_next)
    x_next = x + (vx_next * c - vy_next * s) * dt
    y_next = y + (vx_next * s + vy_next * c) * dt
    return x_next, y_next, psi_next, vx_next, vy_next, r_next


@njit(cache=True, parallel=True)
def bicycle_batch(states, controls, dt, params, out):
    """Advance (K, 6) states by one step under (K, 2) controls."""
    for k in prange(states.shape[0]):
        x, y, psi, vx, vy, r = bicycle_step(
            states[k, 0],
            states[k, 1],
            states[k, 2],
            states[k, 3],
            states[k, 4],
            states[k, 5],
            controls[k, 0],
            controls[k, 1],
            dt,
            params,
        )
        out[k, 0] = x
        out[k, 1] = y
        out[k, 2] = psi
        out[k, 3] = vx
        out[k, 4] = vy
        out[k, 5] = r


def configure_threads(n_threads: int | None) -> None:
    if n_threads is not None:
        import numba

        numba.set_num_threads(min(n_threads, numba.config.NUMBA_NUM_THREADS))


def as_contiguous(array: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=dtype)
