"""Finite-difference forward solver for the 2D acoustic wave equation with a
heterogeneous sound-speed field.

Synthesizes the wavefield snapshot stacks used as ground truth by the
inverse solver: u_tt = v(x,y)^2 (u_xx + u_yy) on a regular grid, second-order
central differences in space and time, additive tone-burst sources, sponge
absorbing layers, optional low-speed crack inclusions and measurement noise.

Units: mm, microseconds, so speeds are mm/us and frequencies MHz.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import (
    CflViolationError,
    FormatError,
    NumericalBlowupError,
    ShapeError,
    TruncatedFileError,
)

__all__ = [
    "Grid2D",
    "SpeedField",
    "SourceSpec",
    "WavefieldDataset",
    "uniform_field",
    "make_crack_field",
    "tone_burst_samples",
    "solve_wave",
    "add_noise",
    "measure_plane_wave_speed",
    "energy_series",
    "write_dataset",
    "read_dataset",
    "write_dataset_csv",
    "DESK_GRID",
    "PAPER_GRID",
    "desk_source",
    "paper_source",
    "DESK_CRACK_RECT",
    "SPONGE_WIDTH",
]

WFD_MAGIC = b"WFDATA01"
SPONGE_WIDTH = 10            # cells
_SPONGE_COEF = 0.05          # Cerjan damping strength per layer cell


@dataclass(frozen=True)
class Grid2D:
    """Regular space-time acquisition grid. x varies along axis -1 of a
    snapshot, y along axis -2; snapshot k is at time k*dt."""

    nx: int
    ny: int
    dx: float
    dy: float
    nt: int
    dt: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.nt < 1:
            raise ValueError("grid dimensions must be positive")
        if self.dx <= 0 or self.dy <= 0 or self.dt <= 0:
            raise ValueError("grid spacings must be positive")

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + self.dx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + self.dy * np.arange(self.ny)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.nt)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) of grid node centers."""
        return (
            self.origin[0],
            self.origin[0] + self.dx * (self.nx - 1),
            self.origin[1],
            self.origin[1] + self.dy * (self.ny - 1),
        )


@dataclass
class SpeedField:
    """Sound speed per grid node (mm/us) plus the nominal background value."""

    values: np.ndarray
    background: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("speed field must be a 2-D array")
        if not np.all(self.values > 0):
            raise ValueError("all speeds must be positive")
        if not (self.values.min() <= self.background <= self.values.max()):
            raise ValueError("background speed must lie within the field's range")


@dataclass(frozen=True)
class SourceSpec:
    """Tone-burst excitation.

    incidence_angle selects a line source radiating a plane wave whose wave
    vector makes that angle (degrees, measured from the x axis toward y)
    with the x axis: 0 propagates along +x, 90 along +y, 45 diagonally.
    incidence_angle=None gives a point source at `position`.
    """

    center_frequency: float
    cycles: int = 5
    position: tuple[float, float] = (0.0, 0.0)
    incidence_angle: Optional[float] = None
    amplitude: float = 1.0

    def __post_init__(self):
        if self.center_frequency <= 0:
            raise ValueError("center_frequency must be positive")
        if self.cycles < 1:
            raise ValueError("cycles must be a positive integer")


@dataclass
class WavefieldDataset:
    """Stack of out-of-plane displacement snapshots u[t, y, x] with metadata."""

    grid: Grid2D
    snapshots: np.ndarray
    true_speed: Optional[SpeedField] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.snapshots = np.asarray(self.snapshots, dtype=np.float64)
        expected = (self.grid.nt, self.grid.ny, self.grid.nx)
        if self.snapshots.shape != expected:
            raise ShapeError(
                f"snapshot stack shape {self.snapshots.shape} != grid shape {expected}"
            )
        if not np.isfinite(self.snapshots).all():
            raise ValueError("snapshots contain non-finite values")


def uniform_field(grid: Grid2D, speed: float) -> SpeedField:
    if speed <= 0:
        raise ValueError("speed must be positive")
    return SpeedField(np.full((grid.ny, grid.nx), float(speed)), float(speed))


def make_crack_field(
    grid: Grid2D,
    background_speed: float,
    crack_rect: tuple[float, float, float, float],
    crack_speed: float,
) -> SpeedField:
    """Background speed everywhere except a low-speed axis-aligned rectangle.

    crack_rect is (x_min, y_min, width, height) in mm. The one-cell ring
    around the rectangle is set to the midpoint speed so the coefficient
    ramps instead of jumping.
    """
    if background_speed <= 0 or crack_speed <= 0:
        raise ValueError("speeds must be positive")
    if crack_speed >= background_speed:
        raise ValueError("crack speed must be strictly below the background speed")
    rx, ry, rw, rh = (float(v) for v in crack_rect)
    if rw <= 0 or rh <= 0:
        raise ValueError("crack rectangle must have positive area")
    x_min, x_max, y_min, y_max = grid.extent
    if rx < x_min or ry < y_min or rx + rw > x_max or ry + rh > y_max:
        raise ValueError("crack rectangle extends outside the grid")

    xs = grid.x
    ys = grid.y
    in_x = (xs >= rx) & (xs <= rx + rw)
    in_y = (ys >= ry) & (ys <= ry + rh)
    mask = np.outer(in_y, in_x)
    if not mask.any():
        raise ValueError("crack rectangle does not cover any grid node")

    values = np.full((grid.ny, grid.nx), float(background_speed))
    ring = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool)) & ~mask
    values[ring] = 0.5 * (background_speed + crack_speed)
    values[mask] = crack_speed
    return SpeedField(values, float(background_speed))


def tone_burst_samples(dt: float, n: int, frequency: float, cycles: int,
                       amplitude: float = 1.0) -> np.ndarray:
    """Hann-windowed sine burst sampled at dt, length n, zeros after the
    burst. The burst samples are recentred to exactly zero mean."""
    t = dt * np.arange(n)
    duration = cycles / frequency
    active = t < duration
    s = np.zeros(n)
    win = 0.5 * (1.0 - np.cos(2.0 * np.pi * t[active] / duration))
    s[active] = amplitude * win * np.sin(2.0 * np.pi * frequency * t[active])
    if active.any() and amplitude != 0.0:
        s[active] -= s[active].mean()
    return s


def _source_mask(grid: Grid2D, source: SourceSpec) -> np.ndarray:
    """Boolean (ny, nx) mask of injection nodes."""
    if source.incidence_angle is None:
        ix = int(round((source.position[0] - grid.origin[0]) / grid.dx))
        iy = int(round((source.position[1] - grid.origin[1]) / grid.dy))
        if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
            raise ValueError(f"source position {source.position} outside the grid")
        mask = np.zeros((grid.ny, grid.nx), bool)
        mask[iy, ix] = True
        return mask
    theta = np.deg2rad(source.incidence_angle)
    k_hat = np.array([np.cos(theta), np.sin(theta)])
    xx, yy = np.meshgrid(grid.x, grid.y)
    proj = (xx - source.position[0]) * k_hat[0] + (yy - source.position[1]) * k_hat[1]
    half = 0.5 * max(grid.dx, grid.dy) * max(abs(k_hat[0]), abs(k_hat[1]), 1e-12)
    mask = np.abs(proj) <= half + 1e-12
    if not mask.any():
        raise ValueError("line source does not intersect the grid")
    return mask


def _sponge_profile(grid: Grid2D, width: int) -> np.ndarray:
    """Per-step multiplicative damping mask, 1 in the interior."""
    gx = np.ones(grid.nx)
    gy = np.ones(grid.ny)
    for arr in (gx, gy):
        n = arr.shape[0]
        for i in range(min(width, n)):
            g = np.exp(-((_SPONGE_COEF * (width - i)) ** 2))
            arr[i] = min(arr[i], g)
            arr[n - 1 - i] = min(arr[n - 1 - i], g)
    return np.outer(gy, gx)


def _laplacian(u: np.ndarray, dx: float, dy: float, free: bool) -> np.ndarray:
    pad_mode = "edge" if free else "constant"
    up = np.pad(u, 1, mode=pad_mode)
    return (
        (up[1:-1, 2:] - 2.0 * u + up[1:-1, :-2]) / (dx * dx)
        + (up[2:, 1:-1] - 2.0 * u + up[:-2, 1:-1]) / (dy * dy)
    )


def max_stable_dt(speed: SpeedField, grid: Grid2D) -> float:
    vmax = float(speed.values.max())
    return 1.0 / (vmax * np.sqrt(1.0 / grid.dx ** 2 + 1.0 / grid.dy ** 2))


def solve_wave(
    speed: SpeedField,
    grid: Grid2D,
    source: SourceSpec,
    boundary: str = "absorbing",
    substeps: int = 1,
    initial_displacement: Optional[np.ndarray] = None,
) -> WavefieldDataset:
    """Propagate the wavefield and return the recorded snapshot stack.

    The solver advances `substeps` internal steps of dt/substeps per recorded
    frame, so acquisition intervals coarser than the stability limit stay
    usable. A tone burst is injected additively at the source nodes; with
    `initial_displacement` the run starts from that field at rest (u_t = 0).
    """
    if speed.values.shape != (grid.ny, grid.nx):
        raise ShapeError(
            f"speed field shape {speed.values.shape} != grid ({grid.ny}, {grid.nx})"
        )
    if boundary not in ("absorbing", "free"):
        raise ValueError("boundary must be 'absorbing' or 'free'")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")

    dt_s = grid.dt / substeps
    vmax = float(speed.values.max())
    courant = vmax * dt_s * np.sqrt(1.0 / grid.dx ** 2 + 1.0 / grid.dy ** 2)
    if courant > 1.0:
        admissible = max_stable_dt(speed, grid) * substeps
        raise CflViolationError(
            f"CFL violated: v_max={vmax:g} mm/us with dt={grid.dt:g} us gives "
            f"Courant number {courant:.3f} > 1; largest admissible dt is "
            f"{admissible:.6g} us (or raise substeps)"
        )
    ppw = speed.background / (source.center_frequency * max(grid.dx, grid.dy))
    if ppw < 8.0:
        warnings.warn(
            f"only {ppw:.1f} grid points per wavelength at {source.center_frequency:g} MHz; "
            "expect visible numerical dispersion",
            stacklevel=2,
        )

    free = boundary == "free"
    v2 = speed.values ** 2
    mask = _source_mask(grid, source)
    wavelet = tone_burst_samples(dt_s, (grid.nt - 1) * substeps + 1,
                                 source.center_frequency, source.cycles,
                                 source.amplitude)
    damp = None if free else _sponge_profile(grid, SPONGE_WIDTH)

    if initial_displacement is not None:
        u = np.array(initial_displacement, dtype=np.float64)
        if u.shape != (grid.ny, grid.nx):
            raise ShapeError("initial displacement shape does not match the grid")
        # start from rest: u^{-1} = u^0 + (v dt)^2/2 * Lap(u^0)
        u_prev = u + 0.5 * (dt_s ** 2) * v2 * _laplacian(u, grid.dx, grid.dy, free)
    else:
        u = np.zeros((grid.ny, grid.nx))
        u_prev = np.zeros_like(u)

    snaps = np.empty((grid.nt, grid.ny, grid.nx))
    snaps[0] = u
    dt2 = dt_s ** 2
    step = 0
    for k in range(1, grid.nt):
        for _ in range(substeps):
            lap = _laplacian(u, grid.dx, grid.dy, free)
            u_next = 2.0 * u - u_prev + dt2 * v2 * lap
            if wavelet[step] != 0.0:
                u_next[mask] += dt2 * wavelet[step]
            if damp is not None:
                u_next *= damp
                u *= damp
            u_prev, u = u, u_next
            step += 1
            if not np.isfinite(u).all():
                raise NumericalBlowupError(step)
        snaps[k] = u

    provenance = {
        "generator": "wavepinn.wavegen.solve_wave",
        "source": {
            "center_frequency": source.center_frequency,
            "cycles": source.cycles,
            "position": list(source.position),
            "incidence_angle": source.incidence_angle,
            "amplitude": source.amplitude,
        },
        "boundary": boundary,
        "substeps": substeps,
    }
    return WavefieldDataset(grid=grid, snapshots=snaps, true_speed=speed,
                            provenance=provenance)


def add_noise(dataset: WavefieldDataset, snr_db: Optional[float],
              seed: int = 0) -> WavefieldDataset:
    """Additive Gaussian noise scaled to the requested dataset-wide SNR.

    The realized noise vector is rescaled so the empirical SNR equals snr_db
    exactly. snr_db=None (or +inf) returns an identical copy.
    """
    if snr_db is None or np.isposinf(snr_db):
        return WavefieldDataset(dataset.grid, dataset.snapshots.copy(),
                                dataset.true_speed, dict(dataset.provenance))
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite (or None for no noise)")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(dataset.snapshots.shape)
    signal_power = float(np.mean(dataset.snapshots ** 2))
    if signal_power == 0.0:
        raise ValueError("cannot set an SNR on an all-zero dataset")
    target_power = signal_power / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(target_power / np.mean(noise ** 2))
    provenance = dict(dataset.provenance)
    provenance["noise"] = {"snr_db": float(snr_db), "seed": int(seed)}
    return WavefieldDataset(dataset.grid, dataset.snapshots + noise,
                            dataset.true_speed, provenance)


def measure_plane_wave_speed(
    dataset: WavefieldDataset,
    x_lo: float,
    x_hi: float,
    y: float,
    frequency: float,
    cycles: int,
) -> float:
    """Estimate the propagation speed of a +x-traveling wave packet from the
    recorded snapshots, independent of the solver internals.

    For every receiver on the line y=const between x_lo and x_hi, the direct
    packet is located by its analytic-signal envelope peak, time-gated, and
    its spectral phase at the carrier frequency extracted; the phase slope
    over x gives the wavenumber and hence the phase velocity.
    """
    from scipy.signal import hilbert

    g = dataset.grid
    ixs = np.arange(int(round((x_lo - g.origin[0]) / g.dx)),
                    int(round((x_hi - g.origin[0]) / g.dx)) + 1)
    if len(ixs) < 4:
        raise ValueError("need at least four receivers for the phase fit")
    xs = g.origin[0] + ixs * g.dx
    iy = int(round((y - g.origin[1]) / g.dy))
    burst = cycles / frequency
    freqs = np.fft.rfftfreq(g.nt, g.dt)
    jf = int(np.argmin(np.abs(freqs - frequency)))
    phases = np.empty(len(ixs))
    for m, ix in enumerate(ixs):
        tr = dataset.snapshots[:, iy, ix]
        env = np.abs(hilbert(tr))
        peak_t = g.t[int(env.argmax())]
        gated = tr * ((g.t > peak_t - 0.75 * burst) & (g.t < peak_t + 0.75 * burst))
        phases[m] = np.angle(np.fft.rfft(gated)[jf])
    slope = np.polyfit(xs, np.unwrap(phases), 1)[0]
    return -2.0 * np.pi * frequency / slope


def energy_series(dataset: WavefieldDataset, margin: int = SPONGE_WIDTH + 2) -> np.ndarray:
    """Discrete energy proxy per interior snapshot: sum of u_t^2 + v^2 |grad u|^2
    over the region `margin` cells in from every edge. Length nt - 2."""
    g = dataset.grid
    u = dataset.snapshots
    v2 = (dataset.true_speed.values ** 2 if dataset.true_speed is not None
          else np.ones((g.ny, g.nx)))
    sl = np.s_[margin:-margin, margin:-margin]
    out = np.empty(g.nt - 2)
    for k in range(1, g.nt - 1):
        ut = (u[k + 1] - u[k - 1]) / (2.0 * g.dt)
        gy, gx = np.gradient(u[k], g.dy, g.dx)
        dens = ut ** 2 + v2 * (gx ** 2 + gy ** 2)
        out[k - 1] = dens[sl].sum() * g.dx * g.dy
    return out


# ---------------------------------------------------------------------------
# WFD container
# ---------------------------------------------------------------------------

def write_dataset(dataset: WavefieldDataset, path) -> None:
    """Write the WFD container: magic, length-prefixed JSON header, snapshot
    payload in (t, y, x) order, then the speed payload when present."""
    g = dataset.grid
    header = {
        "nx": g.nx, "ny": g.ny, "nt": g.nt,
        "dx": g.dx, "dy": g.dy, "dt": g.dt,
        "x0": g.origin[0], "y0": g.origin[1],
        "has_speed": dataset.true_speed is not None,
        "provenance": dataset.provenance,
    }
    if dataset.true_speed is not None:
        header["background"] = dataset.true_speed.background
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WFD_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(dataset.snapshots, dtype="<f8").tobytes())
        if dataset.true_speed is not None:
            fh.write(np.ascontiguousarray(dataset.true_speed.values, dtype="<f8").tobytes())


def read_dataset(path) -> WavefieldDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(WFD_MAGIC))
        if len(magic) < len(WFD_MAGIC):
            raise TruncatedFileError(f"{path}: file shorter than the magic prefix")
        if magic != WFD_MAGIC:
            raise FormatError(f"{path}: not a WFD container (magic {magic!r})")
        raw = fh.read(4)
        if len(raw) < 4:
            raise TruncatedFileError(f"{path}: header length missing")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) < hlen:
            raise TruncatedFileError(f"{path}: header truncated")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc

        try:
            grid = Grid2D(
                nx=int(header["nx"]), ny=int(header["ny"]),
                dx=float(header["dx"]), dy=float(header["dy"]),
                nt=int(header["nt"]), dt=float(header["dt"]),
                origin=(float(header["x0"]), float(header["y0"])),
            )
            has_speed = bool(header["has_speed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: header missing or malformed fields: {exc}") from exc

        payload = fh.read()
    n_snap = grid.nt * grid.ny * grid.nx
    expected = n_snap * 8 + (grid.ny * grid.nx * 8 if has_speed else 0)
    if len(payload) != expected:
        raise ShapeError(
            f"{path}: header declares {expected} payload bytes "
            f"(nt={grid.nt}, ny={grid.ny}, nx={grid.nx}, has_speed={has_speed}) "
            f"but file carries {len(payload)}"
        )
    snaps = np.frombuffer(payload[:n_snap * 8], dtype="<f8").reshape(
        grid.nt, grid.ny, grid.nx).copy()
    speed = None
    if has_speed:
        values = np.frombuffer(payload[n_snap * 8:], dtype="<f8").reshape(
            grid.ny, grid.nx).copy()
        background = float(header.get("background", values.max()))
        speed = SpeedField(values, background)
    return WavefieldDataset(grid=grid, snapshots=snaps, true_speed=speed,
                            provenance=header.get("provenance", {}))


def write_dataset_csv(dataset: WavefieldDataset, dirpath) -> None:
    """One CSV per snapshot (rows = y, columns = x) plus a metadata sidecar."""
    out = Path(dirpath)
    out.mkdir(parents=True, exist_ok=True)
    g = dataset.grid
    width = len(str(g.nt - 1))
    for k in range(g.nt):
        np.savetxt(out / f"snapshot_{k:0{width}d}.csv", dataset.snapshots[k],
                   delimiter=",")
    if dataset.true_speed is not None:
        np.savetxt(out / "true_speed.csv", dataset.true_speed.values, delimiter=",")
    meta = {
        "nx": g.nx, "ny": g.ny, "nt": g.nt, "dx": g.dx, "dy": g.dy, "dt": g.dt,
        "x0": g.origin[0], "y0": g.origin[1], "provenance": dataset.provenance,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2))


# ---------------------------------------------------------------------------
# Canonical acquisition geometries
# ---------------------------------------------------------------------------

# Desk scale: runs in seconds, >=14 grid points per wavelength at 2.9 mm/us.
DESK_GRID = Grid2D(nx=60, ny=60, dx=0.2, dy=0.2, nt=600, dt=0.02)

# Full acquisition geometry: 12 mm x 12 mm at 50 um pitch, 1024 frames.
PAPER_GRID = Grid2D(nx=240, ny=240, dx=0.05, dy=0.05, nt=1024, dt=0.02)

# Default crack proxy on the desk grid: thin vertical low-speed strip.
DESK_CRACK_RECT = (5.5, 3.0, 1.0, 6.0)


def _line_source(grid: Grid2D, frequency: float, angle: float) -> SourceSpec:
    x_min, x_max, y_min, y_max = grid.extent
    inset_x = (SPONGE_WIDTH + 1) * grid.dx
    inset_y = (SPONGE_WIDTH + 1) * grid.dy
    if angle == 90.0:
        pos = (0.5 * (x_min + x_max), y_min + inset_y)
    elif angle == 45.0:
        pos = (x_min + inset_x, y_min + inset_y)
    else:
        pos = (x_min + inset_x, 0.5 * (y_min + y_max))
    return SourceSpec(center_frequency=frequency, cycles=5, position=pos,
                      incidence_angle=float(angle), amplitude=1.0)


def desk_source(angle: float = 0.0) -> SourceSpec:
    return _line_source(DESK_GRID, 1.0, angle)


def paper_source(angle: float = 0.0) -> SourceSpec:
    return _line_source(PAPER_GRID, 5.0, angle)
