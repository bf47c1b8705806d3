"""File formats: binary scan blobs (with CSV fallback), IMU CSV, TUM
trajectories, flat key=value configs and surfel dumps.

Scan blob layout (little endian):
    magic  'CTS1'            4 bytes
    t_end_ns                 int64
    rows, cols               uint32 each
    duration_ns              int64
    n_points                 uint32
    payload                  n * (float32 x, y, z + uint32 column)
Point capture times are reconstructed from the column model.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .compensation import point_time_ns
from .manifold import quat_wxyz_to_rot, rot_to_quat_wxyz
from .simulate import ScanData

MAGIC = b"CTS1"


def write_scan(path, scan: ScanData):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<qIIqI", scan.t_end_ns, scan.rows, scan.cols,
                            scan.duration_ns, len(scan.points)))
        buf = np.empty(len(scan.points), dtype=[("xyz", np.float32, 3), ("col", np.uint32)])
        buf["xyz"] = scan.points.astype(np.float32)
        buf["col"] = scan.column.astype(np.uint32)
        f.write(buf.tobytes())


def read_scan(path) -> ScanData:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a scan blob: {path}")
        t_end, rows, cols, dur, n = struct.unpack("<qIIqI", f.read(28))
        buf = np.frombuffer(f.read(), dtype=[("xyz", np.float32, 3), ("col", np.uint32)],
                            count=n)
    pts = buf["xyz"].astype(float)
    col = buf["col"].astype(np.uint32)
    times = point_time_ns(col, cols, t_end, dur)
    return ScanData(int(t_end), int(dur), int(rows), int(cols), pts, col, times)


def write_scan_csv(path, scan: ScanData):
    header = (f"# t_end_ns={scan.t_end_ns} rows={scan.rows} cols={scan.cols} "
              f"duration_ns={scan.duration_ns}\nx,y,z,column\n")
    with open(path, "w") as f:
        f.write(header)
        for p, c in zip(scan.points, scan.column):
            f.write(f"{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},{int(c)}\n")


def read_scan_csv(path) -> ScanData:
    with open(path) as f:
        meta = f.readline().strip().lstrip("#").split()
        kv = dict(item.split("=") for item in meta)
        f.readline()  # column header
        rows = []
        for line in f:
            rows.append([float(v) for v in line.strip().split(",")])
    arr = np.asarray(rows)
    t_end = int(kv["t_end_ns"])
    cols = int(kv["cols"])
    dur = int(kv["duration_ns"])
    col = arr[:, 3].astype(np.uint32)
    return ScanData(t_end, dur, int(kv["rows"]), cols, arr[:, :3], col,
                    point_time_ns(col, cols, t_end, dur))


def write_imu_csv(path, stream):
    with open(path, "w") as f:
        f.write("t_ns,wx,wy,wz,ax,ay,az\n")
        for t, w, a in zip(stream.t_ns, stream.gyr, stream.acc):
            f.write(f"{int(t)},{w[0]:.9g},{w[1]:.9g},{w[2]:.9g},"
                    f"{a[0]:.9g},{a[1]:.9g},{a[2]:.9g}\n")


def read_imu_csv(path):
    from .inertial import ImuStream
    data = np.genfromtxt(path, delimiter=",", names=True)
    t = data["t_ns"].astype(np.int64)
    gyr = np.stack([data["wx"], data["wy"], data["wz"]], axis=1)
    acc = np.stack([data["ax"], data["ay"], data["az"]], axis=1)
    return ImuStream(t, gyr, acc)


def write_tum(path, times_ns, poses):
    """TUM format: t tx ty tz qx qy qz qw (seconds, xyzw quaternion)."""
    with open(path, "w") as f:
        for t, pose in zip(times_ns, poses):
            q = rot_to_quat_wxyz(pose.rotation)
            p = pose.translation
            f.write(f"{t / 1e9:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                    f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n")


def read_tum(path):
    from .manifold import PoseSplit
    times = []
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            times.append(int(round(vals[0] * 1e9)))
            q = np.array([vals[7], vals[4], vals[5], vals[6]])  # wxyz
            poses.append(PoseSplit(quat_wxyz_to_rot(q), np.array(vals[1:4])))
    return np.asarray(times, dtype=np.int64), poses


# -- sequences ----------------------------------------------------------------

def write_sequence(out_dir, scans, stream, truth=None, fmt: str = "bin"):
    os.makedirs(out_dir, exist_ok=True)
    scan_dir = os.path.join(out_dir, "scans")
    os.makedirs(scan_dir, exist_ok=True)
    names = []
    for i, s in enumerate(scans):
        if fmt == "bin":
            name = f"scans/{i:06d}.bin"
            write_scan(os.path.join(out_dir, name), s)
        else:
            name = f"scans/{i:06d}.csv"
            write_scan_csv(os.path.join(out_dir, name), s)
        names.append(name)
    write_imu_csv(os.path.join(out_dir, "imu.csv"), stream)
    index = {"scans": names, "imu": "imu.csv", "format": fmt}
    if truth is not None:
        t_ns, poses = truth
        write_tum(os.path.join(out_dir, "truth.tum"), t_ns, poses)
        index["truth"] = "truth.tum"
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=1)


def read_sequence(seq_dir):
    with open(os.path.join(seq_dir, "index.json")) as f:
        index = json.load(f)
    reader = read_scan if index.get("format", "bin") == "bin" else read_scan_csv
    scans = [reader(os.path.join(seq_dir, name)) for name in index["scans"]]
    stream = read_imu_csv(os.path.join(seq_dir, index["imu"]))
    truth = None
    if "truth" in index:
        truth = read_tum(os.path.join(seq_dir, index["truth"]))
    return scans, stream, truth


# -- flat config ----------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Flat key = value lines with # comments; values coerced to
    bool/int/float when they parse as such."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if val.lower() in ("true", "false"):
            out[key] = val.lower() == "true"
            continue
        try:
            out[key] = int(val)
            continue
        except ValueError:
            pass
        try:
            out[key] = float(val)
            continue
        except ValueError:
            pass
        out[key] = val
    return out


def read_config(path) -> dict:
    with open(path) as f:
        return parse_config_text(f.read())


def write_config(path, cfg: dict):
    with open(path, "w") as f:
        for k, v in cfg.items():
            f.write(f"{k} = {v}\n")


def dump_spline_json(path, spline):
    with open(path, "w") as f:
        json.dump(spline.to_debug_dict(), f, indent=1)


def export_surfels_csv(path, tables):
    """ASCII surfel dump: cell size, mean, covariance upper triangle, normal,
    count, one row per surfel."""
    with open(path, "w") as f:
        f.write("cell_size,mx,my,mz,sxx,sxy,sxz,syy,syz,szz,nx,ny,nz,count\n")
        for tab in tables:
            normals = tab.normals() if len(tab) else np.zeros((0, 3))
            from .kernels import sym_l
            covs = sym_l(tab.cov8) if len(tab) else np.zeros((0, 3, 3))
            for i in range(len(tab)):
                S = covs[i]
                n = normals[i]
                m = tab.mean[i]
                f.write(f"{tab.cell_size},{m[0]:.6f},{m[1]:.6f},{m[2]:.6f},"
                        f"{S[0,0]:.8g},{S[0,1]:.8g},{S[0,2]:.8g},{S[1,1]:.8g},"
                        f"{S[1,2]:.8g},{S[2,2]:.8g},"
                        f"{n[0]:.6f},{n[1]:.6f},{n[2]:.6f},{int(tab.count[i])}\n")
