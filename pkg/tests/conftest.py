import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def write_pamap2_subject(path, activities, seconds_each=3.0, rate=100.0, seed=0, nan_rows=()):
    """Fake PAMAP2 protocol file: 54 whitespace-separated columns."""
    rng = np.random.default_rng(seed)
    rows = []
    t = 5.0
    for code in activities:
        for _ in range(int(seconds_each * rate)):
            row = rng.normal(size=54)
            row[0] = t
            row[1] = code
            row[2] = np.nan  # heart rate is mostly NaN in the real files
            rows.append(row)
            t += 1.0 / rate
    arr = np.array(rows)
    for r in nan_rows:
        arr[r, 44] = np.nan  # ankle gyro x
    np.savetxt(path, arr, fmt="%.6f")
    return arr


def write_wisdm_subject(root, sid, activities, seconds_each=2.0, rate=20.0, extra_lines=()):
    accel = root / "raw" / "phone" / "accel"
    gyro = root / "raw" / "phone" / "gyro"
    accel.mkdir(parents=True, exist_ok=True)
    gyro.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(int(sid))
    t0 = 1_000_000_000
    with open(accel / f"data_{sid}_accel_phone.txt", "w") as fa, open(gyro / f"data_{sid}_gyro_phone.txt", "w") as fg:
        for line in extra_lines:
            fa.write(line + "\n")
        for code in activities:
            n = int(seconds_each * rate)
            for i in range(n):
                ts = t0 + int(i * 1e9 / rate)
                a = rng.normal(size=3)
                g = rng.normal(size=3)
                fa.write(f"{sid},{code},{ts},{a[0]},{a[1]},{a[2]};\n")
                fg.write(f"{sid},{code},{ts + 1000},{g[0]},{g[1]},{g[2]};\n")
            t0 += int(1e12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
