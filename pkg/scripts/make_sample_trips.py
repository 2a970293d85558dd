"""Regenerate the bundled 10,000-row trip sample (deterministic).

Three 1 km x 1 km cells side by side near 40.75N, 73.99W; the third cell
is rarely visited so the region filter drops it. A few trips end outside
the grid to exercise the drop tally.
"""
import sys
from pathlib import Path

import numpy as np
import pandas as pd

LAT0, LON0 = 40.75, -73.99
KM_LAT = 1 / 111.32
KM_LON = 1 / (111.32 * np.cos(np.radians(LAT0)))


def main(out):
    rng = np.random.default_rng(2023)
    n = 10_000
    start = np.datetime64("2023-03-01T00:00")
    hours = int((np.datetime64("2023-07-01T00:00") - start) / np.timedelta64(1, "h"))
    # daily cycle: busier in the afternoon
    hour = np.arange(hours)
    rate = 1 + 0.8 * np.sin(2 * np.pi * (hour % 24 - 9) / 24)
    pick_hour = rng.choice(hours, size=n, p=rate / rate.sum())
    pick = start + pick_hour.astype("timedelta64[h]") + rng.integers(0, 3600, n).astype("timedelta64[s]")
    drop = pick + rng.integers(5 * 60, 40 * 60, n).astype("timedelta64[s]")

    cells = rng.choice(3, size=n, p=[0.55, 0.43, 0.02])
    drop_cells = np.where(rng.random(n) < 0.7, cells, rng.choice(3, size=n, p=[0.5, 0.48, 0.02]))

    def coords(c):
        lat = LAT0 + rng.uniform(0.05, 0.95, len(c)) * KM_LAT
        lon = LON0 + (c + rng.uniform(0.05, 0.95, len(c))) * KM_LON
        return lat, lon

    plat, plon = coords(cells)
    dlat, dlon = coords(drop_cells)
    outside = rng.random(n) < 0.01
    dlat[outside] += 5 * KM_LAT
    frame = pd.DataFrame({
        "pickup_datetime": pd.to_datetime(pick).strftime("%Y-%m-%dT%H:%M:%S"),
        "dropoff_datetime": pd.to_datetime(drop).strftime("%Y-%m-%dT%H:%M:%S"),
        "pickup_lat": plat.round(6), "pickup_lon": plon.round(6),
        "dropoff_lat": dlat.round(6), "dropoff_lon": dlon.round(6),
    }).sort_values("pickup_datetime", kind="stable")
    frame.to_csv(out, index=False)


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else
         Path(__file__).resolve().parents[1] / "src" / "trafficshift" / "data" / "sample_trips.csv")
