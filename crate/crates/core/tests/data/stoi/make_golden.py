"""Regenerates the STOI fixture pairs and their reference scores.

Signals are synthetic voiced/unvoiced sequences with pauses, degraded by
assorted noises and filters. Each pair is stored as 16-bit PCM WAV at 16 kHz;
the reference score is computed by pystoi on the quantized samples.

    python3 make_golden.py   # writes pairNN_{clean,degraded}.wav and golden.csv
"""
import csv
import os

import numpy as np
from pystoi import stoi
from scipy.io import wavfile
from scipy.signal import lfilter

FS = 16000
HERE = os.path.dirname(os.path.abspath(__file__))


def speechlike(rng, seconds):
    n = int(seconds * FS)
    t = np.arange(n) / FS
    f0 = rng.uniform(90, 220) * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t))
    phase = 2 * np.pi * np.cumsum(f0) / FS
    voiced = sum(np.sin(k * phase) / k for k in range(1, 25))
    env = np.clip(np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 6)), 0, None) ** 1.5
    # pauses
    gate = np.ones(n)
    for _ in range(3):
        s = rng.integers(0, n - 3000)
        gate[s:s + rng.integers(1000, 3000)] = 0.0
    gate[: int(0.2 * FS)] = 0.0
    x = voiced * env * gate
    b, a = [1.0], [1.0, -1.3, 0.6]
    x = lfilter(b, a, x) + 0.3 * rng.standard_normal(n) * env * gate * (rng.random(n) < 0.3)
    return 0.5 * x / np.max(np.abs(x))


def degrade(rng, x, kind, snr):
    n = len(x)
    if kind == "white":
        v = rng.standard_normal(n)
    elif kind == "pink":
        v = lfilter([0.049922035, -0.095993537, 0.050612699, -0.004408786],
                    [1, -2.494956002, 2.017265875, -0.522189400], rng.standard_normal(n))
    elif kind == "babble":
        v = sum(speechlike(rng, n / FS) for _ in range(4))
    else:
        v = np.sin(2 * np.pi * 120 * np.arange(n) / FS) + 0.5 * rng.standard_normal(n)
    v = v * np.sqrt(np.mean(x ** 2) / (np.mean(v ** 2) * 10 ** (snr / 10)))
    y = x + v
    if rng.random() < 0.3:
        y = lfilter([0.5, 0.5], [1.0], y)
    return y


def q16(x):
    return np.clip(np.round(x * 32768), -32768, 32767).astype(np.int16)


def main():
    rng = np.random.default_rng(20240611)
    kinds = ["white", "pink", "babble", "hum"]
    rows = []
    for i in range(20):
        x = speechlike(rng, rng.uniform(2.0, 3.0))
        y = degrade(rng, x, kinds[i % 4], rng.uniform(-10, 15))
        y = y / max(1.0, np.max(np.abs(y)) / 0.99)
        xi, yi = q16(x), q16(y)
        wavfile.write(os.path.join(HERE, f"pair{i:02d}_clean.wav"), FS, xi)
        wavfile.write(os.path.join(HERE, f"pair{i:02d}_degraded.wav"), FS, yi)
        ref = stoi(xi / 32768.0, yi / 32768.0, FS, extended=False)
        rows.append((f"pair{i:02d}", f"{ref:.10f}"))
    with open(os.path.join(HERE, "golden.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fixture_id", "stoi_reference"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
