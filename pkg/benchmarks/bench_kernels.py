"""Benchmark the compiled kernels against the pure-numpy fallback.

Run directly (``python benchmarks/bench_kernels.py``) or via
``surgscene bench``.  Covers the two hot paths: the fused per-mask
decode+BCE+Dice kernel that dominates training steps, and RLE
encode/decode that dominates dataset I/O.
"""

from __future__ import annotations

import time

import numpy as np

from surgscene.kernels import available_backends


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(5):
        start = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - start) / repeat)
    return best


def bench_fused_mask(backends: dict, repeat: int) -> dict[str, float]:
    rng = np.random.default_rng(0)
    grid = np.ascontiguousarray(rng.normal(size=(8, 8, 8)))
    w_mask = np.ascontiguousarray(rng.normal(size=(8, 8)))
    prompt = np.ascontiguousarray(rng.normal(size=8))
    fg = np.ascontiguousarray(rng.integers(0, 17, size=(8, 8)).astype(float))
    d_prompt = np.zeros(8)
    d_w = np.zeros((8, 8))
    results = {}
    for name, impl in backends.items():
        results[name] = _time(
            lambda impl=impl: impl.fused_mask_loss(
                grid, w_mask, 0.0, prompt, fg, 16.0, 1.0, 0.5, 1.0, d_prompt, d_w
            ),
            repeat,
        )
    return results


def bench_rle(backends: dict, repeat: int) -> dict[str, float]:
    rng = np.random.default_rng(1)
    mask = (rng.random(64 * 64) < 0.4).astype(np.uint8)
    flat = np.ascontiguousarray(mask)
    results = {}
    for name, impl in backends.items():
        counts = np.ascontiguousarray(impl.rle_encode(flat))

        def roundtrip(impl=impl, counts=counts):
            impl.rle_encode(flat)
            impl.rle_decode(counts, flat.size)

        results[name] = _time(roundtrip, repeat)
    return results


def main(repeat: int = 200) -> None:
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    for title, bench in (
        ("fused mask loss (8x8x8 grid, 32x32 mask)", bench_fused_mask),
        ("rle encode+decode (64x64 mask)", bench_rle),
    ):
        results = bench(backends, repeat)
        print(f"\n{title}")
        for name, seconds in results.items():
            print(f"  {name:10s} {seconds * 1e6:9.2f} us/call")
        if "compiled" in results and "python" in results:
            ratio = results["python"] / results["compiled"]
            print(f"  speedup    {ratio:9.2f}x (compiled vs python)")


if __name__ == "__main__":
    main()
