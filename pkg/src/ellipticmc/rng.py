"""Per-path random streams and the deterministic block scheduler.

Path ``i`` always draws from a Philox generator keyed by a SeedSequence
hash of ``(root_seed, i)``, in fixed chunks of CHUNK steps.  The noise a
path sees therefore depends only on the root seed and its index, never on
how paths are grouped into batches or threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import ndtr

CHUNK = 64
THREADS_ENV = "ELLIPTIC_MC_THREADS"


def path_generator(root_seed: int, path_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(root_seed) & ((1 << 64) - 1), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss))


class NoiseStreams:
    """Chunked normal/uniform draws for a set of path indices.

    Every chunk is one draw of CHUNK standard-normal (d+1)-vectors: the
    first d components are the Brownian increments, the last is mapped
    through the normal CDF to the uniform used by the Brownian-bridge test.
    """

    def __init__(self, root_seed: int, path_ids, d: int, coarsen: int = 1):
        self.path_ids = np.asarray(path_ids, dtype=np.int64)
        self.d = d
        self.coarsen = int(coarsen)
        self.gens = [path_generator(root_seed, i) for i in self.path_ids]
        self._alloc()

    def _alloc(self):
        self.coarsen = getattr(self, "coarsen", 1)
        self.buf = np.zeros((len(self.gens), CHUNK * self.coarsen, self.d + 1))
        if self.coarsen == 1:
            self.normals = self.buf[:, :, : self.d]
        else:
            self.normals = np.zeros((len(self.gens), CHUNK, self.d))
        self.uniforms = np.zeros((len(self.gens), CHUNK))
        # row views for per-step gathers (a row of buf carries d normals + 1 spare)
        if self.coarsen == 1:
            self.normals_flat = self.buf.reshape(-1, self.d + 1)
        else:
            self.normals_flat = self.normals.reshape(-1, self.d)
        self.uniforms_flat = self.uniforms.reshape(-1)
        self.chunk_index = -1

    def advance(self, chunk_index: int, live) -> None:
        """Draw chunk ``chunk_index`` for the streams flagged in ``live``."""
        if chunk_index != self.chunk_index + 1:
            raise RuntimeError("noise chunks must be drawn in order")
        self.chunk_index = chunk_index
        idx = np.flatnonzero(live)
        buf, gens = self.buf, self.gens
        for s in idx:
            gens[s].standard_normal(out=buf[s])
        if self.coarsen == 1:
            self.uniforms[idx] = ndtr(buf[idx, :, self.d])
            return
        # one coarse step = sum of `coarsen` fine increments, so runs at dt and
        # dt / coarsen are driven by the same Brownian path
        c = self.coarsen
        z = buf[idx].reshape(idx.size, CHUNK, c, self.d + 1)
        self.normals[idx] = z[:, :, :, : self.d].sum(axis=2) / np.sqrt(c)
        self.uniforms[idx] = ndtr(z[:, :, 0, self.d])

    def step_draws(self, r: int, sid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Normals (m, d) and uniforms (m,) of step ``r`` of the current chunk."""
        flat = sid * CHUNK + r
        rows = np.take(self.normals_flat, flat, axis=0)
        return rows[:, : self.d], np.take(self.uniforms_flat, flat)


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        return max(1, int(raw))
    return max(1, min(os.cpu_count() or 1, 8))


def path_blocks(n_paths: int, workers: int, paths_per_block: int | None = None) -> list[tuple[int, int]]:
    """Contiguous [start, stop) path ranges; only performance depends on the split."""
    n_blocks = max(1, workers)
    if paths_per_block:
        n_blocks = max(n_blocks, -(-n_paths // paths_per_block))
    n_blocks = min(n_blocks, max(1, n_paths))
    edges = np.linspace(0, n_paths, n_blocks + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_blocks(fn, blocks, workers: int | None = None) -> list:
    """Run ``fn(start, stop)`` over blocks; results come back in block order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(blocks) <= 1:
        return [fn(a, b) for a, b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), blocks))
