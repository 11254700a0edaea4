"""Learned factorized entropy model: one scalar CDF per (binary level, channel).

Each CDF is a stack of tiny monotone layers ``h -> H h + b`` followed by
``h + tanh(a) * tanh(h)``, with a final sigmoid.  Matrices are reparameterized
through softplus (positive entries) and the modulations through tanh (inside
(-1, 1)), so every reachable parameter setting yields a nondecreasing CDF with
range (0, 1).  The default hidden widths (3, 3) put exactly 28 free parameters
in each (level, channel) model.

The bit-rate proxy is the cross entropy -sum(log2 p(u)) with
``p(u) = CDF(u + 1/2) - CDF(u - 1/2)``.  Training evaluates it on noisy
coefficients; nothing here is ever written to a bitstream (inference coding is
backward adaptive), but the parameter count feeds side-information accounting.

Parameters are stored float64; evaluation runs in the dtype of the coefficient
matrix, so the training hot path can use float32 while gradient certification
stays in float64.
"""

from __future__ import annotations

import numpy as np

__all__ = ["FactorizedCdf", "level_groups", "rate_bits"]

DEFAULT_WIDTHS = (3, 3)
INIT_SCALE = 10.0
INFERENCE_PROB_FLOOR = 2.0 ** -15


def _tanh(x):
    if x.dtype == np.float32:
        return np.tanh(x)  # vectorized in float32
    # exp-based form; much faster than np.tanh for float64
    t = np.exp(-2.0 * np.abs(x))
    out = (1.0 - t) / (1.0 + t)
    return np.copysign(out, x)


def _sigmoid(x):
    t = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + t)
    return np.where(x >= 0, pos, 1.0 - pos)


def _softplus(x):
    return np.logaddexp(0.0, x)


class FactorizedCdf:
    """Bank of per-(level, channel) CDF models sharing one architecture.

    Parameters live in one flat float64 vector (``theta``) so the optimizer
    can treat them uniformly; shaped views are cut from it per level.
    """

    def __init__(self, levels, channels: int, widths=DEFAULT_WIDTHS, seed: int = 0):
        self.levels = [int(l) for l in levels]
        if len(set(self.levels)) != len(self.levels):
            raise ValueError("duplicate levels")
        self.channels = int(channels)
        self.widths = tuple(int(w) for w in widths)
        self.dims = (1,) + self.widths + (1,)
        self._nlayers = len(self.dims) - 1
        self._per_model = sum(
            self.dims[k + 1] * self.dims[k]  # matrix
            + self.dims[k + 1]  # bias
            + (self.dims[k + 1] if k < self._nlayers - 1 else 0)  # modulation
            for k in range(self._nlayers)
        )
        self.theta = np.empty(len(self.levels) * self.channels * self._per_model)
        self._level_index = {l: i for i, l in enumerate(self.levels)}
        self._init_params(seed)

    # -- parameter layout ---------------------------------------------------

    def params_per_model(self) -> int:
        return self._per_model

    def parameter_count(self) -> int:
        """Exact number of free parameters across all (level, channel) models."""
        return self.theta.size

    def _slabs(self, level: int, source: np.ndarray):
        """Shaped views (mats, biases, mods) into ``source`` for one level."""
        li = self._level_index[level]
        C = self.channels
        off = li * C * self._per_model
        mats, biases, mods = [], [], []
        for k in range(self._nlayers):
            r_in, r_out = self.dims[k], self.dims[k + 1]
            mats.append(source[off : off + C * r_out * r_in].reshape(C, r_out, r_in))
            off += C * r_out * r_in
            biases.append(source[off : off + C * r_out].reshape(C, r_out))
            off += C * r_out
            if k < self._nlayers - 1:
                mods.append(source[off : off + C * r_out].reshape(C, r_out))
                off += C * r_out
            else:
                mods.append(None)
        return mats, biases, mods

    def _eval_slabs(self, level: int, dtype):
        """Per-level layer constants in evaluation dtype: softplus'd matrices,
        biases, tanh'd modulations (all small)."""
        mats, biases, mods = self._slabs(level, self.theta)
        hp = [_softplus(m).astype(dtype) for m in mats]
        bs = [b.astype(dtype) for b in biases]
        am = [None if a is None else _tanh(a).astype(dtype) for a in mods]
        return hp, bs, am

    def _init_params(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([0x1F5C, seed]))
        scale = INIT_SCALE ** (1.0 / self._nlayers)
        for level in self.levels:
            mats, biases, mods = self._slabs(level, self.theta)
            for k in range(self._nlayers):
                r_out = self.dims[k + 1]
                # softplus(raw) == 1 / (scale * r_out); wide, smooth initial CDF
                mats[k][...] = np.log(np.expm1(1.0 / (scale * r_out)))
                biases[k][...] = rng.uniform(-0.5, 0.5, size=biases[k].shape)
                if mods[k] is not None:
                    mods[k][...] = 0.0

    # -- evaluation ----------------------------------------------------------

    def _logits(self, level: int, x, stash=None):
        """Monotone pre-sigmoid map; x is (C, m) samples per channel.

        The layer widths are tiny (3 at most), so the chain is evaluated as
        explicit per-unit elementwise operations on (C, m) arrays rather than
        batched matmuls; that keeps the hot path memory-lean.
        """
        hp, bs, am = self._eval_slabs(level, x.dtype)
        h = [x]
        for k in range(self._nlayers):
            r_in, r_out = self.dims[k], self.dims[k + 1]
            mat, bias, mod = hp[k], bs[k], am[k]
            out = []
            ts = []
            for j in range(r_out):
                acc = mat[:, j, 0][:, None] * h[0]
                for i in range(1, r_in):
                    acc += mat[:, j, i][:, None] * h[i]
                acc += bias[:, j][:, None]
                if mod is not None:
                    t = _tanh(acc)
                    ts.append(t)
                    acc += mod[:, j][:, None] * t
                out.append(acc)
            if stash is not None:
                stash.append((h, ts))
            h = out
        return h[0]

    def cdf(self, level: int, channel: int, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        grid = np.zeros((self.channels, x.shape[0]))
        grid[channel] = x
        return _sigmoid(self._logits(level, grid))[channel]

    def pmf(self, level: int, channel: int, u) -> np.ndarray:
        """p(u) = CDF(u + 1/2) - CDF(u - 1/2), evaluated stably in the tails."""
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        grid = np.zeros((self.channels, u.shape[0]))
        grid[channel] = u
        up = self._logits(level, grid + 0.5)[channel]
        lo = self._logits(level, grid - 0.5)[channel]
        sign = -np.sign(up + lo)
        return np.abs(_sigmoid(sign * up) - _sigmoid(sign * lo))

    # -- rate proxy with hand-written adjoints --------------------------------

    def rate_forward(self, U: np.ndarray, groups, floor: float | None = None):
        """Bits to code the rows of U under the per-level models.

        ``groups`` is a list of (level, row_slice) pairs covering U's rows
        (see :func:`level_groups`).  Returns (bits, stash) where the stash
        feeds :meth:`rate_backward`.
        """
        U = np.asarray(U)
        bits = 0.0
        stash = []
        inv_ln2 = 1.0 / np.log(2.0)
        for level, rows in groups:
            if level not in self._level_index:
                raise ValueError(f"no entropy model for level {level}")
            block = U[rows]  # (m, C)
            m = block.shape[0]
            if m == 0:
                stash.append(None)
                continue
            x = np.ascontiguousarray(block.T)  # (C, m)
            # evaluate both interval edges in one chain pass
            edges = np.concatenate([x + 0.5, x - 0.5], axis=1)  # (C, 2m)
            chain: list = []
            logits = self._logits(level, edges, chain)
            up, lo = logits[:, :m], logits[:, m:]
            sign = -np.sign(up + lo)
            su = _sigmoid(sign * up)
            sl = _sigmoid(sign * lo)
            pmf = np.abs(su - sl)
            # denormal guard keeps an underflowed tail from producing inf bits
            eff = np.maximum(pmf, floor if floor is not None else float(np.finfo(pmf.dtype).tiny))
            bits -= float(np.sum(np.log(eff), dtype=np.float64)) * inv_ln2
            stash.append((level, rows, m, su, sl, pmf, eff, chain))
        return bits, stash

    def rate_backward(self, stash, upstream: float = 1.0):
        """Gradients of (upstream * bits) w.r.t. U rows and theta."""
        dtheta = np.zeros_like(self.theta)
        inv_ln2 = 1.0 / np.log(2.0)
        pieces = []
        for item in stash:
            if item is None:
                pieces.append(None)
                continue
            level, rows, m, su, sl, pmf, eff, chain = item
            # d(-log2 eff)/dpmf, zero where the floor clamps or pmf underflows
            dpmf = np.where((pmf >= eff) & (pmf > 0.0), -upstream * inv_ln2 / eff, 0.0)
            dpmf = dpmf.astype(su.dtype, copy=False)
            dedges = np.concatenate([dpmf * (su * (1.0 - su)), -dpmf * (sl * (1.0 - sl))], axis=1)
            dx = self._logits_backward(level, dedges, chain, dtheta)
            pieces.append((rows, (dx[:, :m] + dx[:, m:]).T))  # back to (m, C)
        return pieces, dtheta

    def _logits_backward(self, level: int, dout, chain, dtheta) -> np.ndarray:
        """Backprop a (C, n) gradient through the logit chain; accumulates
        float64 theta gradients in place; returns the input gradient."""
        hp, _, am = self._eval_slabs(level, dout.dtype)
        mats, _, mods = self._slabs(level, self.theta)
        dmats, dbiases, dmods = self._slabs(level, dtheta)
        g = [dout]
        for k in range(self._nlayers - 1, -1, -1):
            r_in, r_out = self.dims[k], self.dims[k + 1]
            h, ts = chain[k]
            mat, mod = hp[k], am[k]
            dlin = []
            for j in range(r_out):
                if mod is not None:
                    t = ts[j]
                    dl = g[j] * (1.0 + mod[:, j][:, None] * (1.0 - t * t))
                    da = np.sum(g[j] * t, axis=1, dtype=np.float64)
                    a64 = mod[:, j].astype(np.float64)
                    dmods[k][:, j] += da * (1.0 - a64 * a64)
                else:
                    dl = g[j]
                dlin.append(dl)
                dbiases[k][:, j] += np.sum(dl, axis=1, dtype=np.float64)
                for i in range(r_in):
                    dmats[k][:, j, i] += np.sum(dl * h[i], axis=1, dtype=np.float64) * _sigmoid(
                        mats[k][:, j, i]
                    )
            g_in = []
            for i in range(r_in):
                acc = mat[:, 0, i][:, None] * dlin[0]
                for j in range(1, r_out):
                    acc += mat[:, j, i][:, None] * dlin[j]
                g_in.append(acc)
            g = g_in
        return g[0]


def level_groups(row_levels: np.ndarray):
    """Group row indices by level, preserving order; contiguous runs become
    slices so the canonical level-major layout costs nothing to regroup."""
    row_levels = np.asarray(row_levels)
    groups = []
    if row_levels.size == 0:
        return groups
    boundaries = np.flatnonzero(np.diff(row_levels)) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [row_levels.size]))
    seen = set()
    for s, e in zip(starts, stops):
        lvl = int(row_levels[s])
        if lvl in seen:
            # non-contiguous labels: fall back to index arrays
            return _level_groups_scattered(row_levels)
        seen.add(lvl)
        groups.append((lvl, slice(int(s), int(e))))
    return groups


def _level_groups_scattered(row_levels: np.ndarray):
    return [(int(l), np.flatnonzero(row_levels == l)) for l in np.unique(row_levels)]


def rate_bits(model: FactorizedCdf, U: np.ndarray, row_levels, floor: float | None = None) -> float:
    """Cross-entropy bits for coefficient rows labeled with their binary level."""
    U = np.asarray(U)
    if U.shape[0] == 0:
        return 0.0
    bits, _ = model.rate_forward(U, level_groups(row_levels), floor=floor)
    return bits
