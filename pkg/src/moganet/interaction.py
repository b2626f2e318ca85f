"""Multi-order game-theoretic interaction analysis.

The image is cut into a grid of n patches.  For a patch pair (i, j) and a
context subset S of the remaining patches, the second difference

    delta_f(i,j,S) = f(S u {i,j}) - f(S u {i}) - f(S u {j}) + f(S)

measures how much i and j interact on top of S, where f(S) is the log-odds
of the true class for the image with every patch outside S replaced by a
baseline value.  The order-m interaction I(i,j | m) is the expectation of
delta_f over size-m contexts; the per-order strength J normalizes the mean
absolute interaction so that its average over the evaluated orders is one.

Expectations over contexts are estimated either by Monte Carlo sampling or
by exhaustive enumeration (the brute-force oracle).  The MC path with the
``exhaustive`` flag walks the identical enumeration, making the two paths
bitwise comparable.

A scoring universe smaller than the full grid restricts which patches may
ever be toggled (everything outside the universe stays masked); this keeps
brute-force enumeration affordable for cross-checks on real models.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, forward
from .tensor import Tensor, no_grad, softmax
from .train import images_to_float

PROB_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# masking and scoring
# ---------------------------------------------------------------------------

def _as_grid(grid) -> tuple[int, int]:
    if isinstance(grid, int):
        return grid, grid
    gh, gw = grid
    return int(gh), int(gw)


def patch_slices(h: int, w: int, grid):
    """Row-major (rows, cols) pixel slices of the g_h x g_w patch grid."""
    gh, gw = _as_grid(grid)
    if h % gh or w % gw:
        raise ValueError(f"grid {gh}x{gw} does not divide image {h}x{w} exactly")
    ph, pw = h // gh, w // gw
    out = []
    for r in range(gh):
        for c in range(gw):
            out.append((slice(r * ph, (r + 1) * ph), slice(c * pw, (c + 1) * pw)))
    return out


def compute_baseline(images: np.ndarray, kind: str) -> np.ndarray:
    """Per-channel substitution value in normalized float space."""
    if kind == "zero":
        return np.zeros((images.shape[1], 1, 1), dtype=np.float32)
    if kind == "dataset_mean":
        f = images_to_float(images)
        return f.mean(axis=(0, 2, 3), keepdims=False).reshape(-1, 1, 1).astype(np.float32)
    raise ValueError(f"unknown baseline kind {kind!r}")


def mask_input(x: np.ndarray, S, baseline, grid) -> np.ndarray:
    """Keep the patches in S, replace every other patch by the baseline
    value.  Idempotent: masking a masked image with the same S is a no-op."""
    c, h, w = x.shape
    slices = patch_slices(h, w, grid)
    n = len(slices)
    S = set(S)
    for p in S:
        if not (0 <= p < n):
            raise ValueError(f"patch index {p} out of range [0, {n})")
    out = np.broadcast_to(np.asarray(baseline, dtype=x.dtype), x.shape).copy()
    for p in S:
        ys, xs = slices[p]
        out[:, ys, xs] = x[:, ys, xs]
    return out


def score(model: ModelParams, x_s: np.ndarray, y: int) -> float:
    """Log-odds of the true class, clamped so saturated softmax outputs
    stay finite: log(P / (1 - P)) with P in [1e-7, 1 - 1e-7]."""
    if x_s.ndim == 3:
        x_s = x_s[None]
    with no_grad():
        logits = forward(model, Tensor(x_s.astype(np.float32)), training=False)
    p = float(softmax(logits.data.astype(np.float64))[0, y])
    p = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return math.log(p / (1.0 - p))


def make_set_score(model: ModelParams, x: np.ndarray, y: int, grid, baseline):
    """Set function S -> score(model, mask(x, S), y), memoized on S.

    ``x`` may be u8 (normalized here) or already-normalized float.
    """
    if x.dtype == np.uint8:
        x = images_to_float(x)
    cache: dict[frozenset, float] = {}

    def f(S) -> float:
        key = frozenset(S)
        if key not in cache:
            cache[key] = score(model, mask_input(x, key, baseline, grid), y)
        return cache[key]

    return f


# ---------------------------------------------------------------------------
# interaction estimators over an arbitrary set function
# ---------------------------------------------------------------------------

def delta_f_set(f, i: int, j: int, S) -> float:
    """f(S+ij) - f(S+i) - f(S+j) + f(S), grouped as (a + d) - (b + c) so the
    result is bitwise symmetric in i and j."""
    if i == j:
        raise ValueError(f"patch pair must be distinct, got i = j = {i}")
    S = frozenset(S)
    if i in S or j in S:
        raise ValueError(f"context {sorted(S)} must exclude i={i} and j={j}")
    return (f(S | {i, j}) + f(S)) - (f(S | {i}) + f(S | {j}))


def _mean_delta(f, i, j, contexts) -> float:
    # exact rational mean, correctly rounded: a constant integrand (the
    # analytic pairwise scorer) is recovered bit for bit at every order
    deltas = [delta_f_set(f, i, j, S) for S in contexts]
    if not deltas:
        raise ValueError("no contexts to average")
    return statistics.mean(deltas)


def _pool(universe, i, j):
    pool = sorted(set(universe) - {i, j})
    if i not in universe or j not in universe:
        raise ValueError(f"pair ({i}, {j}) outside the scoring universe")
    return pool

BRUTE_FORCE_LIMIT = 10 ** 6


def brute_force_I_set(f, universe, i, j, m) -> float:
    """Exact expectation of delta_f over all size-m contexts."""
    pool = _pool(universe, i, j)
    if m > len(pool):
        raise ValueError(f"order m={m} exceeds n-2={len(pool)}")
    total = math.comb(len(pool), m)
    if total > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"C({len(pool)},{m}) = {total} contexts exceed the brute-force "
            f"limit {BRUTE_FORCE_LIMIT}; use the Monte-Carlo estimator")
    return _mean_delta(f, i, j, itertools.combinations(pool, m))


def estimate_I_set(f, universe, i, j, m, K: int, rng=None,
                   exhaustive: bool = False) -> float:
    """Monte-Carlo estimate of the order-m interaction: average delta_f over
    K independently sampled size-m contexts (uniform, without replacement
    within a context).  ``exhaustive`` walks every context in enumeration
    order instead, matching brute_force_I_set bitwise."""
    pool = _pool(universe, i, j)
    if m > len(pool):
        raise ValueError(f"order m={m} exceeds n-2={len(pool)}")
    if exhaustive or m == 0:
        return _mean_delta(f, i, j, itertools.combinations(pool, m))
    if K < 1:
        raise ValueError("need K >= 1 context samples")
    if rng is None:
        raise ValueError("Monte-Carlo sampling needs an rng")
    pool_arr = np.asarray(pool)
    contexts = [tuple(pool_arr[rng.choice(len(pool_arr), size=m, replace=False)])
                for _ in range(K)]
    return _mean_delta(f, i, j, contexts)


# model-facing wrappers ------------------------------------------------------

def delta_f(model, x, y, i, j, S, grid, baseline) -> float:
    return delta_f_set(make_set_score(model, x, y, grid, baseline), i, j, S)


def estimate_I(model, x, y, i, j, m, K, rng, grid, baseline,
               universe=None, exhaustive: bool = False) -> float:
    f = make_set_score(model, x, y, grid, baseline)
    if universe is None:
        gh, gw = _as_grid(grid)
        universe = range(gh * gw)
    return estimate_I_set(f, universe, i, j, m, K, rng, exhaustive)


def brute_force_I(model, x, y, i, j, m, grid, baseline, universe=None) -> float:
    f = make_set_score(model, x, y, grid, baseline)
    if universe is None:
        gh, gw = _as_grid(grid)
        universe = range(gh * gw)
    return brute_force_I_set(f, universe, i, j, m)


# ---------------------------------------------------------------------------
# order grids and the J report
# ---------------------------------------------------------------------------

DEFAULT_FRACTIONS = tuple(round(0.05 * k, 2) for k in range(1, 20))


def order_grid(n: int, fractions=DEFAULT_FRACTIONS):
    """m = round(fraction * (n-2)) per fraction, half-up, deduplicated and
    sorted."""
    for fr in fractions:
        if not (0.0 < fr < 1.0):
            raise ValueError(f"fractions must lie in (0, 1), got {fr}")
    ms = {int(math.floor(fr * (n - 2) + 0.5)) for fr in fractions}
    return sorted(ms)


@dataclass
class InteractionConfig:
    grid: object  # int g for a g x g grid, or (rows, cols)
    images: np.ndarray  # u8 [count, C, H, W]
    labels: np.ndarray
    orders: list
    pairs_per_order: int = 4
    contexts_per_pair: int = 4
    baseline: str = "dataset_mean"
    seed: int = 0

    def n_patches(self) -> int:
        gh, gw = _as_grid(self.grid)
        return gh * gw

    def validate(self):
        gh, gw = _as_grid(self.grid)
        _, _, h, w = self.images.shape
        patch_slices(h, w, (gh, gw))
        n = gh * gw
        for m in self.orders:
            if not (0 <= m <= n - 2):
                raise ValueError(f"order m={m} outside [0, n-2] for n={n}")
        if len(self.images) == 0:
            raise ValueError("interaction analysis needs a nonempty sample set")
        if self.pairs_per_order < 1 or self.contexts_per_pair < 1:
            raise ValueError("need at least one pair and one context")


@dataclass
class InteractionReport:
    orders: list            # m values, ascending
    fractions: list         # m / (n - 2)
    mean_abs_I: list
    J: list
    stderr: list
    n_pairs: int
    n_contexts: int
    n_images: int
    n_patches: int
    degenerate: bool
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# order_fraction = m / (n - 2)\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["order_m", "order_fraction", "mean_abs_I", "J", "stderr",
                    "n_pairs", "n_contexts"])
        for m, fr, ai, j, se in zip(self.orders, self.fractions, self.mean_abs_I,
                                    self.J, self.stderr):
            w.writerow([m, f"{fr:.6g}", f"{ai:.10g}", f"{j:.10g}", f"{se:.10g}",
                        self.n_pairs, self.n_contexts])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "fraction_denominator": "n-2",
            "n_patches": self.n_patches,
            "n_images": self.n_images,
            "degenerate": self.degenerate,
            "config": self.config,
            "rows": [{"order_m": m, "order_fraction": fr, "mean_abs_I": ai,
                      "J": j, "stderr": se, "n_pairs": self.n_pairs,
                      "n_contexts": self.n_contexts}
                     for m, fr, ai, j, se in zip(self.orders, self.fractions,
                                                 self.mean_abs_I, self.J, self.stderr)],
        }, indent=2)


def _pair_rng(seed, image_idx, m, slot):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, image_idx, m, slot))))


def estimate_J(model: ModelParams, cfg: InteractionConfig) -> InteractionReport:
    """Per-order interaction strength over the sample set.

    For each image and order, P pairs are drawn uniformly without
    replacement; each pair's interaction is the mean of delta_f over K
    sampled contexts.  J normalizes the per-order mean absolute interaction
    by the average over evaluated orders, so mean(J) == 1 by construction.
    Standard errors come from the per-image spread.  Every random draw
    derives from (seed, image, order, pair), so results are independent of
    evaluation schedule.
    """
    cfg.validate()
    n = cfg.n_patches()
    universe = range(n)
    all_pairs = list(itertools.combinations(range(n), 2))
    orders = sorted(set(cfg.orders))

    baseline = compute_baseline(cfg.images, cfg.baseline)
    per_image = np.zeros((len(orders), len(cfg.images)))
    for xi in range(len(cfg.images)):
        f = make_set_score(model, cfg.images[xi], int(cfg.labels[xi]),
                           cfg.grid, baseline)
        for oi, m in enumerate(orders):
            prng = _pair_rng(cfg.seed, xi, m, 0)
            take = min(cfg.pairs_per_order, len(all_pairs))
            pair_idx = prng.choice(len(all_pairs), size=take, replace=False)
            acc = 0.0
            for slot, pidx in enumerate(pair_idx):
                i, j = all_pairs[int(pidx)]
                crng = _pair_rng(cfg.seed, xi, m, slot + 1)
                est = estimate_I_set(f, universe, i, j, m,
                                     cfg.contexts_per_pair, crng)
                acc += abs(est)
            per_image[oi, xi] = acc / take

    mean_abs = per_image.mean(axis=1)
    if len(cfg.images) > 1:
        stderr = per_image.std(axis=1, ddof=1) / math.sqrt(len(cfg.images))
    else:
        stderr = np.zeros(len(orders))

    denom = mean_abs.mean()
    degenerate = denom == 0.0
    J = np.zeros_like(mean_abs) if degenerate else mean_abs / denom

    return InteractionReport(
        orders=list(orders),
        fractions=[m / (n - 2) for m in orders],
        mean_abs_I=[float(v) for v in mean_abs],
        J=[float(v) for v in J],
        stderr=[float(v) for v in stderr],
        n_pairs=min(cfg.pairs_per_order, len(all_pairs)),
        n_contexts=cfg.contexts_per_pair,
        n_images=len(cfg.images),
        n_patches=n,
        degenerate=bool(degenerate),
        config={"grid": list(_as_grid(cfg.grid)), "baseline": cfg.baseline,
                "seed": cfg.seed, "pairs_per_order": cfg.pairs_per_order,
                "contexts_per_pair": cfg.contexts_per_pair},
    )
