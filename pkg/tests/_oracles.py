"""Independent reference implementations used by the tests.

Nothing here calls into the code under test except to build the function
being differentiated; every expected value is recomputed from first
principles (finite differences, explicit loops, voxel enumeration).
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from aranet import arch, losses
from aranet import tensor as T
from aranet.tensor import Tensor

FD_STEP = 1e-4
GRAD_TOL = 1e-4
# entries smaller than this are compared absolutely; FD noise at h=1e-4 in f64 sits near 1e-10
REL_FLOOR = 1e-6


# ---------------------------------------------------------------- finite differences


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    n = np.asarray(n, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


class KinkGuard:
    """Records the sign pattern of every leaky-ReLU input evaluated by the networks.

    A central difference is only a valid derivative oracle when no kink lies
    between x - h and x + h; probes whose two evaluations disagree in any
    sign are discarded and another coordinate is drawn.
    """

    def __init__(self):
        self.trace: list[np.ndarray] | None = None

    def __enter__(self):
        self._orig = arch.leaky_relu

        def recording(x, *args, **kwargs):
            if self.trace is not None:
                self.trace.append(x.data > 0)
            return self._orig(x, *args, **kwargs)

        arch.leaky_relu = recording
        return self

    def __exit__(self, *exc):
        arch.leaky_relu = self._orig

    def run(self, f):
        self.trace = []
        try:
            return f(), self.trace
        finally:
            self.trace = None


class NoSmoothProbe(AssertionError):
    pass


def _same_pattern(p, q) -> bool:
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def gradcheck(fn, arrays: list[np.ndarray], rng: np.random.Generator, max_coords: int | None = None,
              h: float = FD_STEP, guard: KinkGuard | None = None) -> float:
    """Max relative error between backprop and central differences of ``fn``.

    ``fn`` maps a list of Tensors to a scalar Tensor.  With ``max_coords``
    only that many randomly chosen coordinates per array are probed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(ts).backward()
    analytic = [t.grad for t in ts]

    def value(vals):
        with T.no_grad():
            if guard is None:
                return float(fn([Tensor(v) for v in vals]).data), None
            out, pattern = guard.run(lambda: fn([Tensor(v) for v in vals]))
            return float(out.data), pattern

    worst = 0.0
    for i, a in enumerate(arrays):
        order = np.arange(a.size) if max_coords is None else rng.permutation(a.size)
        want = a.size if max_coords is None else min(max_coords, a.size)
        probed, num = [], []
        for fi in order:
            if len(probed) == want:
                break
            idx = np.unravel_index(fi, a.shape)
            orig = a[idx]
            a[idx] = orig + h
            fp, pp = value(arrays)
            a[idx] = orig - h
            fm, pm = value(arrays)
            a[idx] = orig
            if guard is not None and not _same_pattern(pp, pm):
                continue
            probed.append(fi)
            num.append((fp - fm) / (2 * h))
        if not probed:
            raise NoSmoothProbe(f"no kink-free coordinate in input {i}")
        worst = max(worst, rel_err(analytic[i].reshape(-1)[probed], np.array(num)))
    return worst


def away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Nudge entries of x that sit within ``margin`` of a kink."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(w)))


def primitive_cases(rng: np.random.Generator):
    """(name, fn, arrays) covering every differentiable primitive."""
    def r(*shape):
        return rng.standard_normal(shape)

    def kinked(*shape, points=(0.0,)):
        return away_from(r(*shape), points, 1e-2)

    cases = []
    a, b = r(2, 3, 4), r(2, 3, 4)
    w = r(2, 3, 4)
    cases += [
        ("add", lambda t: _weighted(T.add(t[0], t[1]), w), [a, b]),
        ("sub", lambda t: _weighted(T.sub(t[0], t[1]), w), [a, b]),
        ("mul", lambda t: _weighted(T.mul(t[0], t[1]), w), [a, b]),
        ("mul_shared", lambda t: _weighted(T.mul(t[0], t[0]), w), [a]),
        ("scalar_mul", lambda t: _weighted(T.scalar_mul(t[0], -1.7), w), [a]),
        ("scalar_add", lambda t: _weighted(T.square(T.scalar_add(t[0], 0.3)), w), [a]),
        ("square", lambda t: _weighted(T.square(t[0]), w), [a]),
        ("relu", lambda t: _weighted(T.relu(t[0]), w), [kinked(2, 3, 4)]),
        ("leaky_relu", lambda t: _weighted(T.leaky_relu(t[0], 0.2), w), [kinked(2, 3, 4)]),
        ("sigmoid", lambda t: _weighted(T.sigmoid(t[0]), w), [r(2, 3, 4) * 3]),
        ("smooth_l1", lambda t: _weighted(T.smooth_l1(t[0], 1.0), w),
         [kinked(2, 3, 4, points=(-1.0, 0.0, 1.0)) * 1.5]),
        ("sum_all", lambda t: T.square(T.sum_all(t[0])), [a]),
        ("mean_all", lambda t: T.square(T.mean_all(t[0])), [a]),
        ("reshape", lambda t: _weighted(T.reshape(t[0], (4, 6)), w.reshape(4, 6)), [a]),
    ]
    x4 = r(2, 3, 6, 6)
    w4 = r(2, 3, 6, 6)
    wc = r(2, 5, 6, 6)
    wu = r(2, 3, 12, 12)
    wl = r(3, 2)
    cases += [
        ("concat_channels", lambda t: _weighted(T.concat_channels([t[0], t[1]]), wc),
         [x4, r(2, 2, 6, 6)]),
        ("mean_spatial", lambda t: _weighted(T.mean_spatial(t[0]), w4[:, :, 0, 0]), [x4]),
        ("upsample_nearest2x", lambda t: _weighted(T.upsample_nearest2x(t[0]), wu), [x4]),
        ("avgpool2x", lambda t: _weighted(T.avgpool2x(t[0]), w4[:, :, :3, :3]), [x4]),
        ("linear", lambda t: _weighted(T.linear(t[0], t[1], t[2]), wl),
         [r(3, 5), r(5, 2), r(2)]),
    ]
    for k, stride, pad, size in ((3, 1, 1, 6), (4, 2, 1, 8), (1, 1, 0, 5), (3, 2, 0, 7), (2, 2, 0, 6)):
        ho = (size + 2 * pad - k) // stride + 1
        wo_ = r(2, 4, ho, ho)
        cases.append((f"conv2d_k{k}s{stride}p{pad}",
                      lambda t, s=stride, p=pad, wo_=wo_: _weighted(T.conv2d(t[0], t[1], t[2], s, p), wo_),
                      [r(2, 3, size, size), r(4, 3, k, k) * 0.5, r(4)]))
    return cases


SMALL_ARCH = dict(in_channels=3, base_channels=2, depth=2, ds_scales=2, input_size=16, disc_channels=2)


def _prenet_objective(config, params_keys, x_shape, rng):
    """Scalar objective touching the final map, every head and every attention map."""
    probe = arch.init_prenet(config, seed=0, dtype=np.float64)
    out = arch.prenet_forward(Tensor(np.zeros(x_shape)), config, probe)
    w_final = rng.standard_normal(out.final.shape)
    w_heads = [rng.standard_normal(h.shape) for h in out.heads]
    w_att = [rng.standard_normal(a.shape) for a in out.attention]

    def fn(ts):
        params = dict(zip(params_keys, ts[1:]))
        o = arch.prenet_forward(ts[0], config, params)
        total = _weighted(o.final, w_final)
        for h, wh in zip(o.heads, w_heads):
            total = T.add(total, _weighted(h, wh))
        for a, wa in zip(o.attention, w_att):
            total = T.add(total, _weighted(a, wa))
        return total

    return fn


def network_cases(seed: int, rng: np.random.Generator):
    cases = []
    for flags in ((True, True), (False, False)):
        config = arch.ArchConfig(**SMALL_ARCH, attention_enabled=flags[0], residual_enabled=flags[1])
        params = arch.init_prenet(config, seed=seed, dtype=np.float64)
        keys = list(params)
        x_shape = (2, config.in_channels, config.input_size, config.input_size)
        fn = _prenet_objective(config, keys, x_shape, rng)
        arrays = [rng.standard_normal(x_shape)] + [params[k].data for k in keys]
        cases.append((f"prenet_att{int(flags[0])}_res{int(flags[1])}", fn, arrays))

    config = arch.ArchConfig(**SMALL_ARCH)
    disc = arch.init_advnet(config, seed=seed, dtype=np.float64)
    dkeys = list(disc)
    s = config.input_size

    def dfn(ts):
        scores = arch.advnet_forward(ts[0], ts[1], dict(zip(dkeys, ts[2:])), config.slope)
        return losses.generator_adversarial_loss(scores)

    arrays = [rng.standard_normal((2, 1, s, s)), rng.standard_normal((2, config.in_channels, s, s))]
    cases.append(("advnet", dfn, arrays + [disc[k].data for k in dkeys]))
    return cases


def gradient_suite(seeds=range(20), net_coords: int = 6) -> dict[str, float]:
    """Worst relative error per primitive/network over all seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, arrays in primitive_cases(rng):
            worst[name] = max(worst.get(name, 0.0), gradcheck(fn, arrays, rng))
        for j in range(3):
            for attempt in range(5):
                name, fn, arrays = network_cases(seed, rng)[j]
                try:
                    with KinkGuard() as guard:
                        err = gradcheck(fn, arrays, rng, max_coords=net_coords, guard=guard)
                    break
                except NoSmoothProbe:
                    continue
            else:
                raise NoSmoothProbe(f"{name}: every draw straddles a kink")
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


# ---------------------------------------------------------------- convolution


def conv2d_loops(x, k, b, stride, pad):
    n, c, h, w = x.shape
    f, _, kk, _ = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + kk, j * stride:j * stride + kk]
                    out[ni, fi, i, j] = (patch * k[fi]).sum() + b[fi]
    return out


# ---------------------------------------------------------------- dosimetry by enumeration


def brute_dm(values, mask, m):
    """Minimal dose received by at least m% of the voxels: scan candidate doses."""
    sel = values.astype(np.float64)[mask.astype(bool)]
    k_needed = Fraction(repr(float(m))) * len(sel) / 100
    # covered[i] = number of voxels receiving at least sel[i]
    covered = (sel[None, :] >= sel[:, None]).sum(axis=1)
    ok = [float(d) for d, c in zip(sel, covered) if c >= k_needed]
    return max(ok)


def brute_vx(values, mask, x):
    sel = [float(v) for v, inside in zip(values.ravel(), mask.ravel()) if inside]
    return Fraction(sum(1 for v in sel if v >= x), len(sel))


def brute_mean(values, mask):
    sel = [Fraction(float(v)) for v, inside in zip(values.ravel(), mask.ravel()) if inside]
    return sum(sel) / len(sel)


def brute_ci(values, mask, prescription):
    tv = piv = both = 0
    for v, inside in zip(values.ravel(), mask.ravel()):
        hot = float(v) >= prescription
        tv += bool(inside)
        piv += hot
        both += bool(inside) and hot
    return Fraction(0) if piv == 0 else Fraction(both * both, tv * piv)


def brute_hi(values, mask):
    return (brute_dm(values, mask, 2) - brute_dm(values, mask, 98)) / brute_dm(values, mask, 50)


def brute_ape(truth, pred):
    return sum(Fraction(abs(Fraction(t) - Fraction(p))) / Fraction(p) for t, p in zip(truth, pred)) \
        / len(truth) * 100


def brute_edt_sq(mask, spacing):
    """Squared distance to the nearest foreground voxel by exhaustive search."""
    fg = np.argwhere(mask)
    grid = np.indices(mask.shape).reshape(3, -1).T
    sp = np.asarray(spacing, np.float64)
    out = np.empty(len(grid))
    for i, p in enumerate(grid):
        d = (fg - p) * sp
        out[i] = np.min((d * d).sum(axis=1))
    return out.reshape(mask.shape)


def is_close_rel(a: float, b: float, tol: float) -> bool:
    return math.isclose(a, b, rel_tol=tol, abs_tol=0.0) or a == b


def random_dose_case(rng: np.random.Generator):
    """A grid <= 16^3 with a non-empty mask; half the cases use <= 8 distinct dose levels."""
    shape = tuple(int(s) for s in rng.integers(1, 17, size=3))
    if rng.random() < 0.5:
        levels = rng.choice(np.arange(0, 61, 5, dtype=np.float32), size=int(rng.integers(1, 9)), replace=False)
        values = rng.choice(levels, size=shape)
    else:
        values = (rng.random(shape) * 60).astype(np.float32)
    mask = rng.random(shape) < rng.uniform(0.05, 1.0)
    if not mask.any():
        mask[tuple(int(rng.integers(0, s)) for s in shape)] = True
    return values.astype(np.float32), mask


def dosimetry_oracle_mismatches(n_grids: int = 200, seed: int = 0, tol: float = 1e-9) -> list[str]:
    """Compare every metric with voxel enumeration; returns a description of each disagreement."""
    from aranet import dosimetry as dm

    rng = np.random.default_rng(seed)
    bad = []
    for case in range(n_grids):
        values, mask = random_dose_case(rng)
        dose = dm.Volume(values)
        mv = dm.MaskVolume(mask, "ptv")
        presc = float(rng.choice([20.0, 30.0, 45.0, 55.0]))
        x = float(rng.choice([0.0, 15.0, 30.0, 50.0]))
        for m in (2, 50, 95, 98, float(rng.uniform(0.1, 100))):
            if dm.d_percentile(dose, mv, m) != brute_dm(values, mask, m):
                bad.append(f"case {case}: D{m}")
        # int / int in Python is correctly rounded, so float(exact) must match bit for bit
        if dm.v_at(dose, mv, x) != float(brute_vx(values, mask, x)):
            bad.append(f"case {case}: V{x}")
        if not is_close_rel(dm.d_mean(dose, mv), float(brute_mean(values, mask)), tol):
            bad.append(f"case {case}: Dmean")
        if dm.conformity_index(dose, mv, presc) != float(brute_ci(values, mask, presc)):
            bad.append(f"case {case}: CI")
        d50 = brute_dm(values, mask, 50)
        if d50 > 0 and not is_close_rel(dm.heterogeneity_index(dose, mv), brute_hi(values, mask), tol):
            bad.append(f"case {case}: HI")
        truth = list(rng.uniform(1, 60, size=int(rng.integers(1, 6))))
        pred = list(rng.uniform(1, 60, size=len(truth)))
        if not is_close_rel(dm.ape(truth, pred), float(brute_ape(truth, pred)), tol):
            bad.append(f"case {case}: APE")
    return bad


def fuzz_readers(tmp_dir, n_cases: int = 1000, seed: int = 0) -> dict[str, int]:
    """Flip one byte (or truncate) in valid files and read them back.

    Returns counts of outcomes; any exception that is not a FormatError
    propagates and fails the caller.
    """
    from pathlib import Path

    from aranet import persist
    from aranet.dosimetry import MaskVolume, Volume

    rng = np.random.default_rng(seed)
    tmp = Path(tmp_dir)
    vol = Volume(rng.random((3, 4, 5)).astype(np.float32), (3.0, 2.5, 2.5))
    mask = MaskVolume(rng.random((3, 4, 5)) < 0.4, "bladder")
    ckpt = {"gen/stem.w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32), "meta/step": np.array([7.0])}
    originals = {
        "dvol": (persist.encode_volume(vol.values, vol.spacing_mm, "f32le"), persist.read_volume),
        "dmask": (persist.encode_volume(mask.values, mask.spacing_mm, "u8", mask.label), persist.read_mask),
        "ackpt": (persist.encode_checkpoint(ckpt), persist.load_checkpoint),
    }
    counts = {"typed_error": 0, "accepted": 0, "ckpt_accepted": 0}
    kinds = list(originals)
    for case in range(n_cases):
        kind = kinds[case % len(kinds)]
        blob, reader = originals[kind]
        data = bytearray(blob)
        if rng.random() < 0.15:
            data = data[: int(rng.integers(0, len(data)))]
        else:
            pos = int(rng.integers(0, len(data)))
            data[pos] = (data[pos] + int(rng.integers(1, 256))) % 256
        path = tmp / f"fuzz_{case}.{kind}"
        path.write_bytes(bytes(data))
        try:
            reader(path)
        except persist.FormatError:
            counts["typed_error"] += 1
        else:
            counts["accepted"] += 1
            if kind == "ackpt":
                counts["ckpt_accepted"] += 1
        path.unlink()
    return counts
