"""Finite-difference checks of every differentiable operation and of a small end-to-end model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import backbone as bb
from . import decoder as dec
from . import retention as R
from . import tensor as T
from .tensor import Tensor

TOLERANCE = {"f64": 1e-6, "f32": 1e-3}
MODEL_TOLERANCE = {"f64": 1e-5, "f32": 1e-3}


@dataclass
class GradCheckResult:
    name: str
    dtype: str
    max_rel_error: float
    tolerance: float
    n_coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<28s} {self.dtype} rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} coords={self.n_coords}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the probed coordinates."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Dict[str, np.ndarray],
    dtype: str = "f64",
    h: float = 1e-6,
    max_coords: Optional[int] = 24,
    rng=None,
    tolerance: Optional[float] = None,
) -> GradCheckResult:
    """Compare ``backward`` in ``dtype`` against central differences in f64.

    ``fn`` receives one Tensor per entry of ``inputs`` (as keyword arguments)
    and may return any shape; the scalar probed is ``sum(out * R)`` with a
    fixed random ``R``.  At most ``max_coords`` entries of each input are probed.
    """
    rng = np.random.default_rng(rng)
    dt = T.resolve_dtype(dtype)
    start = time.perf_counter()
    # both passes see the same (possibly f32-rounded) values
    values = {k: np.asarray(v, dtype=dt).astype(np.float64) for k, v in inputs.items()}

    leaves = {k: Tensor(v.astype(dt), requires_grad=True) for k, v in values.items()}
    out = fn(**leaves)
    weights = rng.normal(size=out.shape)
    loss = T.tsum(out * Tensor._wrap(weights.astype(dt)))
    loss.backward()

    probes = {k: Tensor(v) for k, v in values.items()}
    wt = Tensor._wrap(weights)

    def scalar() -> float:
        return float(np.sum(fn(**probes).data * wt.data))

    worst, total = 0.0, 0
    for k, probe in probes.items():
        size = probe.data.size
        coords = np.arange(size) if max_coords is None or size <= max_coords else rng.choice(size, max_coords, replace=False)
        numeric = T.finite_diff_gradient(lambda _x: scalar(), probe, h=h, coords=coords).reshape(-1)[coords]
        grad = leaves[k].grad
        analytic = np.zeros(len(coords)) if grad is None else grad.reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric))
        total += len(coords)
    tol = TOLERANCE[T.DTYPE_NAMES[dt]] if tolerance is None else tolerance
    return GradCheckResult(name, T.DTYPE_NAMES[dt], worst, tol, total, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# the op suite
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + np.sign(x) * margin


def _retention_fn(kernel, heads=2, d_model=6, d_k=4, **kw):
    gam = np.array([0.9, 0.6][:heads])

    def f(x, wq, wk, wv):
        return kernel(x, R.RetentionParams(wq, wk, wv, gam, R.default_theta(d_k)), **kw)

    return f


def _retention_inputs(rng, n, heads=2, d_model=6, d_k=4):
    s = 1.0 / np.sqrt(d_model)
    return {
        "x": rng.normal(size=(n, d_model)),
        "wq": rng.normal(scale=s, size=(heads, d_model, d_k)),
        "wk": rng.normal(scale=s, size=(heads, d_model, d_k)),
        "wv": rng.normal(scale=s, size=(heads, d_model, d_k)),
    }


def op_cases(rng) -> List[tuple]:
    """``(name, fn, inputs)`` triples covering every differentiable operation."""
    n = rng.normal
    target = rng.integers(0, 4, size=(2, 3, 5))
    target[0, 1, 2] = 255

    def block(mode):
        def f(x, wq, wk, wv, wo, w1, w2):
            c = x.shape[-1]
            bp = {
                "attn.wq": wq, "attn.wk": wk, "attn.wv": wv, "attn.wo": wo, "attn.bo": Tensor(np.full(c, 0.1)),
                "ln1.w": Tensor(np.ones(c)), "ln1.b": Tensor(np.zeros(c)),
                "ln2.w": Tensor(np.ones(c)), "ln2.b": Tensor(np.zeros(c)),
                "ffn.w1": w1, "ffn.b1": Tensor(np.full(w1.shape[1], 0.05)),
                "ffn.w2": w2, "ffn.b2": Tensor(np.zeros(c)),
            }
            return bb.block_forward(x, bp, 2, 3, np.array([0.8, 0.5]), mode)

        return f

    def block_inputs():
        c, dk = 8, 4
        return {
            "x": n(size=(1, 6, c)),
            "wq": n(scale=0.4, size=(2, c, dk)),
            "wk": n(scale=0.4, size=(2, c, dk)),
            "wv": n(scale=0.4, size=(2, c, dk)),
            "wo": n(scale=0.4, size=(c, c)),
            "w1": n(scale=0.4, size=(c, 2 * c)),
            "w2": n(scale=0.3, size=(2 * c, c)),
        }

    dcfg_lit = dec.DecoderConfig(C=3, n_cls=2, variant="literal")
    dcfg_proj = dec.DecoderConfig(C=3, n_cls=2, variant="projected")

    def zir(cfg):
        def f(f_in, big, w, b):
            return dec.zir_residual(f_in, big, {"zir0.w": w, "zir0.b": b}, cfg, 0)

        return f

    return [
        ("add_broadcast", lambda a, b: a + b, {"a": n(size=(3, 4)), "b": n(size=(4,))}),
        ("sub_broadcast", lambda a, b: a - b, {"a": n(size=(2, 1, 4)), "b": n(size=(3, 4))}),
        ("mul_broadcast", lambda a, b: a * b, {"a": n(size=(3, 4)), "b": n(size=(3, 1))}),
        ("div", lambda a, b: a / b, {"a": n(size=(3, 4)), "b": 1.5 + rng.random((3, 4))}),
        ("power", lambda a: T.power(a, 3.0), {"a": n(size=(5,))}),
        ("exp", T.exp, {"a": n(size=(2, 3))}),
        ("log", T.log, {"a": 0.5 + rng.random((2, 3))}),
        ("tanh", T.tanh, {"a": n(size=(2, 3))}),
        ("relu", T.relu, {"a": _away_from_zero(rng, (3, 4))}),
        ("gelu", T.gelu, {"a": n(size=(3, 4))}),
        ("sum_axis", lambda a: T.tsum(a, axis=1, keepdims=True), {"a": n(size=(2, 3, 4))}),
        ("mean_axes", lambda a: T.mean(a, axis=(0, 2)), {"a": n(size=(2, 3, 4))}),
        ("reshape", lambda a: T.reshape(a, (4, 6)), {"a": n(size=(2, 3, 4))}),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), {"a": n(size=(2, 3, 4))}),
        ("getitem", lambda a: a[1:, ::2] * a[:2, 1::2], {"a": n(size=(3, 4))}),
        ("concat", lambda a, b: T.concat([a, b, a], axis=1), {"a": n(size=(2, 2)), "b": n(size=(2, 3))}),
        ("stack", lambda a, b: T.stack([a, b], axis=0), {"a": n(size=(2, 3)), "b": n(size=(2, 3))}),
        ("matmul_batched", T.matmul, {"a": n(size=(2, 3, 4)), "b": n(size=(4, 5))}),
        ("softmax", lambda a: T.softmax(a, axis=-1), {"a": n(size=(3, 5))}),
        ("log_softmax", lambda a: T.log_softmax(a, axis=0), {"a": n(size=(4, 3))}),
        ("layer_norm", T.layer_norm, {"x": n(size=(3, 6)), "weight": n(size=(6,)), "bias": n(size=(6,))}),
        ("linear", T.linear, {"x": n(size=(2, 3, 4)), "weight": n(size=(4, 5)), "bias": n(size=(5,))}),
        ("pointwise_conv", T.pointwise_conv, {"x": n(size=(2, 3, 4, 5)), "weight": n(size=(4, 3)), "bias": n(size=(4,))}),
        ("bilinear_up", lambda x: T.bilinear_resize(x, 7, 9), {"x": n(size=(2, 3, 4))}),
        ("bilinear_down", lambda x: T.bilinear_resize(x, 3, 2), {"x": n(size=(2, 6, 5))}),
        ("cross_entropy", lambda logits: T.cross_entropy(logits, target), {"logits": n(size=(2, 4, 3, 5))}),
        ("rotation", lambda x: R.apply_rotation(x, R.default_theta(6)), {"x": n(size=(2, 5, 6))}),
        ("retention_parallel", _retention_fn(R.retention_parallel), _retention_inputs(rng, 7)),
        ("retention_recurrent", _retention_fn(R.retention_recurrent), _retention_inputs(rng, 7)),
        ("retention_chunkwise", _retention_fn(R.retention_chunkwise, chunk=3), _retention_inputs(rng, 7)),
        ("bi_retention", _retention_fn(R.bi_retention), _retention_inputs(rng, 7)),
        ("masa_full", _retention_fn(R.masa_full, h=2, w=3), _retention_inputs(rng, 6)),
        ("resa_decomposed", _retention_fn(R.resa_decomposed, h=2, w=3), _retention_inputs(rng, 6)),
        ("block_decomposed", block("decomposed"), block_inputs()),
        ("block_full", block("full"), block_inputs()),
        ("zir_literal", zir(dcfg_lit), {"f_in": n(size=(4, 2, 2)), "big": n(size=(3, 2, 2)), "w": n(size=(4, 3)), "b": n(size=(4,))}),
        ("zir_projected", zir(dcfg_proj), {"f_in": n(size=(4, 2, 2)), "big": n(size=(3, 2, 2)), "w": n(size=(3, 4)), "b": n(size=(3,))}),
        ("decoder_upsample", lambda x: dec.upsample_quarter(x, 12, 8), {"x": n(size=(2, 2, 1))}),
        ("decoder_classify", lambda m, w, b: dec.classify(m, {"cls.w": w, "cls.b": b}, 8, 8),
         {"m": n(size=(3, 2, 2)), "w": n(size=(2, 3)), "b": n(size=(2,))}),
    ]


def run_op_suite(dtype: str = "f64", seed: int = 0, max_coords: int = 24) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    return [check_gradients(name, fn, inp, dtype=dtype, max_coords=max_coords, rng=rng)
            for name, fn, inp in op_cases(rng)]


# ---------------------------------------------------------------------------
# end-to-end micro model
# ---------------------------------------------------------------------------

E2E_BACKBONE = dict(stage_channels=[8, 8, 16, 16], stage_depths=[1, 0, 0, 1], heads=[1, 1, 2, 2], ffn_ratio=2)


def e2e_model(seed: int = 0, variant: str = "literal"):
    """Two-block model at 32x32 whose zero-initialized weights are perturbed so every branch carries signal."""
    rng = np.random.default_rng(seed)
    bcfg = bb.BackboneConfig(**E2E_BACKBONE)
    dcfg = dec.DecoderConfig(C=4, n_cls=3, variant=variant)
    params = {"backbone." + k: v for k, v in bb.init_params(bcfg, rng, "f64").items()}
    params.update({"decoder." + k: v for k, v in dec.init_params(dcfg, bcfg.stage_channels, rng, "f64").items()})
    arrays = {k: v.data + rng.normal(scale=0.1, size=v.shape) for k, v in params.items()}
    image = rng.random((3, 32, 32))
    target = rng.integers(0, 3, size=(32, 32))
    return bcfg, dcfg, arrays, image, target


def run_model_check(dtype: str = "f64", seed: int = 0, max_coords: int = 4) -> GradCheckResult:
    bcfg, dcfg, arrays, image, target = e2e_model(seed)
    names = sorted(arrays)
    keys = {k: f"p{i}" for i, k in enumerate(names)}

    def f(image, **flat):
        bp = {k[len("backbone."):]: flat[keys[k]] for k in names if k.startswith("backbone.")}
        dp = {k[len("decoder."):]: flat[keys[k]] for k in names if k.startswith("decoder.")}
        pyr = bb.backbone_forward(image, bcfg, bp)
        logits = dec.decoder_forward(pyr, dp, dcfg)
        return T.cross_entropy(logits, target)

    inputs = {"image": image}
    inputs.update({keys[k]: arrays[k] for k in names})
    return check_gradients(
        "micro_model_e2e", f, inputs, dtype=dtype, max_coords=max_coords, rng=seed,
        tolerance=MODEL_TOLERANCE[dtype],
    )


def run_all(dtype: str = "f64", seed: int = 0) -> List[GradCheckResult]:
    return run_op_suite(dtype, seed) + [run_model_check(dtype, seed)]
