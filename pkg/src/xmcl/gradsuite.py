"""The full finite-difference suite: primitives, losses, micro encoders.

Every case builds a scalar by contracting the op output with fixed random
weights, so all output entries contribute to the checked gradient. Inputs to
kinked ops (relu, max) are kept away from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .conv import conv2d, conv_transpose2d, group_norm
from .gradcheck import grad_check
from .losses import (CircleParams, CorrespondenceBatch, TupleLayout, circle_loss, circle_loss_batch,
                     cosine_sim, tuple_circle_loss)
from .model import gather_pixels
from .optim import ParamStore
from .pointnet import PointArch, build_geometry, init_point_params, point_net_forward
from .tensor import Tensor
from .unet import ImageArch, init_image_params, unet_forward

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
STEP = 1e-5
ENCODER_ENTRIES = 12


@dataclass
class CaseResult:
    name: str
    kind: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


@dataclass
class SuiteReport:
    results: list[CaseResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[CaseResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            flag = "ok  " if r.passed else "FAIL"
            out.append(f"{flag} {r.kind:<9} {r.name:<22} max rel err {r.error:.3e}  (tol {r.tol:.0e})")
        return out


def _t(rng, *shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:
        # push entries at least ``lo`` away from zero
        x = np.sign(x) * (np.abs(x) + lo)
    return Tensor(x, requires_grad=True)


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_(T.mul(out, Tensor(w)))


def _unary(op, rng, shape=(3, 4), lo=None, positive=False):
    x = _t(rng, *shape, lo=lo)
    if positive:
        x.data = np.abs(x.data) + 0.5
    w = rng.standard_normal(op(Tensor(x.data)).shape)
    return (lambda: _contract(op(x), w)), [x]


def _binary(op, rng, sa, sb):
    a, b = _t(rng, *sa), _t(rng, *sb)
    w = rng.standard_normal(op(Tensor(a.data), Tensor(b.data)).shape)
    return (lambda: _contract(op(a, b), w)), [a, b]


def _primitive_cases() -> dict[str, Callable]:
    def max_case(rng):
        x = _t(rng, 4, 6)
        # distinct entries separated by far more than the finite-difference step
        x.data = rng.permutation(24).reshape(4, 6) * 0.1 + 0.01 * rng.standard_normal((4, 6))
        w = rng.standard_normal(4)
        return (lambda: _contract(T.max_(x, axis=1), w)), [x]

    def conv_case(rng):
        x, wt, b = _t(rng, 2, 3, 6, 7), _t(rng, 4, 3, 3, 3), _t(rng, 4)
        w = rng.standard_normal((2, 4, 3, 4))
        return (lambda: _contract(conv2d(x, wt, b, stride=2, padding=1), w)), [x, wt, b]

    def convt_case(rng):
        x, wt, b = _t(rng, 2, 3, 3, 4), _t(rng, 3, 2, 2, 2), _t(rng, 2)
        w = rng.standard_normal((2, 2, 6, 8))
        return (lambda: _contract(conv_transpose2d(x, wt, b, stride=2), w)), [x, wt, b]

    def gn_case(rng):
        x, g, b = _t(rng, 2, 4, 3, 3), _t(rng, 4), _t(rng, 4)
        w = rng.standard_normal((2, 4, 3, 3))
        return (lambda: _contract(group_norm(x, g, b, groups=2), w)), [x, g, b]

    def take_case(rng):
        x = _t(rng, 5, 3)
        idx = np.array([[0, 2], [2, 4], [1, 1]])
        w = rng.standard_normal((3, 2, 3))
        return (lambda: _contract(T.take_rows(x, idx), w)), [x]

    def getitem_case(rng):
        x = _t(rng, 4, 5)
        key = (np.array([0, 3, 3]), np.array([1, 2, 2]))
        w = rng.standard_normal(3)
        return (lambda: _contract(T.getitem(x, key), w)), [x]

    def gather_case(rng):
        f = _t(rng, 2, 3, 4, 5)
        pix = np.array([[0, 0], [3, 4], [1, 2], [1, 2]])
        w = rng.standard_normal((4, 3))
        return (lambda: _contract(gather_pixels(f, 1, pix), w)), [f]

    def cos_case(rng):
        a, b = _t(rng, 5), _t(rng, 5)
        return (lambda: T.scale(cosine_sim(a, b), 1.0).sum()), [a, b]

    def concat_case(rng):
        a, b = _t(rng, 2, 3), _t(rng, 2, 2)
        w = rng.standard_normal((2, 5))
        return (lambda: _contract(T.concat([a, b], axis=1), w)), [a, b]

    def mask_case(rng):
        x = _t(rng, 3, 4)
        m = rng.random((3, 4)) > 0.5
        w = rng.standard_normal((3, 4))
        return (lambda: _contract(T.where_mask(x, m), w)), [x]

    return {
        "add": lambda r: _binary(T.add, r, (3, 4), (4,)),
        "sub": lambda r: _binary(T.sub, r, (3, 1), (3, 4)),
        "mul": lambda r: _binary(T.mul, r, (3, 4), (3, 4)),
        "scale": lambda r: _unary(lambda x: T.scale(x, -2.5), r),
        "relu": lambda r: _unary(T.relu, r, lo=0.1),
        "exp": lambda r: _unary(T.exp, r),
        "log": lambda r: _unary(T.log, r, positive=True),
        "softplus": lambda r: _unary(T.softplus, r),
        "sqrt": lambda r: _unary(T.sqrt, r, positive=True),
        "sum": lambda r: _unary(lambda x: T.sum_(x, axis=0), r),
        "mean": lambda r: _unary(lambda x: T.mean(x, axis=1, keepdims=True), r),
        "max": max_case,
        "matmul": lambda r: _binary(T.matmul, r, (2, 3, 4), (4, 5)),
        "transpose": lambda r: _unary(lambda x: T.transpose(x, (2, 0, 1)), r, shape=(2, 3, 4)),
        "reshape": lambda r: _unary(lambda x: T.reshape(x, (4, 3)), r),
        "concat": concat_case,
        "slice_last": lambda r: _unary(lambda x: T.slice_last(x, 1, 3), r),
        "getitem": getitem_case,
        "take_rows": take_case,
        "l2_normalize_rows": lambda r: _unary(T.l2_normalize_rows, r),
        "where_mask": mask_case,
        "cosine_sim": cos_case,
        "gather_pixels": gather_case,
        "conv2d": conv_case,
        "conv_transpose2d": convt_case,
        "group_norm": gn_case,
    }


def _micro_batch(rng, n=4, d=6) -> CorrespondenceBatch:
    return CorrespondenceBatch(*(_t(rng, n, d) for _ in range(4)))


# small margin and scale so the loss sits in a smooth, non-saturated regime
_LOSS_PARAMS = CircleParams(gamma=4.0, m=0.25)


def _loss_cases() -> dict[str, Callable]:
    def circle_case(rng):
        sp = Tensor(rng.uniform(-0.5, 0.9, 3), requires_grad=True)
        sn = Tensor(rng.uniform(-0.5, 0.9, 5), requires_grad=True)
        return (lambda: circle_loss(sp, sn, _LOSS_PARAMS)), [sp, sn]

    def circle_batch_case(rng):
        b = _micro_batch(rng)
        return (lambda: circle_loss_batch(b, _LOSS_PARAMS)), [b.img, b.img_aug, b.pc, b.pc_aug]

    def tuple_case(rng):
        b = _micro_batch(rng)
        layout = TupleLayout(3, 3)
        return (lambda: tuple_circle_loss(b, layout, _LOSS_PARAMS)), [b.img, b.img_aug, b.pc, b.pc_aug]

    return {"circle_loss": circle_case, "circle_batch": circle_batch_case, "tuple_circle_loss": tuple_case}


MICRO_POINT_ARCH = {
    "n_out": [8, 4], "radii": [[0.3, 0.6], [0.8]], "k_max": 4, "mlp": [[4, 5], [6]],
    "decoder": [[5], [4]], "head": 4, "asfp": True, "asfp_radii": [1.2, 0.6], "asfp_mlp": [[3], [3]],
}
MICRO_IMAGE_ARCH = {"channels": [4, 8], "blocks": 1, "head": 4, "groups": 2}


def _jitter(store: ParamStore, rng) -> ParamStore:
    # biases start at exactly zero, which can park a dead unit on the relu kink
    for _, t in store.items():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    return store


def _encoder_cases() -> dict[str, Callable]:
    def point_case(rng):
        arch = PointArch.from_dict(MICRO_POINT_ARCH)
        store = _jitter(init_point_params(arch, rng), rng)
        xyz = rng.uniform(-0.5, 0.5, (16, 3))
        geom = build_geometry(xyz, arch)
        attrs = _t(rng, 16, 1)
        w = rng.standard_normal((16, arch.head))
        params = {p: t for p, t in store.items()}
        return (lambda: _contract(point_net_forward(attrs, geom, store, arch), w)), {"attrs": attrs, **params}

    def image_case(rng):
        arch = ImageArch.from_dict(MICRO_IMAGE_ARCH)
        store = _jitter(init_image_params(arch, rng), rng)
        img = _t(rng, 1, 1, 4, 6)
        w = rng.standard_normal((1, arch.head, 4, 6))
        params = {p: t for p, t in store.items()}
        return (lambda: _contract(unet_forward(img, store, arch), w)), {"image": img, **params}

    def dual_case(rng):
        # 16-point micro scene: both encoders feed the tuple loss through gathered rows
        parch = PointArch.from_dict(MICRO_POINT_ARCH)
        iarch = ImageArch.from_dict(MICRO_IMAGE_ARCH)
        store = ParamStore()
        init_point_params(parch, rng, store)
        init_image_params(iarch, rng, store)
        _jitter(store, rng)
        xyz = rng.uniform(-0.5, 0.5, (16, 3))
        xyz_aug = xyz + 0.01 * rng.standard_normal(xyz.shape)
        geom, geom_aug = build_geometry(xyz, parch), build_geometry(xyz_aug, parch)
        attrs = rng.standard_normal((16, 1))
        imgs = Tensor(rng.random((2, 1, 4, 6)))
        pix = np.array([[0, 1], [1, 3], [2, 2], [3, 5]])
        pts = np.array([0, 5, 9, 14])
        layout = TupleLayout(2, 2)

        def f():
            fm = unet_forward(imgs, store, iarch)
            pc = point_net_forward(attrs, geom, store, parch)
            pca = point_net_forward(attrs, geom_aug, store, parch)
            b = CorrespondenceBatch(gather_pixels(fm, 0, pix), gather_pixels(fm, 1, pix),
                                    T.take_rows(pc, pts), T.take_rows(pca, pts))
            return tuple_circle_loss(b, layout, _LOSS_PARAMS)

        return f, {p: t for p, t in store.items()}

    return {"point_encoder": point_case, "image_encoder": image_case, "dual_tuple_loss": dual_case}


def run_suite(seed: int = 0, only: list[str] | None = None) -> SuiteReport:
    """Run every case; each op appears exactly once in the report."""
    t0 = time.perf_counter()
    # encoder parameters are subsampled per tensor to keep the suite short
    groups = [("primitive", _primitive_cases(), PRIMITIVE_TOL, None),
              ("loss", _loss_cases(), COMPOSITE_TOL, None),
              ("encoder", _encoder_cases(), COMPOSITE_TOL, ENCODER_ENTRIES)]
    results = []
    case_no = 0
    for kind, cases, tol, max_entries in groups:
        for name, build in cases.items():
            case_no += 1
            if only is not None and name not in only:
                continue
            rng = np.random.default_rng([seed, case_no])
            t1 = time.perf_counter()
            f, inputs = build(rng)
            rep = grad_check(f, inputs, step=STEP, tol=tol, max_entries=max_entries, seed=case_no)
            results.append(CaseResult(name, kind, rep.max_error, tol, time.perf_counter() - t1))
    return SuiteReport(results, time.perf_counter() - t0)
