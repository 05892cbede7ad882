"""Central finite-difference checks for the autodiff engine.

A probe perturbs one scalar by +h and -h and compares the slope with the
analytic gradient.  Probes whose two evaluations took different branches
of a non-smooth op (ReLU, max, pooling, clamp) are redrawn, since the
finite difference is meaningless across a kink.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import grade_head
from .backbone import GradingNet

H = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-6
SMALL = 1e-3


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|); absolute error when both are below ``SMALL``."""
    scale = max(abs(analytic), abs(numeric))
    if scale < SMALL:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale


def passes(analytic: float, numeric: float, rel_tol: float = REL_TOL, abs_tol: float = ABS_TOL) -> bool:
    if max(abs(analytic), abs(numeric)) < SMALL:
        return abs(analytic - numeric) < abs_tol
    return relative_error(analytic, numeric) < rel_tol


def _eval(fn):
    with ad.kink_trace() as trace:
        value = float(fn())
    return value, tuple(trace)


def numeric_slope(fn, arr: np.ndarray, index: tuple, h: float = H):
    """Central difference of the scalar ``fn()`` along ``arr[index]``.

    Returns ``(slope, smooth)`` where ``smooth`` is False if the two sides
    crossed a kink.
    """
    orig = arr[index]
    try:
        arr[index] = orig + h
        up, kinks_up = _eval(fn)
        arr[index] = orig - h
        down, kinks_down = _eval(fn)
    finally:
        arr[index] = orig
    return (up - down) / (2 * h), kinks_up == kinks_down


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def error(self) -> float:
        return relative_error(self.analytic, self.numeric)

    @property
    def ok(self) -> bool:
        return passes(self.analytic, self.numeric)


@dataclass
class ProbeReport:
    probes: list = field(default_factory=list)
    redrawn: int = 0

    @property
    def worst(self) -> float:
        return max((p.error for p in self.probes), default=0.0)

    @property
    def failures(self) -> list:
        return [p for p in self.probes if not p.ok]


def check_tensors(fn, tensors: dict, n_probes: int, rng, h: float = H, max_redraw: int = 1000,
                  round_robin: bool = False) -> ProbeReport:
    """Probe ``n_probes`` random entries of the named leaf tensors.

    ``fn`` builds the scalar graph from the current tensor values.  Entries
    are picked with probability proportional to tensor size, or with
    ``round_robin`` one tensor after another so small heads are covered too.
    """
    names = list(tensors)
    sizes = np.array([tensors[n].data.size for n in names], dtype=float)
    for t in tensors.values():
        t.grad = None
    out = fn()
    out.backward()
    grads = {n: np.array(tensors[n].grad, dtype=np.float64) for n in names}
    report = ProbeReport()
    while len(report.probes) < n_probes:
        if round_robin:
            name = names[len(report.probes) % len(names)]
        else:
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = tensors[name].data
        index = tuple(int(rng.integers(0, s)) for s in arr.shape)
        slope, smooth = numeric_slope(lambda: fn().item(), arr, index, h)
        if not smooth:
            report.redrawn += 1
            if report.redrawn > max_redraw:
                raise RuntimeError("too many probes landed on kinks")
            continue
        report.probes.append(Probe(name, index, float(grads[name][index]), slope))
    return report


def check_network(net: GradingNet, images: np.ndarray, labels, n_probes: int = 100, seed: int = 0,
                  alpha: float = grade_head.DEFAULT_ALPHA, h: float = H, round_robin: bool = False) -> ProbeReport:
    """Probe parameters of ``net`` through the full forward pass and loss, in float64.

    Batch-norm runs in training mode; its running buffers are restored
    afterwards and the original dtype is restored, so the check leaves the
    network untouched.
    """
    saved = [(name, arr.copy()) for name, arr in net.named_buffers()]
    was, dtype = net.training, net.dtype
    net.cast(np.float64).train()
    x = ad.Tensor(np.asarray(images, dtype=np.float64))
    labels = np.asarray(labels)

    def fn():
        _, _, y_r, sigma2 = net(x)
        return grade_head.loss_t(y_r, sigma2, labels, alpha)

    try:
        with ad.compute_dtype(np.float64):
            return check_tensors(fn, dict(net.named_parameters()), n_probes, np.random.default_rng(seed), h,
                                 round_robin=round_robin)
    finally:
        for (_, arr), (_, old) in zip(net.named_buffers(), saved):
            arr[...] = old
        net.zero_grad()
        net.cast(dtype).train(was)
