"""Executable checks of attention-as-influence and the entropy-based error bound."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import bisect
from scipy.stats import spearmanr

from .dynamics import LatentState, neuron_update, push_history, sync_update, synapse_step
from .pyramid import EncoderStub, FeatureBank, FeatureCache
from .reasoner import ReasonerConfig, confidence, entropy, infer, rollout, THRESHOLD_MET

# ---------------------------------------------------------------- influence


@dataclass
class InfluenceSnapshot:
    """One aggregation ``z = sum_i A_i h_i`` frozen together with its downstream loss."""

    A: np.ndarray  # (n,)
    h: np.ndarray  # (n, d)
    loss_fn: Callable[[torch.Tensor], torch.Tensor]
    label: int | None = None

    def z(self, A=None) -> np.ndarray:
        A = self.A if A is None else A
        return A @ self.h

    def loss(self, A=None) -> float:
        with torch.no_grad():
            return float(self.loss_fn(torch.as_tensor(self.z(A), dtype=torch.float64)))

    def grad_z(self) -> np.ndarray:
        z = torch.tensor(self.z(), dtype=torch.float64, requires_grad=True)
        with torch.enable_grad():
            (g,) = torch.autograd.grad(self.loss_fn(z), z, allow_unused=True)
        return np.zeros(z.shape) if g is None else g.numpy()

    def grad_A(self) -> np.ndarray:
        """``dL/dA_i = grad_z . h_i``."""
        return self.h @ self.grad_z()


def mask_influence_oracle(snap: InfluenceSnapshot, i: int, scale: float = 1.0) -> float:
    """Loss change when ``A_i`` shrinks to ``(1 - scale) A_i``; the rest are left unnormalised."""
    if not 0 <= i < len(snap.A):
        raise IndexError(f"candidate {i} out of range for {len(snap.A)} candidates")
    A = snap.A.copy()
    A[i] *= 1.0 - scale
    return snap.loss(A) - snap.loss()


def first_order_estimate(A_i: float, grad_Ai: float) -> float:
    return -A_i * grad_Ai


def influence_bound(A_i: float, h_i, grad_z) -> float:
    return float(A_i * np.linalg.norm(grad_z) * np.linalg.norm(h_i))


def linear_snapshot(A, h, w, bias, label: int) -> InfluenceSnapshot:
    """Cross-entropy on a linear readout ``logits = W z + b``."""
    W = torch.as_tensor(np.asarray(w), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(bias), dtype=torch.float64)
    return InfluenceSnapshot(
        np.asarray(A, dtype=np.float64),
        np.asarray(h, dtype=np.float64),
        lambda z: F.cross_entropy((W @ z + b)[None], torch.tensor([label])),
        label,
    )


def decompose_heads(params, att) -> tuple[np.ndarray, np.ndarray]:
    """Head-averaged weights ``A`` and per-candidate vectors ``h`` with ``sum_i A_i h_i`` = context minus bias."""
    c = params.config
    W = params.attn_out.weight.detach().reshape(c.d_input, c.heads, c.head_dim)
    w = att.weights.detach()
    v = att.values.detach()
    contrib = torch.einsum("hn,ehd,hnd->ne", w, W, v)
    A = w.mean(0)
    return A.numpy().copy(), (contrib / A[:, None]).numpy()


def snapshot_from_tick(params, before: dict, att, head, tick_index: int, label: int) -> InfluenceSnapshot:
    """Freeze the state before a tick; the loss re-runs that one tick from the context onward."""
    A, h = decompose_heads(params, att)
    bias = params.attn_out.bias.detach()
    frozen = {k: (v.detach() if isinstance(v, torch.Tensor) else v) for k, v in before.items()}
    target = torch.tensor([label])

    def loss_fn(z: torch.Tensor) -> torch.Tensor:
        state = LatentState(**{k: (v.clone() if isinstance(v, torch.Tensor) else v) for k, v in frozen.items()})
        pre = synapse_step(params, state.e, bias + z)
        push_history(state, pre)
        state.e = neuron_update(params, state)
        sync = sync_update(params, state, state.e)
        return F.cross_entropy(head(sync.s_out, tick_index)[None], target)

    return InfluenceSnapshot(A, h, loss_fn, label)


@dataclass
class InfluenceReport:
    A: list[float] = field(default_factory=list)
    delta_loss: list[float] = field(default_factory=list)
    estimate: list[float] = field(default_factory=list)
    bound: list[float] = field(default_factory=list)
    max_taylor_residual: float = 0.0
    taylor_ratio_spread: float = 1.0
    taylor_spreads: list[float] = field(default_factory=list)  # max/min ratio per checked candidate
    taylor_checked: int = 0
    taylor_skipped: int = 0
    spearman_rho: float | None = None
    c_g: float = 0.0
    c_h: float = 0.0
    cauchy_schwarz_ok: bool = True
    taylor_ok: bool = True
    remainder_consistent: bool = True
    snapshots: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


TAYLOR_SCALES = (1e-2, 1e-3, 1e-4)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _second_derivative(snap: InfluenceSnapshot, z: np.ndarray, d: np.ndarray) -> float:
    """``d^T H(z) d`` by double backward."""
    zt = torch.tensor(z, dtype=torch.float64, requires_grad=True)
    dt = torch.as_tensor(d, dtype=torch.float64)
    with torch.enable_grad():
        (g,) = torch.autograd.grad(snap.loss_fn(zt), zt, create_graph=True, allow_unused=True)
        if g is None or not g.requires_grad:
            return 0.0
        (hd,) = torch.autograd.grad(g @ dt, zt, allow_unused=True)
    return 0.0 if hd is None else float(hd @ dt)


def taylor_residual(snap: InfluenceSnapshot, i: int, s: float) -> float:
    """``L(s) - L(0) - s L'(0)`` for the mask scaling ``A_i -> (1 - s) A_i``.

    Evaluated as the integral remainder ``s^2 int_0^1 (1 - v) L''(s v) dv``
    (8-point Gauss-Legendre), which avoids the cancellation that swamps the
    direct difference once ``s A_i`` is tiny.
    """
    d = snap.A[i] * snap.h[i]
    z0 = snap.z()
    v = 0.5 * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS
    vals = [_second_derivative(snap, z0 - s * vk * d, d) for vk in v]
    return float(s * s * np.sum(w * (1.0 - v) * np.asarray(vals)))


def taylor_ratios(snap: InfluenceSnapshot, i: int, estimate: float, scales=TAYLOR_SCALES):
    """``residual(s) / s^2`` per scale plus whether the direct difference agrees where it is resolvable.

    Returns ``(ratios, consistent)``; ratios is None when the curvature along
    the mask direction vanishes (the residual is then identically zero).
    """
    base = abs(snap.loss())
    noise = 1e3 * np.finfo(np.float64).eps * max(1.0, base)
    consistent = True
    res = []
    for s in scales:
        r = taylor_residual(snap, i, s)
        direct = mask_influence_oracle(snap, i, s) - s * estimate
        if abs(direct) > noise and abs(direct - r) > 1e-3 * abs(direct) + noise:
            consistent = False
        res.append(abs(r))
    if min(res) <= np.finfo(np.float64).tiny:
        return None, consistent
    return [r / s**2 for r, s in zip(res, scales)], consistent


def analyse_snapshots(snaps: list[InfluenceSnapshot], ratio_tolerance: float = 4.0) -> InfluenceReport:
    rep = InfluenceReport(snapshots=len(snaps))
    spread = 1.0
    for snap in snaps:
        gz = snap.grad_z()
        gA = snap.h @ gz
        rep.c_g = max(rep.c_g, float(np.linalg.norm(gz)))
        rep.c_h = max(rep.c_h, float(np.linalg.norm(snap.h, axis=1).max()))
        for i, a in enumerate(snap.A):
            est = first_order_estimate(float(a), float(gA[i]))
            bnd = influence_bound(float(a), snap.h[i], gz)
            dl = mask_influence_oracle(snap, i)
            rep.A.append(float(a))
            rep.delta_loss.append(dl)
            rep.estimate.append(est)
            rep.bound.append(bnd)
            rep.max_taylor_residual = max(rep.max_taylor_residual, abs(dl - est))
            # exact inequality up to the rounding of the two dot products
            if abs(est) > bnd * (1 + 1e-12) + 1e-15:
                rep.cauchy_schwarz_ok = False
            ratios, consistent = taylor_ratios(snap, i, est)
            rep.remainder_consistent &= consistent
            if ratios is None:
                rep.taylor_skipped += 1
                continue
            rep.taylor_checked += 1
            rep.taylor_spreads.append(max(ratios) / min(ratios))
            spread = max(spread, rep.taylor_spreads[-1])
    rep.taylor_ratio_spread = spread
    rep.taylor_ok = spread <= ratio_tolerance and rep.remainder_consistent
    if len(rep.A) > 1 and np.ptp(rep.A) > 0 and np.ptp(np.abs(rep.delta_loss)) > 0:
        rep.spearman_rho = float(spearmanr(rep.A, np.abs(rep.delta_loss)).statistic)
    return rep


def collect_snapshots(params, instance, rconfig: ReasonerConfig, cache=None, stub=None, scale: int = 0, ticks="t_star"):
    """Snapshots at ``scale``; ``ticks`` is "t_star", "all", or a list of 0-based tick indices."""
    cache = FeatureCache() if cache is None else cache
    stub = EncoderStub(instance.config) if stub is None else stub
    seen = []

    def hook(run, i, before, att, head):
        if run.scale == scale:
            seen.append((i, before, att, head))

    with torch.no_grad():
        ro = rollout(params, instance, rconfig, cache, stub, stopping=False, hook=hook)
    if ticks == "t_star":
        keep = {ro.runs[scale].t_star}
    elif ticks == "all":
        keep = {i for i, *_ in seen}
    else:
        keep = set(ticks)
    return [snapshot_from_tick(params, b, a, h, i, instance.label) for i, b, a, h in seen if i in keep]


def verify_influence(params, instances, rconfig: ReasonerConfig, bank: FeatureBank | None = None, stub=None, ticks="t_star") -> InfluenceReport:
    bank = FeatureBank() if bank is None else bank
    snaps = []
    for inst in instances:
        snaps.extend(collect_snapshots(params, inst, rconfig, bank.for_instance(inst), stub, ticks=ticks))
    return analyse_snapshots(snaps)


# ---------------------------------------------------------------- error bound


def binary_entropy(p: float) -> float:
    """``H_b(p)`` in bits."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def _check_h(h_bits: float, n: int) -> float:
    if n < 2:
        raise ValueError("fano bound needs N >= 2")
    top = math.log2(n)
    if h_bits < 0 or h_bits > top + 1e-12:
        raise ValueError(f"conditional entropy {h_bits} bits outside [0, log2 {n} = {top}]")
    return min(h_bits, top)


def _invert_binary_entropy(h_bits: float) -> float:
    """Smallest ``p`` in [0, 1/2] with ``H_b(p) >= h_bits``."""
    if h_bits <= 0:
        return 0.0
    if h_bits >= 1.0:
        return 0.5
    return bisect(lambda p: binary_entropy(p) - h_bits, 0.0, 0.5, xtol=1e-10)


def fano_bound(h_bits: float, n: int) -> float:
    """Lower bound on error probability from ``H(Y|Yhat)`` in bits."""
    h = _check_h(h_bits, n)
    if n == 2:
        return _invert_binary_entropy(h)
    return max(0.0, (h - 1.0) / math.log2(n - 1))


def fano_implicit_bound(h_bits: float, n: int) -> float:
    """Smallest ``P`` with ``H_b(P) + P log2(N-1) >= H``."""
    h = _check_h(h_bits, n)
    if n == 2:
        return _invert_binary_entropy(h)
    if h <= 0:
        return 0.0
    top = (n - 1) / n
    g = lambda p: binary_entropy(p) + p * math.log2(n - 1) - h  # noqa: E731
    if g(top) <= 0:
        return top
    return bisect(g, 0.0, top, xtol=1e-10)


def _check_joint(joint) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or max(p.shape) > 16:
        raise ValueError("joint must be a 2-D table over alphabets of at most 16 states")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("joint is not a probability distribution")
    return p


def conditional_entropy(joint) -> float:
    """``H(Y|Z)`` in bits for a table indexed ``[y, z]``."""
    p = _check_joint(joint)
    pz = p.sum(0)
    h = 0.0
    for z in np.flatnonzero(pz > 0):
        q = p[:, z] / pz[z]
        q = q[q > 0]
        h -= pz[z] * float(np.sum(q * np.log2(q)))
    return h


def dpi_check(joint, f) -> bool:
    """``H(Y|Z) <= H(Y|f(Z))`` by enumeration."""
    p = _check_joint(joint)
    f = np.asarray(f, dtype=np.int64)
    if f.shape != (p.shape[1],) or np.any(f < 0):
        raise ValueError("decision rule must map every Z state to a non-negative label")
    coarse = np.zeros((p.shape[0], int(f.max()) + 1))
    for z, yhat in enumerate(f):
        coarse[:, yhat] += p[:, z]
    return conditional_entropy(p) <= conditional_entropy(coarse) + 1e-12


@dataclass
class FanoReport:
    delta: float
    num_classes: int
    count: int
    h_cond_bits: float | None = None
    bound: float | None = None
    implicit_bound: float | None = None
    empirical_error: float | None = None
    bound_satisfied: bool | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def stopping_identity(probs, delta: float) -> bool:
    """Whether ``C >= delta`` and ``H <= (1 - delta) log N`` agree for ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    n = p.size
    c = confidence(p)
    if abs(c - delta) <= 1e-15:
        return True  # on the boundary the two forms differ only by rounding
    return (c >= delta) == (entropy(p) <= (1.0 - delta) * math.log(n))


def fano_report(probs, labels, delta: float, weights=None) -> FanoReport:
    """Bucket = rows with confidence >= delta; mean predictive entropy stands in for ``H(Y|Yhat)``."""
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    n = P.shape[1]
    w = np.ones(len(P)) if weights is None else np.asarray(weights, dtype=np.float64)
    conf = np.array([confidence(p) for p in P])
    keep = conf >= delta
    rep = FanoReport(delta=float(delta), num_classes=n, count=int(keep.sum()))
    if not keep.any() or w[keep].sum() <= 0:
        rep.note = "empty bucket, skipped"
        return rep
    wk = w[keep] / w[keep].sum()
    h = float(np.sum(wk * np.array([entropy(p) for p in P[keep]]))) / math.log(2)
    h = min(h, math.log2(n))
    rep.h_cond_bits = h
    rep.bound = fano_bound(h, n)
    rep.implicit_bound = fano_implicit_bound(h, n)
    rep.empirical_error = float(np.sum(wk * (P[keep].argmax(1) != y[keep])))
    rep.bound_satisfied = rep.empirical_error >= rep.implicit_bound - 1e-12
    return rep


def verify_fano(probs, labels, deltas, weights=None) -> list[FanoReport]:
    P = np.asarray(probs, dtype=np.float64)
    for d in deltas:
        for p in P:
            if not stopping_identity(p, d):
                raise AssertionError(f"confidence/entropy threshold identity broken at delta={d}")
    return [fano_report(P, labels, d, weights) for d in deltas]


def model_fano_reports(params, instances, rconfig: ReasonerConfig, deltas, bank: FeatureBank | None = None, stub=None) -> list[FanoReport]:
    """Per threshold: run inference and bucket the instances that stopped on confidence."""
    bank = FeatureBank() if bank is None else bank
    out = []
    for d in deltas:
        cfg = ReasonerConfig(**{**asdict(rconfig), "confidence_threshold": float(d)})
        probs, labels = [], []
        for inst in instances:
            t = infer(inst, params, cfg, bank.for_instance(inst), stub)
            if t.stop == THRESHOLD_MET:
                probs.append(t.final_probs)
                labels.append(inst.label)
        if not probs:
            out.append(FanoReport(delta=float(d), num_classes=params.config.num_classes, count=0, note="empty bucket, skipped"))
            continue
        out.extend(verify_fano(np.asarray(probs), labels, [d]))
    return out
