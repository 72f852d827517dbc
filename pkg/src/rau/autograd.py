"""Reverse-mode gradients through unrolled recurrent sequences (BPTT).

The forward passes in `cells` and `models` record StepTraces; this
module replays them backwards, accumulating exact analytic gradients
for every parameter tensor. Keys in the resulting `Grads` mirror
`cells.iter_tensors` paths over the parameter container, so optimizer
updates and finite-difference checks can walk the same structure.

`fd_gradient` is the independent oracle: central differences of any
scalar function of the parameters, one coordinate at a time. It shares
no code with the analytic path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cells import CellParams, StepTrace, iter_tensors, step, zero_state
from .linalg import ContractError, NumericError

GRADCHECK_TOLERANCE = 1e-5


class Grads(dict):
    """Gradient buffers keyed by dotted tensor path."""

    @classmethod
    def zeros_like(cls, params) -> "Grads":
        return cls((name, np.zeros_like(arr)) for name, arr in iter_tensors(params))

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.values())))

    def scale_(self, s: float) -> "Grads":
        for g in self.values():
            g *= s
        return self

    def add_(self, other: "Grads", coeff: float = 1.0) -> "Grads":
        for k, g in other.items():
            self[k] += coeff * g
        return self


def clip_global_norm(g: Grads, max_norm: float) -> Grads:
    """Scale all buffers by max_norm/||g|| when the global norm exceeds max_norm."""
    if max_norm <= 0:
        raise ContractError("clip_global_norm: max_norm must be positive")
    norm = g.global_norm()
    if norm > max_norm:
        g.scale_(max_norm / norm)
    return g


def _acc_outer(dw: np.ndarray, da: np.ndarray, inp: np.ndarray) -> None:
    if da.ndim == 1:
        dw += np.outer(da, inp)
    else:
        dw += da.T @ inp


def _acc_bias(db: np.ndarray, da: np.ndarray) -> None:
    if da.ndim == 1:
        db += da
    else:
        db += da.sum(axis=0)


def _gru_branch_backward(p, tr: StepTrace, dz, dhc, g, prefix, m):
    """Backward through the shared update/reset/candidate path.

    Returns (dx, dh_prev contribution). dz and dhc are the upstream
    gradients on the update gate and the candidate.
    """
    h_prev = tr.xh[..., m:]
    dac = dhc * (1.0 - tr.hc * tr.hc)
    _acc_outer(g[prefix + "w_c"], dac, tr.xrh)
    _acc_bias(g[prefix + "b_c"], dac)
    dxrh = dac @ p.w_c
    dx = dxrh[..., :m].copy()
    drh = dxrh[..., m:]
    dr = drh * h_prev
    dhp = drh * tr.r
    dar = dr * tr.r * (1.0 - tr.r)
    _acc_outer(g[prefix + "w_r"], dar, tr.xh)
    _acc_bias(g[prefix + "b_r"], dar)
    daz = dz * tr.z * (1.0 - tr.z)
    _acc_outer(g[prefix + "w_z"], daz, tr.xh)
    _acc_bias(g[prefix + "b_z"], daz)
    dxh = dar @ p.w_r + daz @ p.w_z
    dx += dxh[..., :m]
    dhp = dhp + dxh[..., m:]
    return dx, dhp


def _gru_step_backward(p, tr: StepTrace, dh, g: Grads, prefix: str):
    m = p.input_size
    h_prev = tr.xh[..., m:]
    dz = dh * (tr.hc - h_prev)
    dhc = dh * tr.z
    dx, dhp = _gru_branch_backward(p, tr, dz, dhc, g, prefix, m)
    dhp = dhp + dh * (1.0 - tr.z)
    return dx, dhp


def _rau_step_backward(p, tr: StepTrace, dh, g: Grads, prefix: str):
    m = p.input_size
    h_prev = tr.xh[..., m:]
    mix = (tr.hc + tr.ha) / 2.0
    dz = dh * (mix - h_prev)
    dmix = dh * tr.z
    dhc = dmix * 0.5
    dha = dmix * 0.5
    # attention branch
    dau = dha * (1.0 - tr.ha * tr.ha)
    _acc_outer(g[prefix + "w_u"], dau, tr.v)
    _acc_bias(g[prefix + "b_u"], dau)
    dv = dau @ p.w_u
    du = dv * tr.xh
    dxh_att = dv * tr.u
    # softmax backward: dalpha = u * (du - <du, u>)
    inner = np.sum(du * tr.u, axis=-1, keepdims=True)
    dalpha = tr.u * (du - inner)
    _acc_outer(g[prefix + "w_a"], dalpha, tr.xh)
    _acc_bias(g[prefix + "b_a"], dalpha)
    dxh_att = dxh_att + dalpha @ p.w_a
    # shared gru branch
    dx, dhp = _gru_branch_backward(p.gru, tr, dz, dhc, g, prefix + "gru.", m)
    dx += dxh_att[..., :m]
    dhp = dhp + dxh_att[..., m:] + dh * (1.0 - tr.z)
    return dx, dhp


def _lstm_step_backward(p, tr: StepTrace, dh, dc_in, g: Grads, prefix: str):
    m = p.input_size
    tc = np.tanh(tr.c)
    do = dh * tc
    dc = dc_in + dh * tr.o * (1.0 - tc * tc)
    df = dc * tr.c_prev
    di = dc * tr.g
    dg = dc * tr.i
    dc_prev = dc * tr.f
    daf = df * tr.f * (1.0 - tr.f)
    dai = di * tr.i * (1.0 - tr.i)
    dao = do * tr.o * (1.0 - tr.o)
    dag = dg * (1.0 - tr.g * tr.g)
    _acc_outer(g[prefix + "w_f"], daf, tr.xh)
    _acc_bias(g[prefix + "b_f"], daf)
    _acc_outer(g[prefix + "w_i"], dai, tr.xh)
    _acc_bias(g[prefix + "b_i"], dai)
    _acc_outer(g[prefix + "w_o"], dao, tr.xh)
    _acc_bias(g[prefix + "b_o"], dao)
    _acc_outer(g[prefix + "w_g"], dag, tr.xh)
    _acc_bias(g[prefix + "b_g"], dag)
    dxh = daf @ p.w_f + dai @ p.w_i + dao @ p.w_o + dag @ p.w_g
    return dxh[..., :m].copy(), dxh[..., m:].copy(), dc_prev


def backward_cell_sequence(
    kind: str,
    params: CellParams,
    traces: Sequence[StepTrace],
    dh_last: np.ndarray | None = None,
    dh_steps: Sequence[np.ndarray] | None = None,
    grads: Grads | None = None,
    prefix: str = "",
):
    """BPTT over one cell layer's recorded steps.

    dh_last seeds the gradient at the final hidden state; dh_steps adds
    a per-step contribution (e.g. from a head or an upper layer) before
    each step's backward. Accumulates into `grads` under `prefix` and
    returns (grads, dx_steps, dh0) where dx_steps[t] is the gradient of
    that step's input.
    """
    if grads is None:
        grads = Grads((prefix + name if prefix else name, np.zeros_like(arr)) for name, arr in iter_tensors(params))
    T = len(traces)
    dx_steps: list = [None] * T
    dh = None
    dc = None
    for t in reversed(range(T)):
        tr = traces[t]
        if dh is None:
            ref = tr.z if tr.z is not None else tr.f
            dh = np.zeros_like(ref)
            if dh_last is not None:
                dh = dh + dh_last
        if dh_steps is not None and dh_steps[t] is not None:
            dh = dh + dh_steps[t]
        if kind == "gru":
            dx, dh = _gru_step_backward(params, tr, dh, grads, prefix)
        elif kind == "rau":
            dx, dh = _rau_step_backward(params, tr, dh, grads, prefix)
        elif kind == "lstm":
            if dc is None:
                dc = np.zeros_like(dh)
            dx, dh, dc = _lstm_step_backward(params, tr, dh, dc, grads, prefix)
        else:
            raise ContractError(f"unknown cell kind {kind!r}")
        dx_steps[t] = dx
    return grads, dx_steps, dh


@dataclass
class Tape:
    """Forward record of one loss evaluation, replayable in reverse.

    kind "cell" holds a single recorded cell layer; "classifier" and
    "lm" add head, dropout, and optional embedding segments recorded by
    the model forwards. Parameter references are shared, not copied, so
    a tape is only valid until the parameters are updated.
    """

    kind: str
    cell_kind: str
    cell_params: list
    traces: list
    cell_prefixes: list = field(default_factory=lambda: [""])
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None
    head_in: object = None
    in_masks: list | None = None
    out_masks: object = None
    token_ids: np.ndarray | None = None
    emb: np.ndarray | None = None
    emb_key: str = "embedding"
    head_keys: tuple = ("w_out", "b_out")
    model_params: object = None


def _zeros_for_tape(tape: Tape) -> Grads:
    target = tape.model_params if tape.model_params is not None else tape.cell_params[0]
    return Grads.zeros_like(target)


def backward(tape: Tape, loss_grad) -> Grads:
    """Exact gradients of the recorded scalar loss w.r.t. every parameter.

    loss_grad is the gradient at the tape's output: d(loss)/d(logits)
    for model tapes, d(loss)/d(h_T) (or a per-step list) for bare cell
    tapes.
    """
    grads = _zeros_for_tape(tape)

    if tape.kind == "cell":
        params = tape.cell_params[0]
        traces = tape.traces[0]
        if isinstance(loss_grad, (list, tuple)):
            if len(loss_grad) != len(traces):
                raise ContractError("backward: per-step loss_grad length != trace length")
            backward_cell_sequence(tape.cell_kind, params, traces, dh_steps=loss_grad, grads=grads, prefix=tape.cell_prefixes[0])
        else:
            backward_cell_sequence(tape.cell_kind, params, traces, dh_last=loss_grad, grads=grads, prefix=tape.cell_prefixes[0])
        return grads

    n_layers = len(tape.cell_params)
    w_key, b_key = tape.head_keys

    if tape.kind == "classifier":
        dlogits = np.asarray(loss_grad)
        _acc_outer(grads[w_key], dlogits, tape.head_in)
        _acc_bias(grads[b_key], dlogits)
        dh = dlogits @ tape.head_w
        if tape.out_masks is not None:
            dh = dh * tape.out_masks
        dh_steps = None
        dh_last = dh
    elif tape.kind == "lm":
        T = len(tape.traces[0])
        head_in = tape.head_in  # (T, B, n)
        vocab = tape.head_w.shape[0]
        dl = np.asarray(loss_grad).reshape(head_in.shape[0], head_in.shape[1], vocab)
        flat = dl.reshape(-1, vocab)
        grads[w_key] += flat.T @ head_in.reshape(-1, head_in.shape[2])
        grads[b_key] += flat.sum(axis=0)
        dh_all = (flat @ tape.head_w).reshape(head_in.shape)
        if tape.out_masks is not None:
            dh_all = dh_all * tape.out_masks
        dh_steps = [dh_all[t] for t in range(T)]
        dh_last = None
    else:
        raise ContractError(f"unknown tape kind {tape.kind!r}")

    dx_steps = None
    for layer in reversed(range(n_layers)):
        _, dx_steps, _ = backward_cell_sequence(
            tape.cell_kind,
            tape.cell_params[layer],
            tape.traces[layer],
            dh_last=dh_last,
            dh_steps=dh_steps,
            grads=grads,
            prefix=tape.cell_prefixes[layer] + "." if tape.cell_prefixes[layer] else "",
        )
        mask_row = tape.in_masks[layer] if tape.in_masks is not None else None
        if mask_row is not None:
            dx_steps = [dx * mask_row[t] for t, dx in enumerate(dx_steps)]
        if layer > 0:
            dh_steps = dx_steps
            dh_last = None

    if tape.emb is not None and tape.token_ids is not None:
        demb = grads[tape.emb_key]
        ids = tape.token_ids
        for t, dx in enumerate(dx_steps):
            step_ids = ids[..., t]
            if dx.ndim == 1:
                demb[int(step_ids)] += dx
            else:
                np.add.at(demb, step_ids, dx)
    return grads


def fd_gradient(f: Callable, params, epsilon: float = 1e-5) -> Grads:
    """Central-difference gradient oracle: (f(p+eps*e) - f(p-eps*e)) / 2eps per coordinate."""
    if epsilon <= 0:
        raise ContractError("fd_gradient: epsilon must be positive")
    out = Grads()
    for name, arr in iter_tensors(params):
        if not arr.flags.c_contiguous:
            raise ContractError(f"fd_gradient: tensor {name} must be contiguous to perturb in place")
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            f_plus = f(params)
            flat[idx] = orig - epsilon
            f_minus = f(params)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"fd_gradient: non-finite loss while perturbing {name}[{idx}]", index=idx)
            gflat[idx] = (f_plus - f_minus) / (2.0 * epsilon)
        out[name] = g
    return out


def relative_errors(analytic: Grads, numeric: Grads) -> dict[str, float]:
    """Worst elementwise relative error per tensor: |a-b| / max(1e-8, |a|+|b|)."""
    report = {}
    for name in analytic:
        a = analytic[name]
        b = numeric[name]
        denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
        report[name] = float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
    return report


def gradcheck_cell(kind: str, m: int, n: int, T: int, trials: int, seed: int, epsilon: float = 1e-5, perturb: float = 0.0):
    """Compare BPTT gradients against central differences on random instances.

    The loss is a fixed random linear functional of every step's hidden
    state, which routes gradient through all time steps and every gate.
    Returns {tensor path: worst relative error across trials}. perturb
    injects an offset into one analytic component (negative control).
    """
    from .cells import init_cell
    from .linalg import Rng

    if trials < 1:
        raise ContractError("gradcheck_cell: trials must be >= 1")
    rng = Rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        params = init_cell(kind, m, n, 0.5, rng)
        xs = rng.uniform(-1.0, 1.0, size=(T, m))
        gs = rng.uniform(-1.0, 1.0, size=(T, n))

        def forward_loss(p):
            state = zero_state(kind, n)
            total = 0.0
            for t in range(T):
                state, _ = step(kind, p, xs[t], state)
                total += float(gs[t] @ state.h)
            return total

        state = zero_state(kind, n)
        traces = []
        for t in range(T):
            state, tr = step(kind, params, xs[t], state)
            traces.append(tr)
        tape = Tape(kind="cell", cell_kind=kind, cell_params=[params], traces=[traces])
        analytic = backward(tape, [gs[t] for t in range(T)])
        if perturb:
            first = next(iter(analytic))
            analytic[first].reshape(-1)[0] += perturb
        numeric = fd_gradient(forward_loss, params, epsilon)
        for name, err in relative_errors(analytic, numeric).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
