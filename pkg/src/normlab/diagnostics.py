"""Gradient-flow probes, the Jacobian-chain oracle, and representation analyses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, NormlabError
from .layers import layer_norm
from .model import PAD, Model, loss, token_nll
from .strategies import NormStrategy
from .tasks import Batch
from .tensor import Tensor, backward, no_grad


class UndefinedSimilarityError(NormlabError):
    """Every position had a zero representation vector."""


def _norm(a) -> float:
    return float(np.linalg.norm(a)) if a is not None else 0.0


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """``|approx - exact| / max(|approx|, |exact|)``; zero when both vanish."""
    denom = max(np.linalg.norm(approx), np.linalg.norm(exact))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(approx) - np.asarray(exact)) / denom)


@dataclass
class ProbeReport:
    step: int
    strategy: str
    loss: float
    nll: float
    input_grad_norms: list
    param_grad_norms: list
    ln_grad_norms: list
    global_grad_norm: float
    diverged: bool = False
    diverged_sublayer: int | None = None
    encoder_sublayers: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def stack_spreads(self) -> tuple[float, float]:
        """max / min of the input-gradient norms within the encoder and within the decoder."""
        norms = np.asarray(self.input_grad_norms)
        k = self.encoder_sublayers
        return tuple(float(part.max() / part.min()) for part in (norms[:k], norms[k:]))

    @property
    def input_grad_spread(self) -> float:
        """Largest within-stack max / min ratio of the input-gradient norms.

        The two stacks are kept apart because encoder gradients reach the loss
        only through cross-attention, whose branch scale is not a depth effect.
        """
        return max(self.stack_spreads())


def _first_nonfinite(arrays) -> int | None:
    for i, a in enumerate(arrays):
        if a is not None and not np.all(np.isfinite(a)):
            return i
    return None


def grad_probe(model: Model, batch: Batch, t: int, smoothing: float = 0.1, combine=None) -> ProbeReport:
    """One forward/backward pass recording per-sublayer gradient norms.

    Dropout is never applied here. Parameter gradients of the model are
    overwritten.
    """
    model.zero_grad()
    with np.errstate(all="ignore"):
        out = model.forward(batch.src, batch.tgt_in, t=t, train_mode=False, combine=combine, retain=True)
        E = loss(out.logits, batch.tgt_out, smoothing)
        backward(E)

    inputs = out.sublayer_inputs
    bad = _first_nonfinite([s.data for s in out.sublayer_outputs])
    if bad is None and not np.isfinite(E.item()):
        bad = model.num_sublayers - 1
    if bad is None:
        bad = _first_nonfinite([s.grad for s in inputs])

    seen: set[int] = set()
    sq = 0.0
    for p in model.params.values():
        if id(p) in seen or p.grad is None:
            continue
        seen.add(id(p))
        sq += float(np.sum(p.grad * p.grad))
    return ProbeReport(
        step=int(t),
        strategy=model.cfg.strategy.kind,
        loss=E.item(),
        nll=token_nll(out.logits, batch.tgt_out),
        input_grad_norms=[_norm(s.grad) for s in inputs],
        param_grad_norms=[float(np.sqrt(sum(_norm(p.grad) ** 2 for p in sl.tensors().values())))
                          for sl in model.sublayers],
        ln_grad_norms=[float(np.hypot(_norm(sl.ln.gain.grad), _norm(sl.ln.bias.grad))) for sl in model.sublayers],
        global_grad_norm=float(np.sqrt(sq)),
        diverged=bad is not None,
        diverged_sublayer=bad,
        encoder_sublayers=len(model.encoder_sublayers),
    )


def ln_chain(model: Model):
    """Combination rule that drops every branch: x_{l+1} = LN_l(x_l)."""
    eps = model.cfg.ln_eps

    def combine(sl, x, f, t):
        return layer_norm(x, sl.ln, eps)

    return combine


def ln_chain_probe(model: Model, batch: Batch, smoothing: float = 0.1) -> ProbeReport:
    """Probe of the pure LayerNorm chain built from the model's own LN parameters."""
    return grad_probe(model, batch, 0, smoothing, combine=ln_chain(model))


# --------------------------------------------------------------------------
# Jacobian-chain oracle

MAX_ORACLE_WIDTH = 8
MAX_ORACLE_SUBLAYERS = 6
MAX_ORACLE_LEN = 3
MAX_ORACLE_BATCH = 2


def _check_oracle_size(model: Model, batch: Batch) -> None:
    cfg = model.cfg
    if cfg.d_model > MAX_ORACLE_WIDTH or model.num_sublayers > MAX_ORACLE_SUBLAYERS:
        raise ContractError(f"oracle needs d <= {MAX_ORACLE_WIDTH} and L <= {MAX_ORACLE_SUBLAYERS}")
    if max(batch.src.shape[1], batch.tgt_in.shape[1]) > MAX_ORACLE_LEN or batch.size > MAX_ORACLE_BATCH:
        raise ContractError(f"oracle needs sequence length <= {MAX_ORACLE_LEN} and batch <= {MAX_ORACLE_BATCH}")


def numeric_jacobian(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Dense Jacobian ``d fn(x) / d x`` (flattened) by Richardson-extrapolated central differences."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        def central(step):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += step
            xm[i] -= step
            return (fn(xp.reshape(x.shape)).reshape(-1) - fn(xm.reshape(x.shape)).reshape(-1)) / (2 * step)

        cols.append((4.0 * central(h / 2) - central(h)) / 3.0)
    return np.stack(cols, axis=1)


@dataclass
class OracleResult:
    max_error: float
    errors: list = field(default_factory=list)  # (side, l, relative error)


def _sublayer_map(model: Model, sl, ctx):
    def fn(arr):
        with no_grad():
            return model.apply_sublayer(sl, Tensor(arr), ctx).data
    return fn


def jacobian_chain_oracle(model: Model, batch: Batch, t: int = 0, smoothing: float = 0.1,
                          h: float = 1e-4) -> OracleResult:
    """Compare autodiff input gradients with a product of numeric sublayer Jacobians.

    For each stack (encoder, then decoder with the encoder memory held fixed)
    the gradient at the stack output is taken from autodiff and pulled back
    through ``d x_{l+1} / d x_l`` built column by column with finite
    differences. Returns the largest relative error over all sublayers.
    """
    _check_oracle_size(model, batch)
    model.zero_grad()
    out = model.forward(batch.src, batch.tgt_in, t=t, retain=True)
    backward(loss(out.logits, batch.tgt_out, smoothing))
    ctx = out.context
    ctx.ffn_hidden = None

    errors = []
    for side, states, sls in (("encoder", out.enc_states, model.encoder_sublayers),
                              ("decoder", out.dec_states, model.decoder_sublayers)):
        g = states[-1].grad.reshape(-1)
        for l in range(len(sls) - 1, -1, -1):
            J = numeric_jacobian(_sublayer_map(model, sls[l], ctx), states[l].data, h)
            g = g @ J
            errors.append((side, l, relative_error(g, states[l].grad.reshape(-1))))
    return OracleResult(max(e for _, _, e in errors), errors)


def residual_factor(model: Model, batch: Batch, l: int, t: int = 0) -> np.ndarray:
    """Jacobian of ``x -> x + alpha_t * F(x)`` for sublayer ``l`` (the quantity inside the LN).

    Built row by row with reverse-mode passes, so at ``alpha_t = 0`` it is the
    identity exactly.
    """
    out = model.forward(batch.src, batch.tgt_in, t=t)
    ctx = out.context
    ctx.ffn_hidden = None
    sl = model.sublayers[l]
    states = out.enc_states if sl.side == "encoder" else out.dec_states
    pos = sl.index if sl.side == "encoder" else sl.index - len(model.encoder_sublayers)
    alpha = model.cfg.strategy.branch_alpha(t)
    f = model.branch(sl, ctx)
    x0 = states[pos].data
    rows = []
    for i in range(x0.size):
        x = Tensor(x0, requires_grad=True)
        y = T.add(x, T.scale(f(x), alpha))
        backward(T.sum(T.mul(y, Tensor(np.eye(x0.size)[i].reshape(x0.shape)))))
        rows.append(x.grad.reshape(-1))
    model.zero_grad()
    return np.stack(rows)


@dataclass
class ApproxGap:
    alpha: float
    max_gap: float
    gaps: list  # (side, l, relative gap)
    true_norms: list
    approx_norms: list


def _ln_vjp(g: np.ndarray, x: np.ndarray, ln, eps: float) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    y = layer_norm(xt, ln, eps)
    backward(T.sum(T.mul(y, Tensor(g.reshape(x.shape)))))
    return xt.grad.reshape(-1)


def deepnorm_approx_gap(model: Model, batch: Batch, alpha: float, smoothing: float = 0.1) -> ApproxGap:
    """Gap between the DeepNorm input gradient and its large-alpha LN-chain limit.

    The limit replaces every sublayer Jacobian by that of a bare LayerNorm
    evaluated at the sublayer input: ``dE/dx_l ~ dE/dx_L * prod_k dLN(x_k)/dx_k``.
    """
    base = model.cfg.strategy
    if base.kind not in ("postln", "deepnorm", "branchnorm"):
        raise ContractError("the LN-chain limit applies to post-LN style models only")
    m = model.with_strategy(NormStrategy("deepnorm", alpha, alpha, base.beta_encoder, base.beta_decoder))
    m.zero_grad()
    out = m.forward(batch.src, batch.tgt_in, retain=True)
    backward(loss(out.logits, batch.tgt_out, smoothing))
    eps = m.cfg.ln_eps

    gaps, true_norms, approx_norms = [], [], []
    for side, states, sls in (("encoder", out.enc_states, m.encoder_sublayers),
                              ("decoder", out.dec_states, m.decoder_sublayers)):
        g = states[-1].grad.reshape(-1)
        for l in range(len(sls) - 1, -1, -1):
            g = _ln_vjp(g, states[l].data, sls[l].ln, eps)
            true = states[l].grad.reshape(-1)
            gaps.append((side, l, relative_error(g, true)))
            true_norms.append(_norm(true))
            approx_norms.append(_norm(g))
    model.zero_grad()
    return ApproxGap(alpha, max(x for _, _, x in gaps), gaps, true_norms, approx_norms)


# --------------------------------------------------------------------------
# representation analyses


def mean_cosine(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, int]:
    """Mean cosine similarity between row vectors of ``a`` and ``b``.

    Rows where ``mask`` is false are ignored. Rows where either vector is zero
    are skipped and counted; returns ``(mean, skipped)``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, np.shape(a)[-1])
    b = np.asarray(b, dtype=np.float64).reshape(-1, np.shape(b)[-1])
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        a, b = a[keep], b[keep]
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    skipped = int((~ok).sum())
    if not ok.any():
        raise UndefinedSimilarityError("all positions have zero representation vectors")
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return float(np.clip(cos, -1.0, 1.0).mean()), skipped


def positive_fraction(h: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Fraction of strictly positive entries, over rows selected by ``mask``."""
    h = np.asarray(h)
    rows = h.reshape(-1, h.shape[-1])
    if mask is not None:
        rows = rows[np.asarray(mask, dtype=bool).reshape(-1)]
    if rows.size == 0:
        return 0.0
    return float((rows > 0).mean())


def relu_sparsity(pre_activation: np.ndarray) -> float:
    return positive_fraction(np.maximum(pre_activation, 0.0))


@dataclass
class AnalysisReport:
    encoder_cosines: list = field(default_factory=list)
    decoder_cosines: list = field(default_factory=list)
    skipped_positions: int = 0
    sparsity: list = field(default_factory=list)  # one entry per ffn sublayer, model order
    sparsity_sides: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def layer_representations(model: Model, out) -> tuple[list, list]:
    """Embedding output followed by each layer's output, for encoder and decoder."""
    n_enc = 2
    n_dec = 3
    enc = [out.enc_states[0]] + out.enc_states[n_enc::n_enc]
    dec = [out.dec_states[0]] + out.dec_states[n_dec::n_dec]
    return enc, dec


def repr_similarity(model: Model, batch: Batch) -> AnalysisReport:
    """Adjacent-layer cosine similarity (encoder and decoder separately)."""
    with no_grad():
        out = model.forward(batch.src, batch.tgt_in)
    enc, dec = layer_representations(model, out)
    src_keep, tgt_keep = batch.src != PAD, batch.tgt_in != PAD
    report = AnalysisReport()
    for reps, keep, dest in ((enc, src_keep, report.encoder_cosines), (dec, tgt_keep, report.decoder_cosines)):
        for a, b in zip(reps, reps[1:]):
            cos, skipped = mean_cosine(a.data, b.data, keep)
            dest.append(cos)
            report.skipped_positions += skipped
    return report


def activation_sparsity(model: Model, batch: Batch) -> AnalysisReport:
    """Per feed-forward sublayer fraction of nonzero post-relu entries over non-pad positions."""
    with no_grad():
        out = model.forward(batch.src, batch.tgt_in)
    ffn = [sl for sl in model.sublayers if sl.kind == "ffn"]
    report = AnalysisReport()
    for sl, h in zip(ffn, out.ffn_hidden):
        keep = batch.src != PAD if sl.side == "encoder" else batch.tgt_in != PAD
        report.sparsity.append(positive_fraction(h.data, keep))
        report.sparsity_sides.append(sl.side)
    return report


def analyze(model: Model, batch: Batch) -> AnalysisReport:
    sim = repr_similarity(model, batch)
    sp = activation_sparsity(model, batch)
    sim.sparsity, sim.sparsity_sides = sp.sparsity, sp.sparsity_sides
    return sim
