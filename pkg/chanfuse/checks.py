"""
Gradient and oracle checks shared by the `gradcheck`/`selftest` commands and the tests.

A gradient check draws a random sample point from its generator, contracts the
module output with random weights into a scalar loss and compares the backward
pass with central differences. Oracle checks compare an implementation with a
brute-force reference.
"""

import itertools
import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import logsumexp

import chanfuse.kernels as kernels
from chanfuse.config import CGCSMode, EncoderConfig
from chanfuse.errors import InfeasibleLabelsError
from chanfuse.fusion import init_unet_fusion, unet_fuse_backward, unet_fuse_forward
from chanfuse.kernels import GradCheckReport, grad_check
from chanfuse.mfcca import (
    cfe_backward,
    cfe_forward,
    concat_project_backward,
    concat_project_forward,
    init_cfe,
    init_mfcca,
    mfcca_backward,
    mfcca_forward,
)
from chanfuse.model import (
    encode,
    encoder_layer_backward,
    encoder_layer_forward,
    init_layer_params,
    init_model,
    model_backward,
    temporal_attention_backward,
    temporal_attention_forward,
)
from chanfuse.params import ParamStore, init_linear
from chanfuse.scoring import macro_aggregate, rover_combine, wer
from chanfuse.selection import (
    QueryContext,
    afe_backward,
    afe_forward,
    cgcs_backward,
    cgcs_forward,
    fgcs_backward,
    fgcs_forward,
    grc_backward,
    grc_forward,
    init_afe,
    init_grc,
    init_outer_selection,
    init_projection_triple,
    outer_selection_backward,
    outer_selection_forward,
)

logger = logging.getLogger(__name__)

PRIMITIVE_TOL = 1e-6
RECURRENT_TOL = 1e-5
COMPOSITE_TOL = 1e-4
# smaller step where ReLU/PReLU kinks sit downstream of the perturbed value
KINKED_STEP = 1e-6


class Check(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    kind: str
    tolerance: float
    run: Callable[[np.random.Generator], float]


class CheckResult(BaseModel):
    name: str
    kind: str
    tolerance: float
    max_error: float
    seeds: int
    passed: bool


def weighted_check(
    name: str,
    tolerance: float,
    rng: np.random.Generator,
    forward: Callable,
    backward: Callable,
    inputs: Dict[str, np.ndarray],
    store: Optional[ParamStore] = None,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
) -> GradCheckReport:
    """
    Checks `backward` against central differences of sum(weights ⊙ forward()).

    `forward()` returns (output, cache); `backward(dout, cache)` returns input
    gradients keyed like `inputs` and accumulates parameter gradients into `store`.
    """
    out, cache = forward()
    weights = rng.normal(size=np.shape(out))

    def loss() -> float:
        return float(np.sum(weights * forward()[0]))

    if store is not None:
        store.zero_grad()
    analytic = dict(backward(weights, cache))
    arrays = dict(inputs)
    if store is not None:
        for param in store:
            arrays[param.name] = param.value
            analytic[param.name] = param.grad.copy()
    return grad_check(loss, arrays, analytic, h=h, max_coords=max_coords, rng=rng, name=name, tolerance=tolerance)


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------


def check_linear(rng: np.random.Generator) -> GradCheckReport:
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)

    def backward(dy, cache):
        dx, dW, db = kernels.linear_backward(dy, cache)
        return {"x": dx, "W": dW, "b": db}

    return weighted_check("linear", PRIMITIVE_TOL, rng, lambda: kernels.linear_forward(x, W, b), backward, {"x": x, "W": W, "b": b})


def check_softmax(rng: np.random.Generator) -> GradCheckReport:
    x = rng.normal(size=(3, 5))
    return weighted_check(
        "softmax", PRIMITIVE_TOL, rng, lambda: kernels.softmax_forward(x),
        lambda dy, cache: {"x": kernels.softmax_backward(dy, cache)}, {"x": x},
    )


def check_log_softmax(rng: np.random.Generator) -> GradCheckReport:
    x = rng.normal(size=(3, 5))
    return weighted_check(
        "log_softmax", PRIMITIVE_TOL, rng, lambda: kernels.log_softmax_forward(x),
        lambda dy, cache: {"x": kernels.log_softmax_backward(dy, cache)}, {"x": x},
    )


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 2.0, size=shape)


def check_prelu(rng: np.random.Generator) -> GradCheckReport:
    x, a = _away_from_zero(rng, (3, 4)), rng.uniform(0.1, 0.5, size=(3, 1))

    def backward(dy, cache):
        dx, da = kernels.prelu_backward(dy, cache)
        return {"x": dx, "a": da}

    return weighted_check("prelu", PRIMITIVE_TOL, rng, lambda: kernels.prelu_forward(x, a), backward, {"x": x, "a": a})


def check_sigmoid(rng: np.random.Generator) -> GradCheckReport:
    x = rng.normal(size=(3, 4))
    return weighted_check(
        "sigmoid", PRIMITIVE_TOL, rng, lambda: kernels.sigmoid_forward(x),
        lambda dy, cache: {"x": kernels.sigmoid_backward(dy, cache)}, {"x": x},
    )


def check_relu(rng: np.random.Generator) -> GradCheckReport:
    x = _away_from_zero(rng, (3, 4))
    return weighted_check(
        "relu", PRIMITIVE_TOL, rng, lambda: kernels.relu_forward(x),
        lambda dy, cache: {"x": kernels.relu_backward(dy, cache)}, {"x": x},
    )


def check_layer_norm(rng: np.random.Generator) -> GradCheckReport:
    x, gamma, beta = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)

    def backward(dy, cache):
        dx, dgamma, dbeta = kernels.layer_norm_backward(dy, cache)
        return {"x": dx, "gamma": dgamma, "beta": dbeta}

    return weighted_check(
        "layer_norm", PRIMITIVE_TOL, rng, lambda: kernels.layer_norm_forward(x, gamma, beta),
        backward, {"x": x, "gamma": gamma, "beta": beta},
    )


def check_conv2d(rng: np.random.Generator) -> GradCheckReport:
    x, k = rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3))

    def backward(dy, cache):
        dx, dk = kernels.conv2d_backward(dy, cache)
        return {"x": dx, "kernels": dk}

    return weighted_check("conv2d", PRIMITIVE_TOL, rng, lambda: kernels.conv2d_forward(x, k), backward, {"x": x, "kernels": k})


def check_gru_sequence(rng: np.random.Generator) -> GradCheckReport:
    frames, din, hidden = 5, 3, 4
    x = rng.normal(size=(frames, din))
    Wx = rng.uniform(-0.5, 0.5, size=(din, 3 * hidden))
    Uh = rng.uniform(-0.5, 0.5, size=(hidden, 3 * hidden))
    b = rng.uniform(-0.5, 0.5, size=3 * hidden)
    reverse = bool(rng.integers(2))

    def forward():
        states, final, cache = kernels.gru_sequence_forward(x, Wx, Uh, b, reverse)
        return np.concatenate([states, final[None]]), cache

    def backward(dy, cache):
        dx, dWx, dUh, db = kernels.gru_sequence_backward(dy[:-1], dy[-1], cache)
        return {"x": dx, "Wx": dWx, "Uh": dUh, "b": db}

    return weighted_check("gru_sequence", RECURRENT_TOL, rng, forward, backward, {"x": x, "Wx": Wx, "Uh": Uh, "b": b})


def check_ctc_loss(rng: np.random.Generator) -> GradCheckReport:
    frames, vocab = 6, 3
    log_probs, _ = kernels.log_softmax_forward(rng.normal(size=(frames, vocab + 1)))
    log_probs = np.ascontiguousarray(log_probs)
    labels = [int(v) for v in rng.integers(1, vocab + 1, size=2)]

    def forward():
        loss, cache = kernels.ctc_loss_forward(log_probs, labels)
        return np.array(loss), cache

    return weighted_check(
        "ctc_loss", RECURRENT_TOL, rng, forward,
        lambda dy, cache: {"log_probs": kernels.ctc_loss_backward(float(dy), cache)},
        {"log_probs": log_probs},
    )


# ----------------------------------------------------------------------------
# composite modules
# ----------------------------------------------------------------------------


def check_afe_embed(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_afe(store, "afe", 3, 3, 2, 4, rng)
    features = rng.normal(size=(2, 4, 3))
    return weighted_check(
        "afe_embed", RECURRENT_TOL, rng,
        lambda: afe_forward(store, "afe", features, 2),
        lambda dy, cache: {"features": afe_backward(store, "afe", dy, cache)},
        {"features": features}, store,
    )


def _cgcs_check(rng: np.random.Generator, mode: CGCSMode) -> GradCheckReport:
    store = ParamStore()
    init_projection_triple(store, "cgcs", 4, rng)
    q, k, v = rng.normal(size=(1, 1, 4)), rng.normal(size=(3, 1, 4)), rng.normal(size=(3, 4, 4))

    def forward():
        out, _, cache = cgcs_forward(store, "cgcs", q, k, v, mode)
        return out, cache

    def backward(dy, cache):
        dq, dk, dv = cgcs_backward(store, "cgcs", dy, cache)
        return {"q": dq, "k": dk, "v": dv}

    return weighted_check(f"cgcs_{mode.value}", COMPOSITE_TOL, rng, forward, backward, {"q": q, "k": k, "v": v}, store)


def check_cgcs_mix(rng: np.random.Generator) -> GradCheckReport:
    return _cgcs_check(rng, CGCSMode.mix)


def check_cgcs_mask(rng: np.random.Generator) -> GradCheckReport:
    return _cgcs_check(rng, CGCSMode.mask)


def check_grc(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_grc(store, "grc", 4, rng)
    x, h = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))

    def backward(dy, cache):
        dx, dh = grc_backward(store, "grc", dy, cache)
        return {"x": dx, "h": dh}

    return weighted_check("grc", COMPOSITE_TOL, rng, lambda: grc_forward(store, "grc", x, h), backward, {"x": x, "h": h}, store)


def check_fgcs(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_projection_triple(store, "fgcs", 4, rng)
    q, kv = rng.normal(size=(1, 4, 4)), rng.normal(size=(3, 4, 4))

    def forward():
        out, _, cache = fgcs_forward(store, "fgcs", q, kv)
        return out, cache

    def backward(dy, cache):
        dq, dkv = fgcs_backward(store, "fgcs", dy, cache)
        return {"q": dq, "kv": dkv}

    return weighted_check("fgcs", COMPOSITE_TOL, rng, forward, backward, {"q": q, "kv": kv}, store)


def _random_context(rng: np.random.Generator, channels: int, frames: int, dim: int) -> Dict[str, np.ndarray]:
    return {
        "a_ref": rng.normal(size=(1, 1, dim)),
        "a_channels": rng.normal(size=(channels, 1, dim)),
        "x_ref": rng.normal(size=(1, frames, dim)),
        "x_channels": rng.normal(size=(channels, frames, dim)),
    }


def check_outer_selection(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_outer_selection(store, "outer", 4, rng)
    arrays = _random_context(rng, 3, 4, 4)
    mode = CGCSMode.mask if rng.integers(2) else CGCSMode.mix

    def forward():
        out, _, cache = outer_selection_forward(store, "outer", QueryContext(**arrays), mode)
        return out, cache

    def backward(dy, cache):
        da_ref, da_channels, dx = outer_selection_backward(store, "outer", dy, cache)
        return {"a_ref": da_ref, "a_channels": da_channels, "x_ref": np.zeros_like(arrays["x_ref"]), "x_channels": dx}

    return weighted_check("outer_selection", COMPOSITE_TOL, rng, forward, backward, arrays, store)


def check_cfe_embed(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_cfe(store, "cfe", 3, 3, 1, 4, rng)
    cosipd = np.cos(rng.uniform(-np.pi, np.pi, size=(2, 5, 3)))
    return weighted_check(
        "cfe_embed", RECURRENT_TOL, rng,
        lambda: cfe_forward(store, "cfe", cosipd, 4, 1),
        lambda dy, cache: {"cosipd": cfe_backward(store, "cfe", dy, cache)},
        {"cosipd": cosipd}, store,
    )


def check_concat_project(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_linear(store, "concat", 8, 4, rng)
    h, c = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))

    def backward(dy, cache):
        dh, dc = concat_project_backward(store, "concat", dy, cache)
        return {"h": dh, "c": dc}

    return weighted_check(
        "concat_project", PRIMITIVE_TOL, rng, lambda: concat_project_forward(store, "concat", h, c),
        backward, {"h": h, "c": c}, store,
    )


def check_mfcca_attend(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_mfcca(store, "mfcca", 4, rng)
    x = rng.normal(size=(2, 3, 4))

    def forward():
        out, _, cache = mfcca_forward(store, "mfcca", x, f_ctx=1, heads=2)
        return out, cache

    return weighted_check(
        "mfcca_attend", COMPOSITE_TOL, rng, forward,
        lambda dy, cache: {"x": mfcca_backward(store, "mfcca", dy, cache)}, {"x": x}, store,
    )


def check_temporal_attention(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    for role in ("q", "k", "v", "o"):
        init_linear(store, f"mhsa.{role}", 4, 4, rng)
    x = rng.normal(size=(2, 3, 4))
    return weighted_check(
        "temporal_attention", COMPOSITE_TOL, rng,
        lambda: temporal_attention_forward(store, "mhsa", x, 2),
        lambda dy, cache: {"x": temporal_attention_backward(store, "mhsa", dy, cache)}, {"x": x}, store,
    )


def check_unet_fuse(rng: np.random.Generator) -> GradCheckReport:
    store = ParamStore()
    init_unet_fusion(store, "fusion", rng)
    x = rng.normal(size=(3, 4, 6))
    return weighted_check(
        "unet_fuse", COMPOSITE_TOL, rng,
        lambda: unet_fuse_forward(store, "fusion", x),
        lambda dy, cache: {"x": unet_fuse_backward(store, "fusion", dy, cache)},
        {"x": x}, store, h=KINKED_STEP, max_coords=60,
    )


def check_encoder_layer(rng: np.random.Generator) -> GradCheckReport:
    config = EncoderConfig(
        input_dim=4, cosipd_bins=3, layers=1, d_model=8, ffn_dim=16, heads=2, f_ctx=1,
        cgcs_mode=CGCSMode.mask if rng.integers(2) else CGCSMode.mix,
    )
    store = ParamStore()
    init_layer_params(store, "layers.0", config, 0, rng)
    arrays = _random_context(rng, 2, 3, 8)
    arrays["h"] = rng.normal(size=(2, 3, 8))
    arrays["c"] = rng.normal(size=(2, 3, 8))

    def forward():
        ctx = QueryContext(**{k: arrays[k] for k in ("a_ref", "a_channels", "x_ref", "x_channels")})
        out, _, cache = encoder_layer_forward(store, "layers.0", arrays["h"], ctx, arrays["c"], config)
        return out, cache

    def backward(dy, cache):
        dh, grads = encoder_layer_backward(store, "layers.0", dy, cache)
        result = {key: np.zeros_like(value) for key, value in arrays.items()}
        result.update(grads)
        result["h"] = dh
        return result

    return weighted_check(
        "encoder_layer", COMPOSITE_TOL, rng, forward, backward, arrays, store, h=KINKED_STEP, max_coords=60,
    )


def tiny_encoder_config(**overrides) -> EncoderConfig:
    values = dict(
        input_dim=5, cosipd_bins=3, layers=1, d_model=8, ffn_dim=16, heads=2, f_ctx=1,
        vocab_size=3, afe_hidden=3, afe_layers=1, cfe_hidden=3, cfe_layers=1,
    )
    values.update(overrides)
    return EncoderConfig(**values)


def check_model_forward(rng: np.random.Generator) -> GradCheckReport:
    config = tiny_encoder_config()
    store = init_model(config, rng)
    features = rng.normal(size=(2, 4, 5))
    ref_features = rng.normal(size=(1, 4, 5))
    cosipd = np.cos(rng.uniform(-np.pi, np.pi, size=(2, 5, 3)))

    def forward():
        trace, cache = encode(store, config, features, ref_features, cosipd)
        return trace.log_probs, cache

    def backward(dy, cache):
        model_backward(store, config, dy, cache)
        return {}

    return weighted_check("model_forward", COMPOSITE_TOL, rng, forward, backward, {}, store, h=KINKED_STEP, max_coords=40)


# ----------------------------------------------------------------------------
# oracles
# ----------------------------------------------------------------------------


def ctc_enumeration_loss(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """-log of the summed probability of every frame path that collapses to `labels`."""
    frames, classes = log_probs.shape
    scores = []
    for path in itertools.product(range(classes), repeat=frames):
        collapsed = [s for i, s in enumerate(path) if s != kernels.BLANK and (i == 0 or path[i - 1] != s)]
        if collapsed == list(labels):
            scores.append(sum(log_probs[t, s] for t, s in enumerate(path)))
    return -float(logsumexp(scores)) if scores else float("inf")


def check_ctc_oracle(rng: np.random.Generator) -> float:
    """
    Every label sequence with T <= 5, V <= 3, U <= 3 against path enumeration.

    Sequences that cannot fit in T frames must raise InfeasibleLabelsError; a
    missing error counts as an infinite mismatch.
    """
    worst = 0.0
    for frames in range(1, 6):
        for vocab in range(1, 4):
            log_probs, _ = kernels.log_softmax_forward(rng.normal(size=(frames, vocab + 1)))
            # path scores bucketed by the label sequence they collapse to
            buckets: Dict[tuple, list] = {}
            for path in itertools.product(range(vocab + 1), repeat=frames):
                collapsed = tuple(s for i, s in enumerate(path) if s != kernels.BLANK and (i == 0 or path[i - 1] != s))
                buckets.setdefault(collapsed, []).append(sum(log_probs[t, s] for t, s in enumerate(path)))
            for count in range(1, 4):
                for labels in itertools.product(range(1, vocab + 1), repeat=count):
                    if kernels.ctc_required_frames(labels) > frames:
                        try:
                            kernels.ctc_loss_forward(log_probs, labels)
                        except InfeasibleLabelsError:
                            continue
                        return float("inf")
                    loss, _ = kernels.ctc_loss_forward(log_probs, labels)
                    worst = max(worst, abs(loss + float(logsumexp(buckets[labels]))))
    return worst


def mfcca_reference(store: ParamStore, prefix: str, x: np.ndarray, f_ctx: int, heads: int) -> np.ndarray:
    """Materialises every (k, t) key set and attends directly."""
    channels, frames, dim = x.shape
    head_dim = dim // heads

    def project(role: str) -> np.ndarray:
        return x @ store.value(f"{prefix}.{role}.W") + store.value(f"{prefix}.{role}.b")

    q, k, v = project("q"), project("k"), project("v")
    merged = np.zeros_like(x)
    for c in range(channels):
        for t in range(frames):
            keys, values = [], []
            for delta in range(-f_ctx, f_ctx + 1):
                for other in range(channels):
                    inside = 0 <= t + delta < frames
                    keys.append(k[other, t + delta] if inside else np.zeros(dim))
                    values.append(v[other, t + delta] if inside else np.zeros(dim))
            keys, values = np.array(keys), np.array(values)
            for head in range(heads):
                cols = slice(head * head_dim, (head + 1) * head_dim)
                scores = keys[:, cols] @ q[c, t, cols] / np.sqrt(head_dim)
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                merged[c, t, cols] = weights @ values[:, cols]
    return merged @ store.value(f"{prefix}.o.W") + store.value(f"{prefix}.o.b")


def check_mfcca_oracle(rng: np.random.Generator, instances: int = 100) -> float:
    """Random (K, T, f_ctx, heads) draws; the first two pin K = 1 and f_ctx > T."""
    worst = 0.0
    for i in range(instances):
        channels, frames, f_ctx = int(rng.integers(1, 5)), int(rng.integers(1, 7)), int(rng.integers(0, 4))
        if i == 0:
            channels = 1
        elif i == 1:
            frames, f_ctx = 2, 3
        heads = int(rng.choice([1, 2]))
        store = ParamStore()
        init_mfcca(store, "mfcca", 4, rng)
        x = rng.normal(size=(channels, frames, 4))
        out, _, _ = mfcca_forward(store, "mfcca", x, f_ctx, heads)
        worst = max(worst, float(np.max(np.abs(out - mfcca_reference(store, "mfcca", x, f_ctx, heads)))))
    return worst


def edit_distance(ref: Sequence[str], hyp: Sequence[str], substitution: int = 1, indel: int = 1) -> int:
    """Weighted Levenshtein distance; unit weights give the word error count."""
    prev = [j * indel for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        row = [i * indel]
        for j in range(1, len(hyp) + 1):
            row.append(
                min(
                    prev[j] + indel,
                    row[j - 1] + indel,
                    prev[j - 1] + (substitution if ref[i - 1] != hyp[j - 1] else 0),
                )
            )
        prev = row
    return prev[-1]


# ranks alignments by errors first, then by insertions plus deletions
_TIE_SCALE = 1000


def wer_oracle_mismatches(max_length: int, vocabulary: Sequence[str] = ("a", "b", "c")) -> int:
    """
    Counts (ref, hyp) pairs up to `max_length` words where `wer` disagrees with the oracle.

    The oracle is an edit distance with substitution cost `_TIE_SCALE` and insertion or
    deletion cost `_TIE_SCALE + 1`: the quotient is the error count and the remainder the
    fewest insertions plus deletions among minimum-error alignments.
    """
    sentences = [list(words) for n in range(max_length + 1) for words in itertools.product(vocabulary, repeat=n)]
    mismatches = 0
    for ref in sentences:
        for hyp in sentences:
            counts = wer(ref, hyp)
            errors, indels = divmod(edit_distance(ref, hyp, _TIE_SCALE, _TIE_SCALE + 1), _TIE_SCALE)
            if (
                counts.errors != errors
                or counts.insertions + counts.deletions != indels
                or counts.deletions - counts.insertions != len(ref) - len(hyp)
            ):
                mismatches += 1
    return mismatches


def check_wer_oracle(rng: np.random.Generator) -> float:
    return float(wer_oracle_mismatches(4))


def check_macro_table(rng: np.random.Generator) -> float:
    dev = macro_aggregate([32.6, 33.5, 20.2])
    evaluation = macro_aggregate([35.5, 36.3, 28.6])
    return max(abs(dev.mean - 28.8), abs(dev.rounded - 28.8), abs(evaluation.mean - 33.4666))


def check_rover_fixture(rng: np.random.Generator) -> float:
    combined = rover_combine([["a", "b", "c"], ["a", "x", "c"], ["a", "b", "d"]])
    unanimous = rover_combine([["a", "b"]] * 3)
    return 0.0 if combined == ["a", "b", "c"] and unanimous == ["a", "b"] else 1.0


def _gradient(name: str, tolerance: float, fn: Callable[[np.random.Generator], GradCheckReport]) -> Check:
    return Check(name=name, kind="gradient", tolerance=tolerance, run=lambda rng: fn(rng).max_rel_error)


CHECKS: List[Check] = [
    _gradient("linear", PRIMITIVE_TOL, check_linear),
    _gradient("softmax", PRIMITIVE_TOL, check_softmax),
    _gradient("log_softmax", PRIMITIVE_TOL, check_log_softmax),
    _gradient("prelu", PRIMITIVE_TOL, check_prelu),
    _gradient("sigmoid", PRIMITIVE_TOL, check_sigmoid),
    _gradient("relu", PRIMITIVE_TOL, check_relu),
    _gradient("layer_norm", PRIMITIVE_TOL, check_layer_norm),
    _gradient("conv2d", PRIMITIVE_TOL, check_conv2d),
    _gradient("gru_sequence", RECURRENT_TOL, check_gru_sequence),
    _gradient("ctc_loss", RECURRENT_TOL, check_ctc_loss),
    _gradient("afe_embed", RECURRENT_TOL, check_afe_embed),
    _gradient("cgcs_mix", COMPOSITE_TOL, check_cgcs_mix),
    _gradient("cgcs_mask", COMPOSITE_TOL, check_cgcs_mask),
    _gradient("grc", COMPOSITE_TOL, check_grc),
    _gradient("fgcs", COMPOSITE_TOL, check_fgcs),
    _gradient("outer_selection", COMPOSITE_TOL, check_outer_selection),
    _gradient("cfe_embed", RECURRENT_TOL, check_cfe_embed),
    _gradient("concat_project", PRIMITIVE_TOL, check_concat_project),
    _gradient("mfcca_attend", COMPOSITE_TOL, check_mfcca_attend),
    _gradient("temporal_attention", COMPOSITE_TOL, check_temporal_attention),
    _gradient("unet_fuse", COMPOSITE_TOL, check_unet_fuse),
    _gradient("encoder_layer", COMPOSITE_TOL, check_encoder_layer),
    _gradient("model_forward", COMPOSITE_TOL, check_model_forward),
    Check(name="ctc_enumeration", kind="oracle", tolerance=1e-10, run=check_ctc_oracle),
    Check(name="mfcca_bruteforce", kind="oracle", tolerance=1e-12, run=check_mfcca_oracle),
    Check(name="wer_edit_distance", kind="oracle", tolerance=0.0, run=check_wer_oracle),
    Check(name="macro_table", kind="oracle", tolerance=0.05, run=check_macro_table),
    Check(name="rover_fixture", kind="oracle", tolerance=0.0, run=check_rover_fixture),
]


def check_names() -> List[str]:
    return [check.name for check in CHECKS]


def run_check(check: Check, seeds: Sequence[int]) -> CheckResult:
    worst = 0.0
    for seed in seeds:
        worst = max(worst, check.run(np.random.default_rng(seed)))
    passed = worst <= check.tolerance
    if not passed:
        logger.warning("Check %s failed: max error %.3e > %.1e", check.name, worst, check.tolerance)
    return CheckResult(
        name=check.name, kind=check.kind, tolerance=check.tolerance, max_error=worst, seeds=len(seeds), passed=passed,
    )


def run_checks(names: Optional[Sequence[str]] = None, seeds: Sequence[int] = tuple(range(10))) -> List[CheckResult]:
    """Runs the named checks (all when None) over `seeds`, oracles once with the first seed."""
    selected = CHECKS if names is None else [check for check in CHECKS if check.name in set(names)]
    results = []
    for check in selected:
        check_seeds = seeds if check.kind == "gradient" else list(seeds)[:1]
        results.append(run_check(check, check_seeds))
    return results
