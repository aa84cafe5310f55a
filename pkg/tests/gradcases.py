"""Random gradient-check instances shared by the unit and acceptance suites."""

import numpy as np

from lrflow import autodiff as ad
from lrflow.flow import FlowModel, flow_loss
from lrflow.nets import VelocityField
from lrflow.vae import SeqVae, vae_loss

H = 1e-4


def _away_from(x, points, gap=0.05):
    # keep samples off kinks so central differences are valid
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.sign(x - p + 1e-300) * gap * 2, x)
    return x


def _reduce(out, w):
    """Scalar ``sum(out * w)`` so every output element carries gradient."""
    return ad.sum_(ad.mul(out, ad.Tensor(w)))


def op_case(kind, rng):
    """Returns ``(build, arrays)``; ``build(list_of_tensors)`` gives a scalar Tensor."""
    n = rng.standard_normal
    if kind == "matmul":
        arrays = [n((3, 4)), n((4, 2))]
        w = n((3, 2))
        return lambda t: _reduce(ad.matmul(t[0], t[1]), w), arrays
    if kind in ("add", "sub", "mul"):
        fn = getattr(ad, kind)
        arrays = [n((3, 4)), n((3, 4))]
        w = n((3, 4))
        return lambda t: _reduce(fn(t[0], t[1]), w), arrays
    if kind == "scale":
        c = float(n())
        w = n((2, 5))
        return lambda t: _reduce(ad.scale(t[0], c), w), [n((2, 5))]
    if kind == "add_bias":
        w = n((4, 3))
        return lambda t: _reduce(ad.add_bias(t[0], t[1]), w), [n((4, 3)), n(3)]
    if kind in ("tanh", "sigmoid", "exp"):
        fn = getattr(ad, kind)
        w = n((3, 3))
        return lambda t: _reduce(fn(t[0]), w), [n((3, 3))]
    if kind == "relu":
        w = n((3, 4))
        return lambda t: _reduce(ad.relu(t[0]), w), [_away_from(n((3, 4)), [0.0])]
    if kind == "clip":
        w = n((3, 4))
        x = _away_from(2 * n((3, 4)), [-1.0, 1.0])
        return lambda t: _reduce(ad.clip(t[0], -1.0, 1.0), w), [x]
    if kind in ("softmax", "log_softmax"):
        fn = getattr(ad, kind)
        w = n((3, 5))
        return lambda t: _reduce(fn(t[0]), w), [n((3, 5))]
    if kind in ("mean", "sum", "sum_sq"):
        fn = {"mean": ad.mean, "sum": ad.sum_, "sum_sq": ad.sum_sq}[kind]
        return lambda t: fn(t[0]), [n((4, 3))]
    if kind == "concat":
        w = n((3, 5))
        return lambda t: _reduce(ad.concat([t[0], t[1]], axis=1), w), [n((3, 2)), n((3, 3))]
    if kind == "slice":
        w = n((2, 3))
        return lambda t: _reduce(ad.slice_(t[0], (slice(1, 3), slice(None, None, 2))), w), [n((4, 6))]
    if kind == "reshape":
        w = n((2, 6))
        return lambda t: _reduce(ad.reshape(t[0], (2, -1)), w), [n((3, 4))]
    if kind == "embed_lookup":
        ids = rng.integers(0, 5, size=(2, 4))  # repeats exercise the scatter-add
        w = n((2, 4, 3))
        return lambda t: _reduce(ad.embed_lookup(t[0], ids), w), [n((5, 3))]
    if kind == "cross_entropy":
        targets = rng.integers(0, 6, size=5)
        weights = rng.uniform(0.0, 1.0, size=5)
        return lambda t: ad.cross_entropy(t[0], targets, weights), [n((5, 6))]
    raise KeyError(kind)


OP_KINDS = tuple(ad.FORWARD_OPS)


def analytic_and_numeric(build, arrays):
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(leaves)
    grads = tape.backward(loss)
    analytic = [grads.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]

    def f(*arrs):
        return build([ad.Tensor(x) for x in arrs]).item()

    return analytic, ad.numeric_grad(f, [a.copy() for a in arrays], h=H)


def max_rel_err(analytic, numeric, small=1e-3):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), small)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def all_close(analytic, numeric):
    return all(ad.grad_close(a, n) for a, n in zip(analytic, numeric))


# ------------------------------------------------------------ full losses


def model_grads(leaves, loss_fn, coords=None, rng=None):
    """Analytic vs central-difference gradients of ``loss_fn()`` w.r.t. ``leaves``.

    ``leaves`` are Tensors with ``requires_grad`` that ``loss_fn`` reads by
    reference (model parameters, latent inputs); the numeric side perturbs
    their arrays in place.
    """
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    analytic = ad.grads_for(leaves, grads)

    def f():
        return loss_fn().item()

    an, nu = [], []
    for leaf, g in zip(leaves, analytic):
        arr = leaf.data
        if coords is None or arr.size <= coords:
            idx = range(arr.size)
        else:
            idx = rng.choice(arr.size, size=coords, replace=False)
        for j in idx:
            i = np.unravel_index(j, arr.shape)
            old = arr[i]
            arr[i] = old + H
            fp = f()
            arr[i] = old - H
            fm = f()
            arr[i] = old
            nu.append((fp - fm) / (2 * H))
            an.append(g[i])
    return [np.array(an)], [np.array(nu)]


def flow_loss_case(rng):
    """Flow objective w.r.t. every field parameter and both endpoints."""
    field = VelocityField(2, (8, 8), 4, rng=rng)
    # a zero output layer would leave most gradients trivially zero
    field.weights[-1].data = 0.3 * rng.standard_normal(field.weights[-1].shape)
    field.biases[-1].data = 0.3 * rng.standard_normal(field.biases[-1].shape)
    z0 = ad.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    z1 = ad.Tensor(3.0 + rng.standard_normal((4, 2)), requires_grad=True)
    t = rng.uniform(size=4)
    model = FlowModel(field)
    leaves = field.param_list() + [z0, z1]
    return leaves, lambda: flow_loss(model, z0, z1, t=t)


def vae_loss_case(rng, kl_weight=0.7):
    """VAE objective (reconstruction + weighted KL) w.r.t. every parameter."""
    vocab = 9
    model = SeqVae(vocab, latent_dim=3, embed_dim=4, hidden_dim=5, max_len=8,
                   dropout=0.2, kl_warmup_steps=0, rng=rng, word_dropout=0.2)
    batch = [list(rng.integers(3, vocab, size=rng.integers(1, 5))) for _ in range(3)]
    seed = int(rng.integers(1 << 30))

    def loss():
        # fresh generators so noise and dropout masks repeat across evaluations
        return vae_loss(model, batch, np.random.default_rng(seed), kl_weight,
                        dropout_rng=np.random.default_rng(seed + 1))[0]

    return model.param_list(), loss
