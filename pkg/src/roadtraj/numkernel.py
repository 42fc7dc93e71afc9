"""Small differentiable numeric kernel on float64 numpy arrays.

Each layer comes as a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` that takes the upstream gradient and the cache, accumulates
parameter gradients into a :class:`ParamStore` and returns the input
gradient. :func:`check_gradients` compares the analytic gradients against
central finite differences.
"""

from __future__ import annotations

import json

import numpy as np

from .exceptions import EmptyInputError, IsolatedNodeError, NoCandidateError, NumericError, ShapeError

DTYPE = np.float64


class ParamStore:
    """Named parameters with gradients of identical shape."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.version = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def touch(self):
        """Mark parameters as changed (invalidates caches keyed on ``version``)."""
        self.version += 1

    def copy(self):
        out = ParamStore()
        for k, v in self.params.items():
            out.params[k] = v.copy()
            out.grads[k] = np.zeros_like(v)
        out.version = self.version
        return out

    def load_from(self, other):
        for k, v in other.params.items():
            self.params[k][...] = v
        self.touch()

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def all_finite(self, grads=True):
        src = self.grads if grads else self.params
        return all(np.all(np.isfinite(v)) for v in src.values())

    def n_values(self):
        return sum(v.size for v in self.params.values())


# -- optimizers -----------------------------------------------------------------

class SGD:
    """Plain gradient step ``theta <- theta - lr * grad`` (descent on the loss)."""

    def __init__(self, store, lr):
        self.store = store
        self.lr = lr

    def step(self, names=None):
        for k in names or self.store.names():
            self.store.params[k] -= self.lr * self.store.grads[k]
        self.store.touch()


class Adam:
    def __init__(self, store, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8, clip=5.0):
        self.store = store
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0

    def step(self, names=None):
        names = names or self.store.names()
        scale = 1.0
        if self.clip:
            norm = np.sqrt(sum(float(np.sum(self.store.grads[k] ** 2)) for k in names))
            if norm > self.clip:
                scale = self.clip / norm
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in names:
            g = self.store.grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.store.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.store.touch()


# -- elementwise helpers ----------------------------------------------------------

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


# -- embedding --------------------------------------------------------------------

def embedding_lookup(table, index):
    """Row ``index`` of ``table`` (``index`` may be an int array)."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return table[index]


def embedding_backward(grad_table, index, upstream):
    np.add.at(grad_table, np.asarray(index), upstream)


# -- masked softmax -----------------------------------------------------------------

def masked_softmax(logits, mask):
    """Softmax restricted to ``mask == 1``; masked entries are exactly 0.

    Works on the last axis of arrays of any rank.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    mask = np.asarray(mask).astype(bool)
    if logits.shape != mask.shape:
        raise ShapeError(f"logits {logits.shape} and mask {mask.shape} differ")
    if not np.all(mask.any(axis=-1)):
        raise NoCandidateError("masked_softmax needs at least one unmasked entry")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_softmax(logits, mask):
    """Log of :func:`masked_softmax`; masked entries are ``-inf``."""
    mask = np.asarray(mask).astype(bool)
    if not np.all(mask.any(axis=-1)):
        raise NoCandidateError("masked_log_softmax needs at least one unmasked entry")
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.where(mask, np.exp(z - m), 0.0).sum(axis=-1, keepdims=True))
    return np.where(mask, z - lse, -np.inf)


def masked_log_softmax_backward(dlogp, probs, mask):
    """Gradient wrt logits given upstream gradient on the log-probabilities."""
    dlogp = np.where(mask, dlogp, 0.0)
    return dlogp - probs * dlogp.sum(axis=-1, keepdims=True)


# -- recurrent cell -------------------------------------------------------------------

def lstm_params(store, prefix, d_in, hidden, rng, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(hidden)
    store.add(prefix + ".Wx", rng.normal(0, scale, (d_in, 4 * hidden)))
    store.add(prefix + ".Wh", rng.normal(0, scale, (hidden, 4 * hidden)))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    store.add(prefix + ".b", b)


def recurrent_cell_step(store, prefix, x, state):
    """One LSTM step. ``x``: (..., d_in); ``state`` = (hidden, cell), each (..., H).

    Gate order in the stacked weights is input, forget, output, candidate.
    """
    Wx, Wh, b = store[prefix + ".Wx"], store[prefix + ".Wh"], store[prefix + ".b"]
    h, c = state
    if x.shape[-1] != Wx.shape[0] or h.shape[-1] != Wh.shape[0]:
        raise ShapeError(f"LSTM input dims {x.shape[-1]}/{h.shape[-1]} do not match "
                         f"parameters {Wx.shape[0]}/{Wh.shape[0]}")
    H = Wh.shape[0]
    a = x @ Wx + h @ Wh + b
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    o = sigmoid(a[..., 2 * H:3 * H])
    g = np.tanh(a[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def lstm_forward(store, prefix, X, mask=None):
    """Run an LSTM over ``X`` (B, T, D) from a zero state.

    Where ``mask[b, t] == 0`` the state is carried through unchanged.
    Returns hidden states (B, T, H) and a cache for :func:`lstm_backward`.
    """
    Wx, Wh, b = store[prefix + ".Wx"], store[prefix + ".Wh"], store[prefix + ".b"]
    B, T, D = X.shape
    if D != Wx.shape[0]:
        raise ShapeError(f"LSTM expects input dim {Wx.shape[0]}, got {D}")
    H = Wh.shape[0]
    if mask is None:
        mask = np.ones((B, T))
    mask = np.asarray(mask, dtype=DTYPE)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    xw = X @ Wx + b
    hs = np.empty((B, T, H))
    steps = []
    for t in range(T):
        a = xw[:, t] + h @ Wh
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        o = sigmoid(a[:, 2 * H:3 * H])
        g = np.tanh(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[:, t, None]
        steps.append((h, c, i, f, o, g, tc))
        h = m * h_new + (1 - m) * h
        c = m * c_new + (1 - m) * c
        hs[:, t] = h
    return hs, (X, mask, steps)


def lstm_backward(store, prefix, dHs, cache):
    X, mask, steps = cache
    Wx, Wh = store[prefix + ".Wx"], store[prefix + ".Wh"]
    gWx, gWh, gb = store.grads[prefix + ".Wx"], store.grads[prefix + ".Wh"], store.grads[prefix + ".b"]
    B, T, D = X.shape
    H = Wh.shape[0]
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    da_all = np.empty((B, T, 4 * H))
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, o, g, tc = steps[t]
        m = mask[:, t, None]
        dh = dHs[:, t] + dh_next
        dh_new = m * dh
        dc_new = m * dc_next + dh_new * o * (1 - tc * tc)
        di = dc_new * g
        df = dc_new * c_prev
        do = dh_new * tc
        dg = dc_new * i
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
        da_all[:, t] = da
        gWh += h_prev.T @ da
        dh_next = (1 - m) * dh + da @ Wh.T
        dc_next = (1 - m) * dc_next + dc_new * f
    gWx += np.einsum("btd,btk->dk", X, da_all)
    gb += da_all.sum(axis=(0, 1))
    return da_all @ Wx.T


# -- dot-product attention -------------------------------------------------------------

def dot_attention(states):
    """Enhanced last state: sum_k softmax_k(h_i . h_k) * h_k over rows of ``states`` (i, d)."""
    states = np.asarray(states, dtype=DTYPE)
    if states.ndim != 2 or states.shape[0] == 0:
        raise EmptyInputError("dot_attention needs at least one state")
    scores = states @ states[-1]
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return w @ states


def causal_attention_forward(Hs, mask=None):
    """Apply :func:`dot_attention` at every position of (B, T, d) states at once.

    Row ``i`` attends to positions ``0..i``.
    """
    B, T, _ = Hs.shape
    S = Hs @ Hs.transpose(0, 2, 1)
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = np.broadcast_to(causal, (B, T, T))
    S = np.where(allowed, S, -np.inf)
    S = S - S.max(axis=-1, keepdims=True)
    A = np.where(allowed, np.exp(S), 0.0)
    A /= A.sum(axis=-1, keepdims=True)
    return A @ Hs, (Hs, A)


def causal_attention_backward(dOut, cache):
    Hs, A = cache
    dA = dOut @ Hs.transpose(0, 2, 1)
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    return A.transpose(0, 2, 1) @ dOut + dS @ Hs + dS.transpose(0, 2, 1) @ Hs


# -- graph attention ---------------------------------------------------------------------

def gat_params(store, prefix, d_in, d_out, rng):
    store.add(prefix + ".W", rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_out)))
    store.add(prefix + ".a_src", rng.normal(0, 1.0 / np.sqrt(d_out), d_out))
    store.add(prefix + ".a_dst", rng.normal(0, 1.0 / np.sqrt(d_out), d_out))


def neighbor_edges(n, neighbors, self_loops=True):
    """Edge arrays ``(src, dst)`` where each ``dst`` aggregates from its ``src`` list.

    ``neighbors[i]`` lists the nodes ``i`` aggregates from.
    """
    src, dst = [], []
    for i in range(n):
        nb = set(neighbors[i]) if i < len(neighbors) else set()
        if self_loops:
            nb.add(i)
        if not nb:
            raise IsolatedNodeError(f"node {i} has an empty neighborhood and no self-loop")
        for j in sorted(nb):
            if not 0 <= j < n:
                raise IndexError(f"neighbor {j} of node {i} out of range")
            src.append(j)
            dst.append(i)
    return np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp)


def gat_layer(store, prefix, feats, edges):
    """Forward only; see :func:`gat_forward`."""
    return gat_forward(store, prefix, feats, edges)[0]


def gat_forward(store, prefix, feats, edges):
    src, dst = edges
    n = feats.shape[0]
    if np.setdiff1d(np.arange(n), dst).size:
        raise IsolatedNodeError("every node needs at least one incoming edge (self-loop)")
    W, a_s, a_d = store[prefix + ".W"], store[prefix + ".a_src"], store[prefix + ".a_dst"]
    if feats.shape[1] != W.shape[0]:
        raise ShapeError(f"GAT expects feature dim {W.shape[0]}, got {feats.shape[1]}")
    Wh = feats @ W
    e = (Wh @ a_d)[dst] + (Wh @ a_s)[src]
    le = np.where(e > 0, e, 0.2 * e)
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, dst, le)
    ex = np.exp(le - mx[dst])
    den = np.bincount(dst, weights=ex, minlength=n)
    alpha = ex / den[dst]
    agg = np.zeros_like(Wh)
    np.add.at(agg, dst, alpha[:, None] * Wh[src])
    return elu(agg), (feats, Wh, e, alpha, agg, edges)


def gat_attention_weights(store, prefix, feats, edges):
    return gat_forward(store, prefix, feats, edges)[1][3]


def gat_backward(store, prefix, dout, cache):
    feats, Wh, e, alpha, agg, (src, dst) = cache
    W, a_s, a_d = store[prefix + ".W"], store[prefix + ".a_src"], store[prefix + ".a_dst"]
    n = feats.shape[0]
    dagg = dout * elu_grad(agg)
    dalpha = np.einsum("ij,ij->i", dagg[dst], Wh[src])
    dWh = np.zeros_like(Wh)
    np.add.at(dWh, src, alpha[:, None] * dagg[dst])
    sums = np.bincount(dst, weights=alpha * dalpha, minlength=n)
    dle = alpha * (dalpha - sums[dst])
    de = dle * np.where(e > 0, 1.0, 0.2)
    des = np.bincount(src, weights=de, minlength=n)
    ded = np.bincount(dst, weights=de, minlength=n)
    dWh += np.outer(des, a_s) + np.outer(ded, a_d)
    store.grads[prefix + ".a_src"] += Wh.T @ des
    store.grads[prefix + ".a_dst"] += Wh.T @ ded
    store.grads[prefix + ".W"] += feats.T @ dWh
    return dWh @ W.T


# -- multilayer perceptron --------------------------------------------------------------------

def mlp_params(store, prefix, sizes, rng):
    for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
        store.add(f"{prefix}.{k}.W", rng.normal(0, 1.0 / np.sqrt(a), (a, b)))
        store.add(f"{prefix}.{k}.b", np.zeros(b))


def mlp_layer_count(store, prefix):
    k = 0
    while f"{prefix}.{k}.W" in store:
        k += 1
    return k


def mlp_forward(store, prefix, x, out_activation="sigmoid", hidden_activation="tanh"):
    """Affine + ``hidden_activation`` per hidden layer; last layer uses ``out_activation``.

    ``out_activation`` is one of ``"sigmoid"``, ``"linear"``. Returns ``(output, cache)``.
    """
    n = mlp_layer_count(store, prefix)
    acts = [x]
    pre = []
    for k in range(n):
        W, b = store[f"{prefix}.{k}.W"], store[f"{prefix}.{k}.b"]
        if acts[-1].shape[-1] != W.shape[0]:
            raise ShapeError(f"MLP layer {k} expects {W.shape[0]} inputs, got {acts[-1].shape[-1]}")
        z = acts[-1] @ W + b
        pre.append(z)
        if k < n - 1:
            acts.append(np.tanh(z) if hidden_activation == "tanh" else z)
        elif out_activation == "sigmoid":
            acts.append(sigmoid(z))
        elif out_activation == "linear":
            acts.append(z)
        else:
            raise ValueError(f"unknown activation {out_activation!r}")
    return acts[-1], (acts, pre, out_activation, hidden_activation)


def mlp_backward(store, prefix, dout, cache, d_preact=False):
    """Backprop through the MLP. With ``d_preact`` the upstream gradient is wrt the last pre-activation."""
    acts, pre, out_act, hid_act = cache
    n = len(pre)
    dz = dout
    for k in range(n - 1, -1, -1):
        if k == n - 1:
            if not d_preact and out_act == "sigmoid":
                dz = dz * acts[-1] * (1 - acts[-1])
        else:
            if hid_act == "tanh":
                dz = dz * (1 - acts[k + 1] ** 2)
        a_in = acts[k]
        store.grads[f"{prefix}.{k}.W"] += a_in.reshape(-1, a_in.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        store.grads[f"{prefix}.{k}.b"] += dz.reshape(-1, dz.shape[-1]).sum(axis=0)
        dz = dz @ store[f"{prefix}.{k}.W"].T
    return dz


# -- gradient verification -------------------------------------------------------------------

def check_gradients(model, loss, step=1e-5, names=None, max_per_param=None, rng=None):
    """Worst per-parameter relative error between analytic and central-difference gradients.

    ``loss(model)`` must return the scalar loss and leave the analytic
    gradient in ``model.grads`` (it is called once for the analytic pass,
    then repeatedly at perturbed parameters). For each parameter array the
    error is ``||analytic - numeric|| / ||numeric||``; arrays whose gradients
    are both identically zero count as exact. With ``max_per_param`` only a
    random subset of entries is perturbed.
    """
    rng = rng or np.random.default_rng(0)
    model.zero_grad()
    base = loss(model)
    if not np.isfinite(base):
        raise NumericError("loss is not finite at the unperturbed parameters")
    analytic = {k: g.copy() for k, g in model.grads.items()}
    worst = 0.0
    for name in names or model.names():
        p = model.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        num = np.empty(len(idx))
        for n, j in enumerate(idx):
            old = flat[j]
            flat[j] = old + step
            model.touch()
            lp = loss(model)
            flat[j] = old - step
            model.touch()
            lm = loss(model)
            flat[j] = old
            model.touch()
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"loss not finite when perturbing {name}[{j}]")
            num[n] = (lp - lm) / (2 * step)
        ana = analytic[name].reshape(-1)[idx]
        diff = float(np.linalg.norm(ana - num))
        ref = float(np.linalg.norm(num))
        if ref == 0.0 and diff == 0.0:
            continue
        worst = max(worst, diff / max(ref, 1e-12))
    model.zero_grad()
    return worst


# -- checkpoints ------------------------------------------------------------------------------

def save_params(store, path, metadata=None):
    """Write parameters to an ``.npz`` archive; ``metadata`` is stored as JSON under ``__meta__``."""
    payload = {f"p:{k}": v for k, v in store.params.items()}
    payload["__meta__"] = np.array(json.dumps(metadata or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(ParamStore, metadata)``."""
    store = ParamStore()
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        for key in data.files:
            if key.startswith("p:"):
                store.add(key[2:], data[key])
    return store, meta
