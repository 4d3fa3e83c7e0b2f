"""Semantic relation graph over the persons of a clip.

One fully connected, undirected graph is built per retained frame.  Node
attributes start from an embedding of the person features, edge
attributes from an embedding of the pairwise interaction features.  Each
of ``m`` propagation iterations runs

    message   h_ve[i, j] = NN_ve([h_e[i, j], h_v[j]])
    aggregate hbar[i]    = sum_j g[i, j] * h_ve[i, j]
    node      h_v'[i]    = NN_v([hbar[i], h_v[i]])
    edge      hat[i, j]  = NN_e([h_v'[i], h_v'[j], h_e[i, j]])
              h_e'[i, j] = g[i, j] * (hat[i, j] + hat[j, i]) / 2

where the three NN_* are single-layer LSTM cells whose recurrent state
runs across the iterations of one frame and is reset per frame.  After
the last iteration the global attribute is ``u = W_u sum_{i<j} h_e[i, j]
+ b_u`` and the clip logits are the sum of ``u`` over retained frames.

The gate ``g`` multiplies the edge attributes at initialisation and after
every edge update, and the messages collected along each edge, so a zero
gate removes a relation from the graph entirely.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import (DimensionError, affine_backward, affine_forward, glorot,
                       lstm_backward, lstm_forward, lstm_init, softmax_xent)
from .scene import N_INTERACTION, embed_backward, embed_features


@dataclass
class SRGConfig:
    d_feature: int = 12
    n_classes: int = 4
    d_v: int = 32
    d_e: int = 16
    m: int = 3


def init_params(cfg, rng):
    Dv, De = cfg.d_v, cfg.d_e
    p = {}
    p["emb_v.W"] = glorot(rng, Dv, cfg.d_feature)
    p["emb_v.b"] = np.zeros(Dv)
    p["emb_e.W"] = glorot(rng, De, N_INTERACTION)
    p["emb_e.b"] = np.zeros(De)
    p["ve.W"], p["ve.b"] = lstm_init(rng, De + Dv, Dv)
    p["v.W"], p["v.b"] = lstm_init(rng, Dv + Dv, Dv)
    p["e.W"], p["e.b"] = lstm_init(rng, 2 * Dv + De, De)
    p["u.W"] = glorot(rng, cfg.n_classes, De)
    p["u.b"] = np.zeros(cfg.n_classes)
    return p


@dataclass
class RelationGraph:
    """Attributes of one graph (or a batch of graphs sharing leading axes)."""
    H_v: np.ndarray
    H_e: np.ndarray
    G: np.ndarray
    u: np.ndarray = None
    state: dict = None

    @classmethod
    def from_embeddings(cls, H_v, H_e, G=None):
        N = H_v.shape[-2]
        if G is None:
            G = np.ones(H_v.shape[:-2] + (N, N))
        G = offdiag(G)
        return cls(H_v=H_v, H_e=G[..., None] * H_e, G=G, state={})


def offdiag(G):
    N = G.shape[-1]
    return G * (1.0 - np.eye(N))


def _check_graph(graph):
    if graph.H_v.shape[-2] < 2:
        raise DimensionError("graph needs at least two nodes")


# ---- single propagation steps (forward only, used directly and in tests) ----

def collect_aggregate(graph, params, i=None):
    """Collected messages and their gated sum for node ``i`` (all nodes if None)."""
    _check_graph(graph)
    Dv = graph.H_v.shape[-1]
    st = graph.state
    N = graph.H_v.shape[-2]
    x = np.concatenate([graph.H_e, np.broadcast_to(graph.H_v[..., None, :, :],
                                                    graph.H_e.shape[:-1] + (Dv,))], axis=-1)
    zeros = np.zeros(x.shape[:-1] + (Dv,))
    h, c, _ = lstm_forward(x, st.get("ve_h", zeros), st.get("ve_c", zeros),
                           params["ve.W"], params["ve.b"])
    st["ve_h"], st["ve_c"] = h, c
    msg = graph.G[..., None] * h
    hbar = msg.sum(axis=-2)
    st["hbar"] = hbar
    if i is None:
        return hbar
    if not 0 <= i < N:
        raise IndexError(i)
    return hbar[..., i, :]


def update_nodes(graph, params):
    st = graph.state
    hbar = st["hbar"]
    x = np.concatenate([hbar, graph.H_v], axis=-1)
    zeros = np.zeros_like(graph.H_v)
    h, c, _ = lstm_forward(x, st.get("v_h", zeros), st.get("v_c", zeros),
                           params["v.W"], params["v.b"])
    st["v_h"], st["v_c"] = h, c
    st["H_v_prev"] = graph.H_v
    graph.H_v = h
    return graph


def update_edges(graph, params):
    st = graph.state
    hv = graph.H_v
    N, De = hv.shape[-2], graph.H_e.shape[-1]
    shape = graph.H_e.shape[:-1]
    x = np.concatenate([np.broadcast_to(hv[..., :, None, :], shape + hv.shape[-1:]),
                        np.broadcast_to(hv[..., None, :, :], shape + hv.shape[-1:]),
                        graph.H_e], axis=-1)
    zeros = np.zeros(shape + (De,))
    h, c, _ = lstm_forward(x, st.get("e_h", zeros), st.get("e_c", zeros),
                           params["e.W"], params["e.b"])
    st["e_h"], st["e_c"] = h, c
    graph.H_e = graph.G[..., None] * symmetrize(h)
    return graph


def symmetrize(hat):
    return 0.5 * (hat + np.swapaxes(hat, -2, -3))


def upper_sum(H_e):
    N = H_e.shape[-2]
    iu = np.triu_indices(N, k=1)
    return H_e[..., iu[0], iu[1], :].sum(axis=-2)


def update_global(graph, params):
    u, _ = affine_forward(upper_sum(graph.H_e), params["u.W"], params["u.b"])
    graph.u = u
    return u


def propagate_once(graph, params):
    collect_aggregate(graph, params)
    update_nodes(graph, params)
    update_edges(graph, params)
    return graph


# ---- batched forward / backward used for training ----

def propagate(params, xp, xe, G, m):
    """Embed, gate and propagate a batch of per-frame graphs.

    ``xp`` (B, N, D_F), ``xe`` (B, N, N, 6), ``G`` (B, N, N).  Returns
    ``(u, H_v, H_e, cache)`` with ``u`` of shape (B, K).
    """
    B, N = xp.shape[:2]
    if N < 2:
        raise DimensionError("graph needs at least two nodes")
    if xe.shape[:3] != (B, N, N) or G.shape != (B, N, N):
        raise DimensionError(f"propagate: xp{xp.shape}, xe{xe.shape}, G{G.shape} disagree")
    Gm = offdiag(G)[..., None]
    hv0, he0, emb_cache = embed_features(xp, xe, params)
    Hv, He = hv0, Gm * he0
    Dv, De = Hv.shape[-1], He.shape[-1]
    ve_h = np.zeros((B, N, N, Dv))
    ve_c = np.zeros_like(ve_h)
    v_h = np.zeros((B, N, Dv))
    v_c = np.zeros_like(v_h)
    e_h = np.zeros((B, N, N, De))
    e_c = np.zeros_like(e_h)
    iters = []
    for _ in range(m):
        xve = np.concatenate([He, np.broadcast_to(Hv[:, None], (B, N, N, Dv))], axis=-1)
        ve_h, ve_c, c_ve = lstm_forward(xve, ve_h, ve_c, params["ve.W"], params["ve.b"])
        hbar = (Gm * ve_h).sum(axis=2)
        xv = np.concatenate([hbar, Hv], axis=-1)
        v_h, v_c, c_v = lstm_forward(xv, v_h, v_c, params["v.W"], params["v.b"])
        xe_in = np.concatenate([np.broadcast_to(v_h[:, :, None], (B, N, N, Dv)),
                                np.broadcast_to(v_h[:, None], (B, N, N, Dv)), He], axis=-1)
        e_h, e_c, c_e = lstm_forward(xe_in, e_h, e_c, params["e.W"], params["e.b"])
        iters.append((c_ve, c_v, c_e))
        Hv = v_h
        He = Gm * symmetrize(e_h)
    s = upper_sum(He)
    u, c_u = affine_forward(s, params["u.W"], params["u.b"])
    cache = (Gm, emb_cache, iters, c_u, (B, N, Dv, De))
    return u, Hv, He, cache


def propagate_backward(params, cache, du):
    Gm, emb_cache, iters, c_u, (B, N, Dv, De) = cache
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    ds, grads["u.W"], grads["u.b"] = affine_backward(c_u, params["u.W"], du)
    triu = np.triu(np.ones((N, N)), k=1)[None, :, :, None]
    dHe = triu * ds[:, None, None, :]
    dHv = np.zeros((B, N, Dv))
    d_ve_h = np.zeros((B, N, N, Dv))
    d_ve_c = np.zeros_like(d_ve_h)
    d_v_h = np.zeros((B, N, Dv))
    d_v_c = np.zeros_like(d_v_h)
    d_e_h = np.zeros((B, N, N, De))
    d_e_c = np.zeros_like(d_e_h)
    for c_ve, c_v, c_e in reversed(iters):
        dg = Gm * dHe
        d_e_h = d_e_h + symmetrize(dg)
        dxe, d_e_h, d_e_c, dW, db = lstm_backward(c_e, params["e.W"], d_e_h, d_e_c)
        grads["e.W"] += dW
        grads["e.b"] += db
        dvh = dHv + d_v_h + dxe[..., :Dv].sum(axis=2) + dxe[..., Dv:2 * Dv].sum(axis=1)
        dHe_in = dxe[..., 2 * Dv:]
        dxv, d_v_h, d_v_c, dW, db = lstm_backward(c_v, params["v.W"], dvh, d_v_c)
        grads["v.W"] += dW
        grads["v.b"] += db
        dhbar, dHv_in = dxv[..., :Dv], dxv[..., Dv:]
        d_ve_h = d_ve_h + Gm * dhbar[:, :, None, :]
        dxve, d_ve_h, d_ve_c, dW, db = lstm_backward(c_ve, params["ve.W"], d_ve_h, d_ve_c)
        grads["ve.W"] += dW
        grads["ve.b"] += db
        dHe = dHe_in + dxve[..., :De]
        dHv = dHv_in + dxve[..., De:].sum(axis=1)
        # node-LSTM hidden state doubles as the node attribute after the first iteration
    grads.update(embed_backward(emb_cache, params, dHv, Gm * dHe))
    return grads


# ---- clip-level classification ----

@dataclass
class ClipBatch:
    """Stacked per-frame inputs for a list of clips."""
    xp: np.ndarray      # (C, T, N, D_F)
    xe: np.ndarray      # (C, T, N, N, 6)
    labels: np.ndarray  # (C,)

    @classmethod
    def from_clips(cls, clips):
        xp = np.stack([c.person_features.transpose(1, 0, 2) for c in clips])
        xe = np.stack([c.interaction_tensor() for c in clips])
        return cls(xp, xe, np.array([c.activity_label for c in clips]))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ClipBatch(self.xp[idx], self.xe[idx], self.labels[idx])


def forward_classify(params, batch, gates=None, frame_mask=None, m=3, labels=None):
    """Logits (C, K) summed over retained frames, plus the data for backward.

    ``gates`` is (C, N, N) (default all ones), ``frame_mask`` (C, T) boolean
    (default all frames).  If ``labels`` is given the mean cross-entropy is
    also returned.
    """
    C, T, N = batch.xp.shape[:3]
    if gates is None:
        gates = np.ones((C, N, N))
    if frame_mask is None:
        frame_mask = np.ones((C, T), bool)
    frame_mask = np.asarray(frame_mask, bool)
    if not frame_mask.any(axis=1).all():
        raise ValueError("every clip needs at least one retained frame")
    ci, ti = np.nonzero(frame_mask)
    u, Hv, He, cache = propagate(params, batch.xp[ci, ti], batch.xe[ci, ti], gates[ci], m)
    logits = np.zeros((C, u.shape[-1]))
    np.add.at(logits, ci, u)
    out = {"logits": logits, "u": u, "H_v": Hv, "H_e": He, "clip_index": ci,
           "frame_index": ti, "cache": cache}
    if labels is not None:
        losses, probs = zip(*(softmax_xent(logits[c], int(labels[c])) for c in range(C)))
        out["loss"] = float(np.mean(losses))
        out["probs"] = np.array(probs)
    else:
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out["probs"] = e / e.sum(axis=1, keepdims=True)
    return out


def classify_backward(params, out, dlogits):
    du = dlogits[out["clip_index"]]
    return propagate_backward(params, out["cache"], du)


def srg_loss_step(params, batch, gates=None, frame_mask=None, m=3):
    """Mean cross-entropy over the batch and its parameter gradients."""
    out = forward_classify(params, batch, gates, frame_mask, m, labels=batch.labels)
    dlogits = out["probs"].copy()
    dlogits[np.arange(len(batch)), batch.labels] -= 1.0
    dlogits /= len(batch)
    return out["loss"], classify_backward(params, out, dlogits), out


def clip_graph_summary(out, C):
    """Frame-averaged final node/edge attributes per clip: (C, N, Dv), (C, N, N, De)."""
    ci = out["clip_index"]
    counts = np.bincount(ci, minlength=C).astype(float)
    Hv = np.zeros((C,) + out["H_v"].shape[1:])
    He = np.zeros((C,) + out["H_e"].shape[1:])
    np.add.at(Hv, ci, out["H_v"])
    np.add.at(He, ci, out["H_e"])
    shape = (C,) + (1,) * (Hv.ndim - 1)
    return Hv / counts.reshape(shape), He / counts.reshape((C,) + (1,) * (He.ndim - 1))


def gate_record(clip_id, predicted, label, G):
    """Gate-inspection record: upper-triangular gates and normalised row sums."""
    G = np.asarray(G, dtype=float)
    N = G.shape[0]
    iu = np.triu_indices(N, k=1)
    rows = offdiag(G).sum(axis=1)
    tot = rows.sum()
    imp = rows / tot if tot > 0 else np.full(N, 1.0 / N)
    return {"clip_id": int(clip_id), "predicted": int(predicted), "label": int(label),
            "gates": G[iu].tolist(), "person_importance": imp.tolist()}
