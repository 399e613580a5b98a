"""Frozen toy dual encoder: the CLIP stand-in.

Two frozen affine-plus-tanh encoders map (prompt ++ feature) and
(prompt ++ class-embedding) into a shared d_e-dimensional space.  The only
trainable quantities are the prompt vectors.  Reference (zero-prompt)
embeddings play the role of the hand-crafted-prompt model and anchor both the
regularizer and all zero-shot evaluations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, LabelError, ShapeError
from .serialize import arrays_to_doc, doc_to_arrays, load_arrays, save_arrays

DEFAULT_TAU = 0.07


def _frozen(arr):
    arr = np.asarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class EncoderWeights:
    """Frozen affine maps of both encoders.  Immutable after construction."""

    w_img: np.ndarray  # (d_e, d_p + d_x)
    b_img: np.ndarray  # (d_e, 1)
    w_txt: np.ndarray  # (d_e, d_p + d_c)
    b_txt: np.ndarray  # (d_e, 1)
    d_x: int
    d_c: int
    d_p: int
    d_e: int

    @staticmethod
    def random(seed, d_x=16, d_c=8, d_p=4, d_e=8):
        """Independent seeded encoders (no built-in image/text alignment)."""
        if d_e < 2:
            raise ShapeError("EncoderWeights: d_e must be at least 2")
        rng = np.random.default_rng(seed)
        s_img = 1.0 / np.sqrt(d_p + d_x)
        s_txt = 1.0 / np.sqrt(d_p + d_c)
        return EncoderWeights(
            w_img=_frozen(rng.normal(0.0, s_img, (d_e, d_p + d_x))),
            b_img=_frozen(rng.normal(0.0, 0.1, (d_e, 1))),
            w_txt=_frozen(rng.normal(0.0, s_txt, (d_e, d_p + d_c))),
            b_txt=_frozen(rng.normal(0.0, 0.1, (d_e, 1))),
            d_x=d_x, d_c=d_c, d_p=d_p, d_e=d_e,
        )

    @staticmethod
    def aligned(seed, d_x=16, d_p=4, d_e=8, misalignment=0.0):
        """Seeded encoders sharing the feature map (d_c == d_x).

        With class embeddings equal to class feature prototypes this gives the
        toy model a well-aligned joint space, so the zero-prompt model is a
        meaningful zero-shot classifier — the property the anchoring
        regularizer is designed to preserve.

        `misalignment` adds a bias offset to the image encoder that lies in
        the column span of its prompt block, so a nonzero visual prompt can
        cancel it exactly.  The zero-prompt model then remains a decent but
        improvable classifier: anchoring to it helps against overfitting yet
        hurts if applied indiscriminately, which is the trade-off a learned
        gate has to navigate.
        """
        if d_e < 2:
            raise ShapeError("EncoderWeights: d_e must be at least 2")
        rng = np.random.default_rng(seed)
        s_f = 1.0 / np.sqrt(d_x)
        w_feat = rng.normal(0.0, s_f, (d_e, d_x))
        bias = rng.normal(0.0, 0.1, (d_e, 1))
        s_p = 1.0 / np.sqrt(d_p)
        w_p_img = rng.normal(0.0, s_p, (d_e, d_p))
        w_p_txt = rng.normal(0.0, s_p, (d_e, d_p))
        u = rng.normal(size=(d_p, 1))
        u *= misalignment / np.linalg.norm(u)
        b_img = bias + w_p_img @ u
        return EncoderWeights(
            w_img=_frozen(np.concatenate([w_p_img, w_feat], axis=1)),
            b_img=_frozen(b_img),
            w_txt=_frozen(np.concatenate([w_p_txt, w_feat], axis=1)),
            b_txt=_frozen(bias.copy()),
            d_x=d_x, d_c=d_x, d_p=d_p, d_e=d_e,
        )

    def digest(self):
        h = hashlib.sha256()
        for a in (self.w_img, self.b_img, self.w_txt, self.b_txt):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def to_doc(self):
        doc = arrays_to_doc("encoder-weights", {
            "w_img": self.w_img, "b_img": self.b_img,
            "w_txt": self.w_txt, "b_txt": self.b_txt,
        })
        doc["dims"] = {"d_x": self.d_x, "d_c": self.d_c, "d_p": self.d_p, "d_e": self.d_e}
        return doc

    @staticmethod
    def from_doc(doc):
        arrs = doc_to_arrays(doc, kind="encoder-weights")
        dims = doc["dims"]
        return EncoderWeights(
            w_img=_frozen(arrs["w_img"]), b_img=_frozen(arrs["b_img"]),
            w_txt=_frozen(arrs["w_txt"]), b_txt=_frozen(arrs["b_txt"]),
            d_x=int(dims["d_x"]), d_c=int(dims["d_c"]),
            d_p=int(dims["d_p"]), d_e=int(dims["d_e"]),
        )


@dataclass(frozen=True)
class ClassSet:
    """Frozen class embeddings, one column per class id 0..N_c-1."""

    embeddings: np.ndarray  # (d_c, N_c)

    def __post_init__(self):
        emb = self.embeddings
        if emb.ndim != 2 or emb.shape[1] < 2:
            raise ShapeError("ClassSet: need a (d_c, N_c) matrix with N_c >= 2")
        d = _pairwise_min_distance(emb)
        if d < 1e-3:
            raise DataError(f"ClassSet: class embeddings nearly coincide (min distance {d:.2e})")
        object.__setattr__(self, "embeddings", _frozen(emb))

    @property
    def n_classes(self):
        return self.embeddings.shape[1]

    @property
    def d_c(self):
        return self.embeddings.shape[0]

    @staticmethod
    def random(seed, d_c, n_classes, max_redraws=100):
        rng = np.random.default_rng(seed)
        for _ in range(max_redraws):
            emb = rng.normal(0.0, 1.0, (d_c, n_classes))
            if _pairwise_min_distance(emb) >= 1e-3:
                return ClassSet(embeddings=emb)
        raise DataError("ClassSet.random: could not draw distinct class embeddings")

    def column(self, class_id):
        if not (0 <= class_id < self.n_classes):
            raise DataError(f"unknown class id {class_id} (N_c={self.n_classes})")
        return self.embeddings[:, class_id:class_id + 1]

    def columns(self, class_ids):
        ids = list(class_ids)
        for c in ids:
            if not (0 <= c < self.n_classes):
                raise DataError(f"unknown class id {c} (N_c={self.n_classes})")
        return self.embeddings[:, ids]

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.embeddings).tobytes()).hexdigest()


def _pairwise_min_distance(emb):
    n = emb.shape[1]
    best = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            best = min(best, float(np.linalg.norm(emb[:, i] - emb[:, j])))
    return best


@dataclass
class PromptSet:
    """The learnable visual and textual prompt vectors, shape (d_p, 1) each."""

    theta_vis: np.ndarray
    theta_txt: np.ndarray

    def __post_init__(self):
        self.theta_vis = np.asarray(self.theta_vis, dtype=np.float64).reshape(-1, 1)
        self.theta_txt = np.asarray(self.theta_txt, dtype=np.float64).reshape(-1, 1)
        if self.theta_vis.shape != self.theta_txt.shape:
            raise ShapeError("PromptSet: visual and textual prompts must share d_p")

    @property
    def d_p(self):
        return self.theta_vis.shape[0]

    @property
    def n_params(self):
        return 2 * self.d_p

    @staticmethod
    def random(seed, d_p, std=0.02):
        rng = np.random.default_rng(seed)
        return PromptSet(rng.normal(0.0, std, (d_p, 1)), rng.normal(0.0, std, (d_p, 1)))

    @staticmethod
    def reference(d_p):
        """The zero (hand-crafted analogue) prompt pair."""
        return PromptSet(np.zeros((d_p, 1)), np.zeros((d_p, 1)))

    def copy(self):
        return PromptSet(self.theta_vis.copy(), self.theta_txt.copy())

    def flat(self):
        """Fixed flattening order: theta_vis then theta_txt."""
        return np.concatenate([self.theta_vis.ravel(), self.theta_txt.ravel()])

    @staticmethod
    def from_flat(vec, d_p):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != 2 * d_p:
            raise ShapeError(f"PromptSet.from_flat: expected {2 * d_p} values, got {vec.size}")
        return PromptSet(vec[:d_p], vec[d_p:])

    def save(self, path):
        save_arrays(path, "prompt-set", {"theta_vis": self.theta_vis, "theta_txt": self.theta_txt})

    @staticmethod
    def load(path):
        arrs = load_arrays(path, kind="prompt-set")
        return PromptSet(arrs["theta_vis"], arrs["theta_txt"])

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.theta_vis).tobytes())
        h.update(np.ascontiguousarray(self.theta_txt).tobytes())
        return h.hexdigest()


# -- numeric forward paths --------------------------------------------------

def encode_image(x, prompt, weights):
    """tanh(W_img @ [prompt; x] + b_img) for a feature column or batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] != weights.d_x:
        raise ShapeError(f"encode_image: feature dim {x.shape[0]} != d_x={weights.d_x}")
    prompt = np.asarray(prompt, dtype=np.float64).reshape(-1, 1)
    if prompt.shape[0] != weights.d_p:
        raise ShapeError(f"encode_image: prompt dim {prompt.shape[0]} != d_p={weights.d_p}")
    stacked = np.concatenate([np.repeat(prompt, x.shape[1], axis=1), x], axis=0)
    return np.tanh(weights.w_img @ stacked + weights.b_img)


def encode_text(class_ids, prompt, weights, classes):
    """tanh(W_txt @ [prompt; c_y] + b_txt), one column per requested class."""
    if classes.d_c != weights.d_c:
        raise ShapeError(f"encode_text: class dim {classes.d_c} != d_c={weights.d_c}")
    single = np.isscalar(class_ids)
    ids = [class_ids] if single else list(class_ids)
    c = classes.columns(ids)
    prompt = np.asarray(prompt, dtype=np.float64).reshape(-1, 1)
    if prompt.shape[0] != weights.d_p:
        raise ShapeError(f"encode_text: prompt dim {prompt.shape[0]} != d_p={weights.d_p}")
    stacked = np.concatenate([np.repeat(prompt, c.shape[1], axis=1), c], axis=0)
    out = np.tanh(weights.w_txt @ stacked + weights.b_txt)
    return out[:, 0:1] if single else out


def reference_image_embedding(x, weights):
    return encode_image(x, np.zeros((weights.d_p, 1)), weights)


def reference_text_embedding(class_ids, weights, classes):
    return encode_text(class_ids, np.zeros((weights.d_p, 1)), weights, classes)


def _normalize_columns(m, what):
    norms = np.linalg.norm(m, axis=0, keepdims=True)
    if np.any(norms == 0.0):
        raise ShapeError(f"{what}: zero-norm vector, cosine similarity undefined")
    return m / norms


def cosine_similarities(z, w_mat):
    """Cosine similarity of column(s) z against each column of w_mat."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    zn = _normalize_columns(z, "cosine_similarities")
    wn = _normalize_columns(np.asarray(w_mat, dtype=np.float64), "cosine_similarities")
    return zn.T @ wn  # (B, K)


def predict_probs(z, w_mat, tau=DEFAULT_TAU):
    """Softmax over cosine similarities / tau.  Rows are samples."""
    if tau <= 0:
        raise ShapeError("predict_probs: temperature must be positive")
    sims = cosine_similarities(z, w_mat) / tau
    sims -= sims.max(axis=1, keepdims=True)
    e = np.exp(sims)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if p.shape[0] == 1 else p


def validate_soft_labels(y, n_classes):
    """Check a (K, B) soft-label matrix: nonnegative columns summing to 1."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape[0] != n_classes:
        raise LabelError(f"label distribution over {y.shape[0]} classes, expected {n_classes}")
    if np.any(y < 0):
        raise LabelError("label distribution has negative mass")
    sums = y.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise LabelError("label distribution does not sum to 1 within 1e-9")
    return y


def one_hot(labels, n_classes):
    """(K, B) one-hot columns for integer labels."""
    labels = np.asarray(labels, dtype=int).ravel()
    out = np.zeros((n_classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def contrastive_loss_value(x_batch, y_soft, prompts, weights, classes, class_ids, tau=DEFAULT_TAU):
    """Mean soft-label cross-entropy over the batch (plain numpy path)."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.size == 0:
        raise DataError("contrastive_loss: empty batch")
    y = validate_soft_labels(y_soft, len(list(class_ids)))
    z = encode_image(x_batch, prompts.theta_vis, weights)
    w = encode_text(class_ids, prompts.theta_txt, weights, classes)
    sims = cosine_similarities(z, w) / tau
    sims -= sims.max(axis=1, keepdims=True)
    logp = sims - np.log(np.exp(sims).sum(axis=1, keepdims=True))
    return float(-(y.T * logp).sum() / x_batch.shape[1])


# -- graph builders (differentiable paths) ----------------------------------

def image_embedding_node(theta_vis, x_node, weights):
    """Graph version of encode_image; x_node is (d_x, B)."""
    b = x_node.shape[1]
    stacked = ad.concat_rows([ad.broadcast_cols(theta_vis, b), x_node])
    pre = ad.add(ad.matmul(ad.const(weights.w_img), stacked),
                 ad.broadcast_cols(ad.const(weights.b_img), b))
    return ad.tanh(pre)


def text_embedding_node(theta_txt, class_mat_node, weights):
    """Graph version of encode_text; class_mat_node is (d_c, K)."""
    k = class_mat_node.shape[1]
    stacked = ad.concat_rows([ad.broadcast_cols(theta_txt, k), class_mat_node])
    pre = ad.add(ad.matmul(ad.const(weights.w_txt), stacked),
                 ad.broadcast_cols(ad.const(weights.b_txt), k))
    return ad.tanh(pre)


def normalize_columns_node(m):
    """Column-wise L2 normalization built from closed-set primitives."""
    sq = ad.hadamard(m, m)
    colsum = ad.matmul(ad.ones((1, m.shape[0])), sq)            # (1, B)
    inv = ad.exp(ad.scale(ad.log(colsum), -0.5))                # 1/||col||
    return ad.hadamard(m, ad.broadcast_rows(inv, m.shape[0]))


def similarity_matrix_node(z_node, w_node):
    """(B, K) cosine similarities between columns of z and columns of w."""
    return ad.matmul(ad.transpose(normalize_columns_node(z_node)),
                     normalize_columns_node(w_node))


def soft_cross_entropy_node(sims_node, y_const, tau):
    """Mean soft-label cross-entropy from a (B, K) similarity node.

    y_const is a (K, B) constant of label distributions.
    """
    b = sims_node.shape[0]
    logits = ad.scale(ad.transpose(sims_node), 1.0 / tau)       # (K, B)
    logp = ad.log_softmax(logits)
    return ad.scale(ad.total(ad.hadamard(y_const, logp)), -1.0 / b)


def contrastive_loss_node(theta_vis, theta_txt, x_node, y_const, weights, class_mat_node,
                          tau=DEFAULT_TAU):
    z = image_embedding_node(theta_vis, x_node, weights)
    w = text_embedding_node(theta_txt, class_mat_node, weights)
    return soft_cross_entropy_node(similarity_matrix_node(z, w), y_const, tau)


def loss_from_visual_node(z_node, theta_txt, y_const, weights, class_mat_node, tau=DEFAULT_TAU):
    """Contrastive loss with externally supplied (e.g. mixed) visual embeddings."""
    w = text_embedding_node(theta_txt, class_mat_node, weights)
    return soft_cross_entropy_node(similarity_matrix_node(z_node, w), y_const, tau)
