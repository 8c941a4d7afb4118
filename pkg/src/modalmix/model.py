"""Two-stream retrieval model: trainable conv/recurrent stream + frozen stream.

The trainable stream encodes images and text from scratch and fuses them
through the feature editors; the frozen stream reuses fixed random-projection
embeddings and adapts them with a lightweight gated editor.  Batched
forwards bucket texts by length so each bucket runs as one graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import editors
from .autodiff import Tensor
from .encoders import FrozenEncoders, TrainableEncoders
from .errors import ParameterError


@dataclass
class StreamForward:
    """One stream's batch outputs: combined queries, targets, per-query alpha."""

    combined: Tensor  # [B, C]
    targets: Tensor  # [B, C]
    alpha: Tensor | None  # [B, 1]; None when the combiner is ablated away


def _length_groups(token_lists):
    groups = {}
    for i, toks in enumerate(token_lists):
        groups.setdefault(len(toks), []).append(i)
    return [groups[length] for length in sorted(groups)]


class TwoStreamModel:
    def __init__(self, schema, dim=32, gem_p=3.0, seed=0, no_emd=False, single_stream=False):
        if dim < 1:
            raise ParameterError(f"embedding width must be >= 1, got {dim}")
        self.schema = schema
        self.dim = dim
        self.gem_p = gem_p
        self.no_emd = no_emd
        self.single_stream = single_stream
        vocab = schema.tokens()
        self.encoders = TrainableEncoders(vocab, image_channels=dim, text_dim=dim, seed=seed)
        self.editor = editors.FeatureEditorParams.zeros(dim)
        if single_stream:
            self.frozen = None
            self.vector_editor = None
        else:
            self.frozen = FrozenEncoders(schema, dim=dim, seed=seed)
            self.vector_editor = editors.VectorEditorParams.zeros(dim)

    # ------------------------------------------------------------------
    # parameter groups

    def named_parameters(self):
        named = {}
        named.update(self.encoders.named_parameters())
        named.update(self.editor.named_parameters())
        if self.frozen is not None:
            named.update(self.frozen.named_parameters())
            named.update(self.vector_editor.named_parameters())
        return named

    def trainable_stream_parameters(self):
        named = {}
        named.update(self.encoders.named_parameters())
        named.update(self.editor.named_parameters())
        return named

    def frozen_head_parameters(self):
        return {} if self.vector_editor is None else self.vector_editor.named_parameters()

    # ------------------------------------------------------------------
    # forwards

    def pool_image_features(self, feature_maps):
        """[B, C, H, W] feature maps -> [B, C] pooled embeddings."""
        b, c = feature_maps.shape[0], feature_maps.shape[1]
        positions = feature_maps.shape[2] * feature_maps.shape[3]
        return ad.gem_pool(ad.reshape(feature_maps, (b, c, positions)), self.gem_p)

    def combine_queries(self, query_images, token_lists):
        """Combined trainable-stream query embeddings: ([B, C], alpha [B, 1] or None)."""
        q_feats = self.encoders.encode_images(np.asarray(query_images, dtype=np.float64))
        groups = _length_groups(token_lists)
        parts, alpha_parts, order = [], [], []
        for idx in groups:
            whole = len(idx) == len(token_lists)
            f_ref = q_feats if whole else ad.gather_rows(q_feats, idx)
            f_txt = self.encoders.encode_texts([token_lists[i] for i in idx])
            if self.no_emd:
                combined = editors.summation_combine_batch(f_ref, f_txt, self.gem_p)
                alpha = None
            else:
                alpha, combined, *_ = editors.combine_query_batch(f_ref, f_txt, self.editor, self.gem_p)
            parts.append(combined)
            alpha_parts.append(alpha)
            order.extend(idx)

        combined = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        alpha = None
        if not self.no_emd:
            alpha = alpha_parts[0] if len(alpha_parts) == 1 else ad.concat(alpha_parts, axis=0)
        if order != list(range(len(token_lists))):
            inv = np.argsort(order)
            combined = ad.gather_rows(combined, inv)
            if alpha is not None:
                alpha = ad.gather_rows(alpha, inv)
        return combined, alpha

    def forward_trainable(self, query_images, token_lists, target_images):
        """Full trainable-stream pass over a batch of triplets."""
        combined, alpha = self.combine_queries(query_images, token_lists)
        t_feats = self.encoders.encode_images(np.asarray(target_images, dtype=np.float64))
        return StreamForward(combined=combined, targets=self.pool_image_features(t_feats), alpha=alpha)

    def frozen_image_vectors(self, images):
        """[B, 3, 16, 16] -> constant [B, D] frozen embeddings."""
        return np.stack([self.frozen.encode_image(img).data for img in images])

    def frozen_text_vectors(self, token_lists):
        return np.stack([self.frozen.encode_text(toks).data for toks in token_lists])

    def forward_frozen(self, ref_vecs, txt_vecs, tgt_vecs):
        """Frozen-stream pass over precomputed [B, D] embedding matrices."""
        if self.frozen is None:
            raise ParameterError("model was built single-stream; there is no frozen stream")
        ref = Tensor(np.asarray(ref_vecs, dtype=np.float64))
        txt = Tensor(np.asarray(txt_vecs, dtype=np.float64))
        targets = Tensor(np.asarray(tgt_vecs, dtype=np.float64))
        if self.no_emd:
            combined = ad.add(ref, txt)
        else:
            combined = editors.gated_vector_combine_batch(ref, txt, self.vector_editor)
        return StreamForward(combined=combined, targets=targets, alpha=None)

    # ------------------------------------------------------------------
    # inference helpers (no graph)

    def gallery_embeddings(self, images):
        """Per-stream gallery embeddings: ([N, C], [N, D] or None)."""
        with ad.no_grad():
            pooled = self.pool_image_features(self.encoders.encode_images(images)).data
        frozen = None if self.frozen is None else self.frozen_image_vectors(images)
        return pooled, frozen

    def query_embeddings(self, query_images, token_lists):
        """Per-stream combined query embeddings plus per-query alpha values.

        Returns ([B, C], [B, D] or None, [B] alphas or None).
        """
        with ad.no_grad():
            combined, alpha = self.combine_queries(query_images, token_lists)
            trainable = combined.data
            alphas = None if alpha is None else alpha.data[:, 0].copy()
            frozen = None
            if self.frozen is not None:
                ref = self.frozen_image_vectors(query_images)
                txt = self.frozen_text_vectors(token_lists)
                frozen = self.forward_frozen(ref, txt, ref).combined.data
        return trainable, frozen, alphas
