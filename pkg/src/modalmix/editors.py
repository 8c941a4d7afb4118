"""Cross-modal feature editors and the adaptive weighted combiner.

The image editor reweights spatial positions by their similarity to the
pooled text feature, then refines through a sigmoid-gated 1x1-conv branch
added back onto the input (so zero-initialized editor weights give an
exact identity).  The text editor mirrors this over word positions.  The
combiner pools both edited features and mixes them with a learned scalar
weight alpha in (0, 1).  The frozen stream gets a lighter editor: two
sigmoid gates over concatenated embedding vectors, no attention step.

Batched functions carry a leading batch axis; the single-sample forms are
thin wrappers over them.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

DEFAULT_GEM_P = 3.0


@dataclass
class FeatureEditorParams:
    """Weights for the trainable stream's editors and combiner (width C = D)."""

    gate_img_w: Tensor  # [C, 2C]
    gate_img_b: Tensor  # [C]
    mix_img_w: Tensor  # [C, C]
    mix_img_b: Tensor  # [C]
    gate_txt_w: Tensor  # [D, 2D]
    gate_txt_b: Tensor  # [D]
    mix_txt_w: Tensor  # [D, D]
    mix_txt_b: Tensor  # [D]
    alpha_w: Tensor  # [1, 2C]
    alpha_b: Tensor  # [1]

    @classmethod
    def zeros(cls, dim):
        # zero init keeps both editors at the identity and alpha at 0.5
        return cls(
            gate_img_w=ad.zero_parameter((dim, 2 * dim)),
            gate_img_b=ad.zero_parameter((dim,)),
            mix_img_w=ad.zero_parameter((dim, dim)),
            mix_img_b=ad.zero_parameter((dim,)),
            gate_txt_w=ad.zero_parameter((dim, 2 * dim)),
            gate_txt_b=ad.zero_parameter((dim,)),
            mix_txt_w=ad.zero_parameter((dim, dim)),
            mix_txt_b=ad.zero_parameter((dim,)),
            alpha_w=ad.zero_parameter((1, 2 * dim)),
            alpha_b=ad.zero_parameter((1,)),
        )

    def named_parameters(self):
        return {
            "editor.gate_img_w": self.gate_img_w,
            "editor.gate_img_b": self.gate_img_b,
            "editor.mix_img_w": self.mix_img_w,
            "editor.mix_img_b": self.mix_img_b,
            "editor.gate_txt_w": self.gate_txt_w,
            "editor.gate_txt_b": self.gate_txt_b,
            "editor.mix_txt_w": self.mix_txt_w,
            "editor.mix_txt_b": self.mix_txt_b,
            "editor.alpha_w": self.alpha_w,
            "editor.alpha_b": self.alpha_b,
        }


@dataclass
class VectorEditorParams:
    """Gates for the frozen stream's one-step editor."""

    gate_ref_w: Tensor  # [D, 2D]
    gate_ref_b: Tensor  # [D]
    gate_txt_w: Tensor  # [D, 2D]
    gate_txt_b: Tensor  # [D]

    @classmethod
    def zeros(cls, dim):
        return cls(
            gate_ref_w=ad.zero_parameter((dim, 2 * dim)),
            gate_ref_b=ad.zero_parameter((dim,)),
            gate_txt_w=ad.zero_parameter((dim, 2 * dim)),
            gate_txt_b=ad.zero_parameter((dim,)),
        )

    def named_parameters(self):
        return {
            "vector_editor.gate_ref_w": self.gate_ref_w,
            "vector_editor.gate_ref_b": self.gate_ref_b,
            "vector_editor.gate_txt_w": self.gate_txt_w,
            "vector_editor.gate_txt_b": self.gate_txt_b,
        }


@dataclass
class CombinerOutput:
    """Everything the combiner produces for one query."""

    alpha: Tensor  # scalar in (0, 1)
    combined: Tensor  # [C]
    image_edited: Tensor  # [C, H, W]
    text_edited: Tensor  # [D, L]
    spatial_attn: Tensor  # [1, H, W], sums to 1
    word_attn: Tensor  # [1, L], sums to 1


def _flatten_positions(x):
    """[B, C, H, W] -> [B, C, H*W]; [B, C, P] passes through."""
    if x.ndim == 4:
        b, c, h, w = x.shape
        return ad.reshape(x, (b, c, h * w)), (h, w)
    if x.ndim == 3:
        return x, None
    raise ShapeError(f"expected [B, C, P] or [B, C, H, W], got {x.shape}")


def _channel_linear(x, w, bias):
    """conv1x1 over a batched [B, Cin, P] grid."""
    b, cin, p = x.shape
    flat = ad.reshape(ad.transpose(x, (1, 0, 2)), (cin, b * p))
    y = ad.conv1x1(flat, w, bias)
    cout = w.shape[0]
    return ad.transpose(ad.reshape(y, (cout, b, p)), (1, 0, 2))


def _position_scores(grid, pooled):
    """Dot product of every position's channel vector with a pooled [B, C] vector."""
    if grid.shape[1] != pooled.shape[1]:
        raise ShapeError(
            f"cross-modal widths disagree: positions have {grid.shape[1]} channels, "
            f"pooled vector has {pooled.shape[1]}"
        )
    prod = ad.mul(grid, ad.reshape(pooled, (pooled.shape[0], pooled.shape[1], 1)))
    return ad.reduce_sum(prod, axis=1)  # [B, P]


def spatial_attention_batch(f_ref, f_txt, p=DEFAULT_GEM_P):
    """[B, C, H, W] x [B, D, L] -> [B, 1, H, W] softmax over all positions."""
    f_ref = ad.as_tensor(f_ref)
    grid, hw = _flatten_positions(f_ref)
    pooled_txt = ad.gem_pool(ad.as_tensor(f_txt), p)  # [B, D]
    attn = ad.softmax(_position_scores(grid, pooled_txt), axis=1)
    b = grid.shape[0]
    shape = (b, 1) + (hw if hw else (grid.shape[2],))
    return ad.reshape(attn, shape)


def word_attention_batch(f_txt, f_ref, p=DEFAULT_GEM_P):
    """[B, D, L] x [B, C, H, W] -> [B, 1, L] softmax over words."""
    f_txt = ad.as_tensor(f_txt)
    grid, _ = _flatten_positions(ad.as_tensor(f_ref))
    pooled_img = ad.gem_pool(grid, p)  # [B, C]
    attn = ad.softmax(_position_scores(f_txt, pooled_img), axis=1)
    return ad.reshape(attn, (f_txt.shape[0], 1, f_txt.shape[2]))


def _edit_batch(x, attn, gate_w, gate_b, mix_w, mix_b):
    """Shared editor body: gated residual refinement of attention-reweighted features."""
    grid, hw = _flatten_positions(ad.as_tensor(x))
    attn_flat, _ = _flatten_positions(ad.as_tensor(attn))
    coarse = ad.mul(attn_flat, grid)  # broadcast over channels
    gate = ad.sigmoid(_channel_linear(ad.concat([coarse, grid], axis=1), gate_w, gate_b))
    refined = ad.add(ad.mul(gate, _channel_linear(coarse, mix_w, mix_b)), grid)
    if hw:
        return ad.reshape(refined, (grid.shape[0], grid.shape[1]) + hw)
    return refined


def edit_image_batch(f_ref, spatial_attn, params):
    """[B, C, H, W] -> [B, C, H, W] purified image features."""
    return _edit_batch(f_ref, spatial_attn, params.gate_img_w, params.gate_img_b, params.mix_img_w, params.mix_img_b)


def edit_text_batch(f_txt, word_attn, params):
    """[B, D, L] -> [B, D, L] purified text features."""
    return _edit_batch(f_txt, word_attn, params.gate_txt_w, params.gate_txt_b, params.mix_txt_w, params.mix_txt_b)


def adaptive_combine_batch(image_edited, text_edited, params, p=DEFAULT_GEM_P):
    """Pool both edited features and mix them with a learned weight.

    Returns (alpha [B, 1], combined [B, C]).
    """
    img_grid, _ = _flatten_positions(ad.as_tensor(image_edited))
    pooled_img = ad.gem_pool(img_grid, p)  # [B, C]
    pooled_txt = ad.gem_pool(ad.as_tensor(text_edited), p)  # [B, D]
    stacked = ad.concat([pooled_img, pooled_txt], axis=1)  # [B, 2C]
    logits = ad.add(ad.matmul(stacked, ad.transpose(params.alpha_w)), ad.reshape(params.alpha_b, (1, 1)))
    alpha = ad.sigmoid(logits)  # [B, 1]
    combined = ad.add(ad.mul(alpha, pooled_img), ad.mul(ad.add(ad.scale(alpha, -1.0), 1.0), pooled_txt))
    return alpha, combined


def summation_combine_batch(f_ref, f_txt, p=DEFAULT_GEM_P):
    """Editor-free baseline: plain sum of the pooled raw features."""
    img_grid, _ = _flatten_positions(ad.as_tensor(f_ref))
    return ad.add(ad.gem_pool(img_grid, p), ad.gem_pool(ad.as_tensor(f_txt), p))


def gated_vector_combine_batch(v_ref, v_txt, params):
    """Frozen-stream editor: per-dimension sigmoid gates on [B, D] vectors."""
    v_ref, v_txt = ad.as_tensor(v_ref), ad.as_tensor(v_txt)
    if v_ref.shape != v_txt.shape:
        raise ShapeError(f"vector widths disagree: {v_ref.shape} vs {v_txt.shape}")
    d = v_ref.shape[1]
    stacked = ad.concat([v_ref, v_txt], axis=1)  # [B, 2D]

    def gate(w, b):
        return ad.sigmoid(ad.add(ad.matmul(stacked, ad.transpose(w)), ad.reshape(b, (1, d))))

    a_ref = gate(params.gate_ref_w, params.gate_ref_b)
    a_txt = gate(params.gate_txt_w, params.gate_txt_b)
    return ad.add(ad.mul(a_ref, v_ref), ad.mul(a_txt, v_txt))


def combine_query_batch(f_ref, f_txt, params, p=DEFAULT_GEM_P):
    """Full editor pipeline for a batch; returns the batched CombinerOutput parts."""
    spatial = spatial_attention_batch(f_ref, f_txt, p)
    image_edited = edit_image_batch(f_ref, spatial, params)
    word = word_attention_batch(f_txt, f_ref, p)
    text_edited = edit_text_batch(f_txt, word, params)
    alpha, combined = adaptive_combine_batch(image_edited, text_edited, params, p)
    return alpha, combined, image_edited, text_edited, spatial, word


# ---------------------------------------------------------------------------
# single-sample forms

def _addb(x):
    x = ad.as_tensor(x)
    return ad.reshape(x, (1,) + x.shape)


def _dropb(x):
    return ad.reshape(x, x.shape[1:])


def spatial_attention(f_ref, f_txt, p=DEFAULT_GEM_P):
    """[C, H, W] x [D, L] -> [1, H, W]."""
    return _dropb(spatial_attention_batch(_addb(f_ref), _addb(f_txt), p))


def word_attention(f_txt, f_ref, p=DEFAULT_GEM_P):
    """[D, L] x [C, H, W] -> [1, L]."""
    return _dropb(word_attention_batch(_addb(f_txt), _addb(f_ref), p))


def edit_image(f_ref, spatial_attn, params):
    return _dropb(edit_image_batch(_addb(f_ref), _addb(spatial_attn), params))


def edit_text(f_txt, word_attn, params):
    return _dropb(edit_text_batch(_addb(f_txt), _addb(word_attn), params))


def adaptive_combine(image_edited, text_edited, params, p=DEFAULT_GEM_P):
    """Single-query combiner; returns (alpha scalar, combined [C])."""
    alpha, combined = adaptive_combine_batch(_addb(image_edited), _addb(text_edited), params, p)
    return ad.reshape(alpha, ()), _dropb(combined)


def gated_vector_combine(v_ref, v_txt, params):
    """[D] x [D] -> [D] for the frozen stream."""
    return _dropb(gated_vector_combine_batch(_addb(v_ref), _addb(v_txt), params))


def combine_query(f_ref, f_txt, params, p=DEFAULT_GEM_P):
    """Single-query editor pipeline returning a CombinerOutput."""
    alpha, combined, image_edited, text_edited, spatial, word = combine_query_batch(
        _addb(f_ref), _addb(f_txt), params, p
    )
    return CombinerOutput(
        alpha=ad.reshape(alpha, ()),
        combined=_dropb(combined),
        image_edited=_dropb(image_edited),
        text_edited=_dropb(text_edited),
        spatial_attn=_dropb(spatial),
        word_attn=_dropb(word),
    )
