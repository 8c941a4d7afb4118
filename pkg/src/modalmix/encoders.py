"""Feature encoders for the two streams.

The trainable stream uses a two-layer strided conv for images (3 -> 16 -> C
channels, 16x16 -> 4x4) and a single-layer tanh recurrence over embedded
tokens for text.  The frozen stream emulates a fixed pretrained encoder
with seeded random projections that never receive gradients; only its
downstream editor trains.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IMAGE_SIZE, MAX_TEXT_LEN
from .errors import ParameterError, ShapeError, VocabularyError

MID_CHANNELS = 16


class TrainableEncoders:
    """Conv image encoder + recurrent text encoder, all parameters trainable."""

    def __init__(self, vocab, image_channels=32, text_dim=32, seed=0):
        if image_channels != text_dim:
            raise ParameterError(
                f"cross-modal dot products need equal widths, got C={image_channels}, D={text_dim}"
            )
        self.dim = image_channels
        self.vocab = tuple(vocab)
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        rng = np.random.default_rng([seed, 0])
        d = self.dim
        self.conv1_w = ad.parameter((MID_CHANNELS, 3, 3, 3), rng, fan_in=3 * 9)
        self.conv1_b = ad.parameter((MID_CHANNELS,), rng, fan_in=3 * 9)
        self.conv2_w = ad.parameter((d, MID_CHANNELS, 3, 3), rng, fan_in=MID_CHANNELS * 9)
        self.conv2_b = ad.parameter((d,), rng, fan_in=MID_CHANNELS * 9)
        self.embed = ad.parameter((len(self.vocab), d), rng, fan_in=d)
        self.rnn_w = ad.parameter((d, 2 * d), rng, fan_in=2 * d)
        self.rnn_b = ad.parameter((d,), rng, fan_in=2 * d)

    def named_parameters(self):
        return {
            "encoders.conv1_w": self.conv1_w,
            "encoders.conv1_b": self.conv1_b,
            "encoders.conv2_w": self.conv2_w,
            "encoders.conv2_b": self.conv2_b,
            "encoders.embed": self.embed,
            "encoders.rnn_w": self.rnn_w,
            "encoders.rnn_b": self.rnn_b,
        }

    def encode_images(self, images):
        """[B, 3, 16, 16] -> [B, C, 4, 4] feature maps."""
        x = ad.as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"expected [B, 3, {IMAGE_SIZE}, {IMAGE_SIZE}] images, got {x.shape}")
        h = ad.tanh(ad.conv3x3_stride2_batch(x, self.conv1_w, self.conv1_b))
        return ad.tanh(ad.conv3x3_stride2_batch(h, self.conv2_w, self.conv2_b))

    def encode_image(self, image):
        """[3, 16, 16] -> [C, 4, 4]."""
        x = ad.as_tensor(image)
        if x.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"expected a [3, {IMAGE_SIZE}, {IMAGE_SIZE}] image, got {x.shape}")
        out = self.encode_images(ad.reshape(x, (1,) + x.shape))
        return ad.reshape(out, out.shape[1:])

    def token_ids(self, tokens):
        if not 1 <= len(tokens) <= MAX_TEXT_LEN:
            raise ShapeError(f"text length must be 1..{MAX_TEXT_LEN}, got {len(tokens)}")
        try:
            return [self.token_index[t] for t in tokens]
        except KeyError as err:
            raise VocabularyError(f"unknown token {err.args[0]!r}") from err

    def encode_texts(self, token_lists):
        """Batch of equal-length token lists -> [B, D, L] hidden-state stacks."""
        lengths = {len(t) for t in token_lists}
        if len(lengths) != 1:
            raise ShapeError(f"batched text encoding needs equal lengths, got {sorted(lengths)}")
        length = lengths.pop()
        ids = np.array([self.token_ids(toks) for toks in token_lists], dtype=np.intp)
        nb = ids.shape[0]
        d = self.dim
        h = Tensor(np.zeros((d, nb)))
        states = []
        for t in range(length):
            x_t = ad.transpose(ad.gather_rows(self.embed, ids[:, t]))  # [D, B]
            h = ad.tanh(ad.conv1x1(ad.concat([x_t, h], axis=0), self.rnn_w, self.rnn_b))
            states.append(ad.reshape(h, (d, 1, nb)))
        seq = ad.concat(states, axis=1)  # [D, L, B]
        return ad.transpose(seq, (2, 0, 1))

    def encode_text(self, tokens):
        """Token list -> [D, L] per-step hidden states."""
        out = self.encode_texts([list(tokens)])
        return ad.reshape(out, out.shape[1:])


class FrozenEncoders:
    """Pretrained-like encoders: fixed seeded projections, never updated.

    Images map through a random linear projection of their pixels.  Each
    attribute token's embedding is the mean projected appearance of the
    catalog items carrying that attribute, which bakes the image-text
    correspondence a web-scale pretrained encoder would have learned into
    a deterministic, seed-reproducible table.  Template words get small
    random embeddings.  Texts are encoded as the normalized mean of their
    token embeddings.
    """

    def __init__(self, schema, dim=32, seed=0):
        from .data import generate_catalog, render_base

        self.dim = dim
        self.vocab = schema.tokens()
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        rng = np.random.default_rng([seed, 1])
        n_px = 3 * IMAGE_SIZE * IMAGE_SIZE
        self.img_proj = Tensor(rng.uniform(-1, 1, size=(dim, n_px)) / np.sqrt(n_px))

        catalog = generate_catalog(schema, seed)
        projected = np.stack(
            [self.img_proj.data @ render_base(item, schema).ravel() for item in catalog]
        )
        embed = rng.uniform(-1, 1, size=(len(self.vocab), dim)) * 0.1
        for attr_pos, name in enumerate(schema.attributes):
            for value in schema.vocab[name]:
                rows = [i for i, item in enumerate(catalog) if item.values[attr_pos] == value]
                mean_vec = projected[rows].mean(axis=0)
                embed[self.token_index[value]] = self._normalize(mean_vec)
        self.tok_embed = Tensor(embed)

    def named_parameters(self):
        return {
            "frozen.img_proj": self.img_proj,
            "frozen.tok_embed": self.tok_embed,
        }

    def _normalize(self, z):
        return z / max(np.linalg.norm(z), 1e-12)

    def encode_image(self, image):
        """[3, 16, 16] -> unit-norm [D] vector (no gradient)."""
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"expected a [3, {IMAGE_SIZE}, {IMAGE_SIZE}] image, got {img.shape}")
        return Tensor(self._normalize(self.img_proj.data @ img.ravel()))

    def encode_text(self, tokens):
        """Token list -> unit-norm [D] bag-of-embeddings vector (no gradient)."""
        if not 1 <= len(tokens) <= MAX_TEXT_LEN:
            raise ShapeError(f"text length must be 1..{MAX_TEXT_LEN}, got {len(tokens)}")
        try:
            ids = [self.token_index[t] for t in tokens]
        except KeyError as err:
            raise VocabularyError(f"unknown token {err.args[0]!r}") from err
        return Tensor(self._normalize(self.tok_embed.data[ids].mean(axis=0)))
