"""Bundle of encoder configs, parameters and vocabulary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import TextConfig, VisionConfig, encode_images, encode_texts, init_params, logit_scale
from .prompts import caption_corpus
from .tensor import Tensor
from .tokenizer import Vocabulary, build_vocab, encode_batch

VOCAB_MAX_SIZE = 512


def default_vocab() -> Vocabulary:
    """Vocabulary over everything the caption language can say, shared by all ablation modes."""
    return build_vocab(caption_corpus(), VOCAB_MAX_SIZE)


@dataclass
class ClipModel:
    vision: VisionConfig
    text: TextConfig
    params: dict[str, Tensor]
    vocab: Vocabulary

    @classmethod
    def create(cls, seed: int = 0, vision: VisionConfig | None = None, vocab: Vocabulary | None = None,
               text_depth: int = 3, text_width: int = 64, text_heads: int = 4) -> "ClipModel":
        vision = vision or VisionConfig()
        vocab = vocab or default_vocab()
        text = TextConfig(vocab_size=len(vocab), depth=text_depth, width=text_width, heads=text_heads,
                          embed_dim=vision.embed_dim)
        return cls(vision, text, init_params(vision, text, seed), vocab)

    @property
    def scale(self) -> float:
        return logit_scale(self.params)

    def image_embeddings(self, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        chunks = [encode_images(images[i:i + batch_size], self.params, self.vision).data
                  for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.vision.embed_dim), np.float32)

    def text_embeddings(self, captions, batch_size: int = 250) -> np.ndarray:
        ids = encode_batch(list(captions), self.vocab, self.text.context)
        chunks = [encode_texts(ids[i:i + batch_size], self.params, self.text).data
                  for i in range(0, len(ids), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.text.embed_dim), np.float32)
