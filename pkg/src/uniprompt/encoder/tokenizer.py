"""Word-level tokenizer over a small fixed vocabulary."""

from __future__ import annotations

from importlib import resources

import numpy as np

from uniprompt.errors import LengthError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
TEMPLATE = "a photo of a {}"
TEMPLATE_WORDS = ("a", "photo", "of")
TEMPLATE_LENGTH = 4


def shipped_words():
    text = resources.files("uniprompt.encoder").joinpath("words.txt").read_text()
    return tuple(w for w in text.split() if w)


class Tokenizer:
    """Lowercase whitespace tokenizer with BOS/EOS sentinels and right padding.

    The vocabulary is the special tokens, the template words, the shipped
    word list, then any extra words (sorted) from a dataset's class names.
    """

    def __init__(self, context_length=16, extra_words=(), words=None):
        if words is None:
            base = list(SPECIALS) + list(TEMPLATE_WORDS) + list(shipped_words())
            known = set(base)
            base += sorted({w.lower() for w in extra_words} - known)
            words = base
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.context_length = int(context_length)
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    @property
    def vocab_size(self):
        return len(self.words)

    def split(self, text):
        return text.lower().split()

    def word_ids(self, text):
        return [self.index.get(w, self.unk_id) for w in self.split(text)]

    def _pack(self, content, what):
        total = len(content) + 2
        if total > self.context_length:
            raise LengthError(
                f"{what} needs {total} tokens including sentinels, context_length is {self.context_length}"
            )
        ids = np.full(self.context_length, self.pad_id, dtype=np.int64)
        ids[0] = self.bos_id
        ids[1:1 + len(content)] = content
        ids[1 + len(content)] = self.eos_id
        return ids

    def encode(self, text):
        if not text or not text.strip():
            raise LengthError("cannot tokenize empty text")
        return self._pack(self.word_ids(text), repr(text))

    def encode_prompted(self, class_name, prompt_length):
        """Ids for ``[BOS, <m prompt slots>, CLASS..., EOS, PAD...]``.

        Slot positions hold PAD ids; the text encoder overwrites them with
        prompt vectors.
        """
        if not class_name or not class_name.strip():
            raise LengthError("cannot tokenize empty class name")
        content = [self.pad_id] * int(prompt_length) + self.word_ids(class_name)
        return self._pack(content, f"prompt of length {prompt_length} + {class_name!r}")

    def encode_template(self, class_name):
        return self.encode(TEMPLATE.format(class_name))

    def eos_positions(self, ids):
        ids = np.atleast_2d(ids)
        return np.argmax(ids == self.eos_id, axis=1)
