from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ContractError, ParameterError

# leading validation pattern; shorter patterns take a prefix, longer ones cycle
BASE_PATTERN = (1, 0, 1, 1, 0, 0, 1, 0)


def fixed_pattern(k: int) -> np.ndarray:
    return np.array([BASE_PATTERN[i % len(BASE_PATTERN)] for i in range(k)], dtype=np.uint8)


@dataclass
class Message:
    """An n-bit watermark whose first ``pattern_len`` bits are the fixed pattern."""

    bits: np.ndarray
    pattern_len: int = 0

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or not np.isin(bits, (0, 1)).all():
            raise ContractError("message bits must be a 1-D array of 0/1")
        if not 0 <= self.pattern_len <= bits.size:
            raise ContractError(f"pattern_len {self.pattern_len} outside [0, {bits.size}]")
        self.bits = bits.astype(np.uint8)

    def __len__(self) -> int:
        return self.bits.size

    @property
    def payload(self) -> np.ndarray:
        return self.bits[self.pattern_len :]

    def pattern_ok(self) -> bool:
        return bool(np.array_equal(self.bits[: self.pattern_len], fixed_pattern(self.pattern_len)))

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.bits.astype(np.float32))

    def to_string(self) -> str:
        return "".join(str(int(b)) for b in self.bits)

    @classmethod
    def with_pattern(cls, payload, pattern_len: int) -> "Message":
        payload = np.asarray(payload, dtype=np.uint8)
        return cls(np.concatenate([fixed_pattern(pattern_len), payload]), pattern_len)

    @classmethod
    def random(cls, n_bits: int, pattern_len: int, rng: np.random.Generator) -> "Message":
        return cls.with_pattern(rng.integers(0, 2, n_bits - pattern_len), pattern_len)

    @classmethod
    def parse(cls, text: str, n_bits: int, pattern_len: int, raw: bool = False) -> "Message":
        """Parse a bit string (``0101...``) or hex (``0x...``) message.

        Unless ``raw``, the text is the payload and the pattern is prefixed;
        with ``raw`` it must already hold all ``n_bits`` bits.
        """
        text = text.strip()
        want = n_bits if raw else n_bits - pattern_len
        if text.lower().startswith("0x"):
            digits = text[2:]
            try:
                value = int(digits, 16)
            except ValueError as exc:
                raise ParameterError(f"invalid hex message {text!r}") from exc
            if value.bit_length() > want:
                raise ParameterError(f"hex message needs {value.bit_length()} bits, only {want} available")
            bits = [int(c) for c in format(value, f"0{want}b")]
        else:
            if set(text) - {"0", "1"}:
                raise ParameterError(f"message {text!r} is neither a bit string nor 0x-prefixed hex")
            bits = [int(c) for c in text]
        if len(bits) != want:
            raise ParameterError(f"message has {len(bits)} bits, expected {want}")
        if raw:
            return cls(np.array(bits), pattern_len)
        return cls.with_pattern(bits, pattern_len)
