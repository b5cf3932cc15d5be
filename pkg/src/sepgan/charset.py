"""Character set shared by the renderer, recognizer and discriminator."""
import string
from dataclasses import dataclass

DEFAULT_SYMBOLS = string.ascii_uppercase + string.digits


@dataclass(frozen=True)
class Charset:
    """Ordered symbol table. Class ``len(symbols)`` is end-of-sequence.

    The recognizer predicts ``num_classes`` outputs (symbols + EOS); the
    discriminator content head only covers the symbols.
    """

    symbols: str = DEFAULT_SYMBOLS

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("charset is empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("charset symbols must be unique")

    @property
    def eos_index(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, ch):
        return ch in self._lookup

    @property
    def _lookup(self):
        # cached on first access; dataclass is frozen so bypass __setattr__
        try:
            return self.__dict__["_table"]
        except KeyError:
            table = {c: i for i, c in enumerate(self.symbols)}
            object.__setattr__(self, "_table", table)
            return table

    def encode(self, text: str) -> list[int]:
        table = self._lookup
        try:
            return [table[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in charset") from None

    def decode(self, indices) -> str:
        out = []
        for i in indices:
            i = int(i)
            if i == self.eos_index:
                break
            out.append(self.symbols[i])
        return "".join(out)

    def validate(self, text: str) -> None:
        self.encode(text)

    def normalize(self, text: str) -> str:
        return "".join(c for c in text.upper() if c in self)


DEFAULT_CHARSET = Charset()


def normalize_text(s: str, charset: Charset = DEFAULT_CHARSET) -> str:
    """Uppercase and drop anything outside the charset ("Cat!" -> "CAT")."""
    return charset.normalize(s)
