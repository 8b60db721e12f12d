"""
Utility functions for termfactor.
"""

import hashlib
import re
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

PathLike = Union[str, Path]

# Words (letters, digits, inner hyphens/apostrophes) or single punctuation marks
_TOKEN_RE = re.compile(r"\w+(?:[-'’]\w+)*|[^\w\s]", re.UNICODE)
_NO_SPACE_BEFORE = set(".,;:!?)]}%")
_NO_SPACE_AFTER = set("([{")


def tokenize(text: str) -> List[str]:
    """
    Split raw text into word and punctuation tokens.

    This is a deliberately simple stand-in for a full MT tokenizer:
    - runs of word characters form one token ("Düsseldorf's" stays whole)
    - hyphenated compounds stay together ("Stellvertreter-quelle")
    - every other non-space character is its own token

    Args:
        text: A raw sentence

    Returns:
        List of tokens (never contains empty strings)
    """
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    """Join tokens for display, removing spaces around common punctuation."""
    output = ""
    for token in tokens:
        if not output or token in _NO_SPACE_BEFORE or output[-1] in _NO_SPACE_AFTER:
            output += token
        else:
            output += " " + token
    return output


def read_lines(path: PathLike) -> List[str]:
    """Read a UTF-8 text file into a list of lines without trailing newlines."""
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n").rstrip("\r") for line in f]


def write_lines(path: PathLike, lines: Iterable[str]) -> Path:
    """Write lines to a UTF-8 text file, creating parent directories."""
    output_file = Path(path).expanduser()
    output_file.parent.mkdir(parents=True, exist_ok=True)
    with open(output_file, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")
    return output_file


def read_token_lines(path: PathLike) -> List[List[str]]:
    """Read a pre-tokenized (space separated) corpus file."""
    return [line.split() for line in read_lines(path)]


def write_token_lines(path: PathLike, sentences: Iterable[Sequence[str]]) -> Path:
    """Write a corpus as space separated tokens, one sentence per line."""
    return write_lines(path, (" ".join(tokens) for tokens in sentences))


def file_checksum(path: PathLike) -> str:
    """
    Compute the SHA-256 checksum of a file.

    Args:
        path: File to hash

    Returns:
        str: Hex digest
    """
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def text_checksum(text: str) -> str:
    """SHA-256 hex digest of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def format_seconds(seconds: Optional[float]) -> str:
    """
    Format a duration in human-readable form.

    Args:
        seconds: Duration in seconds, or None if not measured

    Returns:
        Formatted string (e.g., "850 µs", "12.3 ms", "0.19 s")
    """
    if seconds is None:
        return "N/A"

    if seconds < 1e-3:
        return f"{seconds * 1e6:.0f} µs"
    elif seconds < 1.0:
        return f"{seconds * 1e3:.1f} ms"
    else:
        return f"{seconds:.2f} s"
