"""Build the bundled corpora from raw public-domain texts.

Two sources are supported, both fetched from PyPI without running any of
their code:

``kjv`` (default desk corpus)
    The King James Bible as shipped in the ``pythonbible-kjv`` wheel; the raw
    input is its ``pythonbible_kjv/plain_text_bible.py`` module, read as text::

        pip download pythonbible-kjv==0.0.2 --no-deps

``shakespeare``
    Project Gutenberg play texts from the ``shakespeare`` sdist
    (``shksprdata/texts/*_gut.txt``)::

        pip download shakespeare==0.6 --no-deps --no-binary :all:

Text is lower-cased and split into words, numbers and single punctuation
marks. Consecutive lines (paragraphs for the Bible) are packed into
documents of at least ``doc_words`` tokens, one document per output line.
"""

from __future__ import annotations

import glob
import logging
import os
import random
import re
from typing import Dict, Iterable, List

logger = logging.getLogger(__name__)

TOKEN = re.compile(r"[a-z]+(?:'[a-z]+)*|[0-9]+|[^\sa-z0-9]")
SPEAKER = re.compile(r"^[A-Z][A-Za-z' ]{0,24}\.$")
HEADING = re.compile(r"^(ACT|Scene|SCENE)\b")
STAGE = re.compile(r"\[[^\]]*\]")
VERSE_NUMBER = re.compile(r"\b\d+\.\s")

SOURCES = ("kjv", "shakespeare")


def pack_documents(lines: Iterable[str], doc_words: int = 200, min_tail: int = 40) -> List[str]:
    """Tokenize ``lines`` and pack them into documents of >= ``doc_words``
    tokens; a trailing remainder shorter than ``min_tail`` is dropped."""
    docs, buf = [], []
    for line in lines:
        buf.extend(TOKEN.findall(line.lower()))
        if len(buf) >= doc_words:
            docs.append(" ".join(buf))
            buf = []
    if len(buf) >= min_tail:
        docs.append(" ".join(buf))
    return docs


def play_documents(text: str, doc_words: int = 200, min_tail: int = 40) -> List[str]:
    text = STAGE.sub(" ", text)
    lines = (s for s in (line.strip() for line in text.splitlines())
             if s and not SPEAKER.match(s) and not s.isupper() and not HEADING.match(s))
    return pack_documents(lines, doc_words, min_tail)


def bible_text(module_source: str) -> str:
    """The verse text embedded in ``plain_text_bible.py`` (its first
    triple-quoted string)."""
    start = module_source.find('"""')
    end = module_source.find('"""', start + 3)
    if start < 0 or end < 0:
        raise ValueError("no embedded text block found")
    return module_source[start + 3:end]


def bible_documents(text: str, doc_words: int = 200, min_tail: int = 40) -> List[str]:
    # verse numbers go; the translators' bracketed supplied words stay as words
    text = VERSE_NUMBER.sub(" ", text).replace("[", "").replace("]", "")
    return pack_documents((line for line in text.splitlines() if line.strip()), doc_words, min_tail)


def read_documents(raw, source: str = "kjv", doc_words: int = 200) -> List[str]:
    """Documents from a raw source.

    ``raw`` is the ``plain_text_bible.py`` file (or a directory containing it
    anywhere below) for ``kjv``, and the directory of ``*_gut.txt`` plays for
    ``shakespeare``.
    """
    if source == "kjv":
        path = raw
        if os.path.isdir(raw):
            found = sorted(glob.glob(os.path.join(raw, "**", "plain_text_bible.py"), recursive=True))
            if not found:
                raise FileNotFoundError(f"no plain_text_bible.py under {raw}")
            path = found[0]
        with open(path, encoding="utf-8") as fh:
            return bible_documents(bible_text(fh.read()), doc_words)
    if source == "shakespeare":
        files = sorted(glob.glob(os.path.join(raw, "*_gut.txt")))
        if not files:
            raise FileNotFoundError(f"no *_gut.txt files under {raw}")
        docs: List[str] = []
        for f in files:
            with open(f, encoding="latin-1") as fh:
                docs.extend(play_documents(fh.read(), doc_words))
        logger.info("%d plays", len(files))
        return docs
    raise ValueError(f"unknown source {source!r}; expected one of {SOURCES}")


def split_documents(docs: List[str], n_test: int = 300, n_valid: int = 200, seed: int = 0) -> Dict[str, List[str]]:
    docs = list(docs)
    random.Random(seed).shuffle(docs)
    if len(docs) <= n_test + n_valid:
        raise ValueError("not enough documents for the requested splits")
    return {"test": docs[:n_test], "valid": docs[n_test:n_test + n_valid], "train": docs[n_test + n_valid:]}


def build_splits(raw, source: str = "kjv", n_test: int = 300, n_valid: int = 200, seed: int = 0,
                 doc_words: int = 200) -> Dict[str, List[str]]:
    docs = read_documents(raw, source, doc_words)
    logger.info("%d documents", len(docs))
    return split_documents(docs, n_test, n_valid, seed)


def write_splits(splits: Dict[str, List[str]], out_dir) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, docs in splits.items():
        path = os.path.join(out_dir, f"{name}.txt")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(docs) + "\n")
        paths[name] = path
    return paths
