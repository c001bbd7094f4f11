import pytest

from repdrop.prepare import (
    bible_documents,
    bible_text,
    build_splits,
    pack_documents,
    play_documents,
    read_documents,
    split_documents,
    write_splits,
)


def test_pack_documents_thresholds():
    lines = ["one two three", "Four, five!", "six"]
    assert pack_documents(lines, doc_words=4, min_tail=1) == ["one two three four , five !", "six"]
    assert pack_documents(lines, doc_words=4, min_tail=2) == ["one two three four , five !"]
    assert pack_documents([], doc_words=4) == []


def test_tokenizer_keeps_contractions_and_splits_punctuation():
    assert pack_documents(["O'er the hill, 'tis 42-fold."], doc_words=1) == ["o'er the hill , ' tis 42 - fold ."]


def test_play_documents_drop_speakers_headings_and_directions():
    text = "ACT I. SCENE 1.\nHAMLET.\nTo be, or not to be [Aside] that is\nEnter GHOST.\nthe question\n"
    # short capitalized lines ending in a period read as speaker tags, "Enter GHOST." included
    assert play_documents(text, doc_words=100, min_tail=1) == ["to be , or not to be that is the question"]


def test_bible_text_and_documents():
    module = 'x = Bible(\n    V,\n    """\n1. In the beginning God [was] here. 2. And so.\n3. Amen.\n""",\n    {"a": "b"},\n)\n'
    text = bible_text(module)
    assert "In the beginning" in text and "Bible" not in text
    assert bible_documents(text, doc_words=3, min_tail=1) == ["in the beginning god was here . and so .", "amen ."]
    with pytest.raises(ValueError):
        bible_text("no block here")


def test_split_documents_is_a_seeded_partition():
    docs = [f"doc {i}" for i in range(20)]
    splits = split_documents(docs, n_test=3, n_valid=2, seed=1)
    assert [len(splits[k]) for k in ("test", "valid", "train")] == [3, 2, 15]
    assert sorted(sum(splits.values(), [])) == sorted(docs)
    assert splits == split_documents(docs, n_test=3, n_valid=2, seed=1)
    assert splits != split_documents(docs, n_test=3, n_valid=2, seed=2)
    with pytest.raises(ValueError):
        split_documents(docs, n_test=10, n_valid=10)


def test_build_and_write_from_raw_files(tmp_path):
    raw = tmp_path / "raw" / "pkg"
    raw.mkdir(parents=True)
    verses = "\n".join(f"{i}. word{i} and more." for i in range(1, 400))
    (raw / "plain_text_bible.py").write_text(f'b = B(\n    """\n{verses}\n""",\n)\n')
    splits = build_splits(tmp_path / "raw", "kjv", n_test=1, n_valid=1, doc_words=50)
    paths = write_splits(splits, tmp_path / "out")
    assert sum(len(open(p).read().splitlines()) for p in paths.values()) == len(read_documents(raw, "kjv", 50))

    plays = tmp_path / "plays"
    plays.mkdir()
    (plays / "a_gut.txt").write_text("the king is dead long live the king\n" * 30, encoding="latin-1")
    assert len(read_documents(plays, "shakespeare", doc_words=40)) >= 4

    with pytest.raises(FileNotFoundError):
        read_documents(tmp_path / "out", "shakespeare")
    with pytest.raises(ValueError):
        read_documents(plays, "klingon")
