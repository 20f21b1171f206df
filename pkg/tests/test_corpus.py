import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crisiskit.app.corpus import (
    CLS,
    PAD,
    SPECIAL_TOKENS,
    CrisisTokenizer,
    TokenSequence,
    collate,
    decode,
    encode,
    encode_batch,
    normalize_text,
    read_records,
    tokenizer_fingerprint,
    train_tokenizer,
    write_jsonl,
)
from crisiskit.app.errors import ConfigError, DataError, ShapeError
from crisiskit.app.schemas import Label, RawRecord

# ---------- Normalization ----------

CASES = [
    ("see https://t.co/abc now", "see HTTPURL now"),
    ("go to www.example.com/x?y=1 today", "go to HTTPURL today"),
    ("HTTP://LOUD.EXAMPLE", "HTTPURL"),
    ("two links http://a.b http://c.d", "two links HTTPURL HTTPURL"),
    ("thanks @bob_1!", "thanks @USER!"),
    ("@a @b @c", "@USER @USER @USER"),
    ("@a@b", "@USER@USER"),
    ("http://x.com/@user", "HTTPURL"),
    ("fish &amp; chips", "fish & chips"),
    ("a &amp;amp; b", "a & b"),
    ("&lt;3 you", "<3 you"),
    ("&quot;quoted&quot;", '"quoted"'),
    ("&#64;alice hi", "@USER hi"),
    ("&bogus; ok", "ok"),
    ("tab\tand\nnewline", "tab and newline"),
    ("  lots   of \n space\t", "lots of space"),
    ("non&nbsp;breaking", "non breaking"),
    ("hello 👍", "hello :thumbs_up:"),
    ("help 🙏🙏", "help :folded_hands::folded_hands:"),
    ("", ""),
    ("   ", ""),
    ("plain text stays", "plain text stays"),
    ("@USER already", "@USER already"),
    ("HTTPURL already", "HTTPURL already"),
    ("Visit HTTPS://Example.org/path.", "Visit HTTPURL"),
    ("url:http://a.b/c", "url:HTTPURL"),
    ("(www.site.com)", "(HTTPURL"),
    ("check http://x.co, @y!", "check HTTPURL @USER!"),
    ("@Bob's post", "@USER's post"),
    ("email me@example.com", "email me@USER.com"),
    ("@_under_score", "@USER"),
    ("@ alone", "@ alone"),
    ("RT @news: flood", "RT @USER: flood"),
    ("x @y\tz", "x @USER z"),
    ("&gt;&gt; next", ">> next"),
    ("Tom &amp; Jerry &amp; co", "Tom & Jerry & co"),
    ("&#x41;BC", "ABC"),
    ("caf&eacute;", "café"),
    ("&amp;lt;b&amp;gt;", "<b>"),
    ("&amp;#64;bob", "@USER"),
    ("12 &lt; 13", "12 < 13"),
    ("line1\r\nline2", "line1 line2"),
    ("a\u00a0b", "a b"),
    ("\u2003em space", "em space"),
    ("\n\nleading newlines", "leading newlines"),
    ("🔥 fire", ":fire: fire"),
    ("😀", ":grinning_face:"),
    ("emoji👍inline", "emoji:thumbs_up:inline"),
    ("hashtag #flood stays", "hashtag #flood stays"),
    ("FOOD & WATER", "FOOD & WATER"),
]


@pytest.mark.parametrize("raw,expected", CASES)
def test_normalize_cases(raw, expected):
    assert normalize_text(raw) == expected


@settings(max_examples=10_000, deadline=None)
@given(st.text(max_size=80))
def test_normalize_is_idempotent(s):
    once = normalize_text(s)
    assert normalize_text(once) == once


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("ab @_&;#:/.w \n\t")), max_size=60))
def test_normalize_leaves_no_raw_mentions_or_runs(s):
    out = normalize_text(s)
    assert not re.search(r"@(?!USER\b)\w", out)
    assert "  " not in out
    assert out == out.strip()


# ---------- Tokenizer ----------

def test_special_tokens_hold_reserved_ids(tokenizer):
    assert tokenizer.special_ids == {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    assert tokenizer.vocab_size <= 512


def test_placeholders_are_single_tokens(tokenizer):
    ids = tokenizer.tokenize("HTTPURL @USER")
    assert tokenizer.special_ids["HTTPURL"] in ids
    assert tokenizer.special_ids["@USER"] in ids


def test_encode_pads_and_masks(tokenizer):
    seq = encode(tokenizer, "urgently need food", max_length=16)
    assert len(seq) == 16
    assert seq.ids[0] == tokenizer.cls_id
    n = sum(seq.attention_mask)
    assert seq.attention_mask == tuple([1] * n + [0] * (16 - n))
    assert all(i == tokenizer.pad_id for i in seq.ids[n:])


def test_encode_truncates(tokenizer):
    seq = encode(tokenizer, "need food " * 50, max_length=8)
    assert len(seq) == 8
    assert sum(seq.attention_mask) == 8


def test_encode_rejects_nonpositive_length(tokenizer):
    with pytest.raises(ConfigError):
        encode(tokenizer, "x", max_length=0)


def test_decode_inverts_encode(tokenizer):
    text = normalize_text("offering free meals in Lagos")
    out = decode(tokenizer, encode(tokenizer, text, max_length=32).ids)
    assert out.startswith(CLS)
    assert out.endswith(text)
    assert PAD not in out


def test_save_load_roundtrip(tokenizer, tmp_path):
    tokenizer.save(tmp_path)
    again = CrisisTokenizer.load(tmp_path)
    assert tokenizer_fingerprint(again) == tokenizer_fingerprint(tokenizer)
    text = "we can donate blankets in Dublin @USER"
    assert again.tokenize(text) == tokenizer.tokenize(text)


def test_fingerprint_differs_between_tokenizers(tokenizer):
    other = train_tokenizer(["completely different words here"] * 20, vocab_size=300)
    assert other.fingerprint != tokenizer.fingerprint


def test_training_is_deterministic(records, tmp_path):
    texts = [normalize_text(r.text) for r in records]
    first = train_tokenizer(texts, vocab_size=512).save(tmp_path / "a")
    second = train_tokenizer(list(texts), vocab_size=512).save(tmp_path / "b")
    for p, q in zip(first, second):
        assert p.read_bytes() == q.read_bytes()


def test_most_frequent_pair_merges_first():
    tok = train_tokenizer(["aaab"], vocab_size=270)
    assert tok.merges[0] == ("a", "a")


def test_train_tokenizer_rejects_tiny_vocab_and_empty_corpus():
    with pytest.raises(ConfigError):
        train_tokenizer(["a b c"], vocab_size=263)
    with pytest.raises(DataError):
        train_tokenizer([], vocab_size=400)


def test_encode_batch_and_collate(tokenizer):
    ids, mask = encode_batch(tokenizer, ["a", "b c d"], max_length=10)
    assert ids.shape == mask.shape == (2, 10)
    with pytest.raises(ShapeError):
        collate([TokenSequence((1, 2), (1, 1)), TokenSequence((1,), (1,))])
    with pytest.raises(ShapeError):
        collate([])


# ---------- JSONL ----------

def test_jsonl_roundtrip_and_duplicates(tmp_path):
    recs = [RawRecord(id="1", text="need food", label="request"), RawRecord(id="2", text="free food", label=Label.OFFER)]
    path = write_jsonl(tmp_path / "r.jsonl", recs)
    back = read_records(path)
    assert [r.label for r in back] == [Label.REQUEST, Label.OFFER]

    dup = tmp_path / "dup.jsonl"
    dup.write_text("\n".join(json.dumps({"id": "x", "text": t}) for t in ("a", "b")), encoding="utf-8")
    with pytest.raises(DataError):
        read_records(dup)


def test_read_records_reports_bad_json(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "1", "text": "ok"}\n{oops\n', encoding="utf-8")
    with pytest.raises(DataError):
        read_records(bad)
