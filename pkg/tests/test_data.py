import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mixpgd.data import (Alphabet, AudioExample, DataError, MelConfig, featurize, featurize_corpus,
                         infeasible_examples, load_manifest, make_batch, n_frames,
                         normalize_transcript, synth_toy_corpus, write_wav)
from mixpgd.losses import ctc_loss

from conftest import TINY_MEL


# -- alphabet / text ---------------------------------------------------------

def test_alphabet_layout():
    ab = Alphabet()
    assert ab.n_classes == 29
    assert ab.blank_index == 28
    assert ab.encode("a z'") == [0, 26, 25, 27]


def test_alphabet_rejects_duplicates_and_colliding_blank():
    with pytest.raises(DataError):
        Alphabet(("a", "a"), 2)
    with pytest.raises(DataError):
        Alphabet(("a", "b"), 1)


@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz '", max_size=40))
def test_encode_decode_roundtrip(text):
    ab = Alphabet()
    assert ab.decode(ab.encode(text)) == text


def test_encode_unknown_character():
    with pytest.raises(DataError, match="'!'"):
        Alphabet().encode("hi!")


def test_normalize_transcript():
    assert normalize_transcript("Hello, World!") == "hello world"
    assert normalize_transcript("  Don’t\tSTOP  ") == "don't stop"
    assert normalize_transcript("Café") == "cafe"


def test_alphabet_dict_roundtrip():
    ab = Alphabet()
    assert Alphabet.from_dict(ab.to_dict()) == ab


def test_empty_transcript_rejected():
    with pytest.raises(DataError):
        AudioExample("x", "", waveform=np.zeros(800))


# -- manifest ---------------------------------------------------------------

def _tone(seconds=0.3):
    t = np.arange(int(16000 * seconds)) / 16000
    return 0.3 * np.sin(2 * np.pi * 440 * t)


def test_manifest_preserves_file_order(tmp_path):
    rows = ["id,audio_path,transcript"]
    for name in ("c", "a", "b"):
        write_wav(tmp_path / f"{name}.wav", _tone())
        rows.append(f"{name},{name}.wav,Word {name.upper()}")
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    examples, rejects = load_manifest(tmp_path / "m.csv")
    assert [e.id for e in examples] == ["c", "a", "b"]
    assert [e.transcript for e in examples] == ["word c", "word a", "word b"]
    assert rejects == []


def test_manifest_missing_audio_is_rejected(tmp_path, caplog):
    (tmp_path / "m.csv").write_text("id,audio_path,transcript\nu1,nope.wav,hi\n")
    examples, rejects = load_manifest(tmp_path / "m.csv")
    assert examples == [] and rejects == ["u1"]
    assert "u1" in caplog.text


def test_manifest_missing_file():
    with pytest.raises(FileNotFoundError):
        load_manifest("/nonexistent/manifest.csv")


def test_manifest_missing_columns(tmp_path):
    (tmp_path / "m.csv").write_text("id,path\nx,y\n")
    with pytest.raises(DataError, match="transcript"):
        load_manifest(tmp_path / "m.csv")


def test_wav_roundtrip_rate_check(tmp_path):
    from scipy.io import wavfile
    wavfile.write(tmp_path / "bad.wav", 8000, np.zeros(800, dtype=np.int16))
    (tmp_path / "m.csv").write_text("id,audio_path,transcript\nb,bad.wav,hi\n")
    _, rejects = load_manifest(tmp_path / "m.csv")
    assert rejects == ["b"]


# -- featurization ----------------------------------------------------------

def test_one_second_gives_98_frames():
    ex = AudioExample("s", "a", waveform=_tone(1.0))
    feats = featurize(ex)
    assert feats.shape == (128, 98)
    assert n_frames(16000, MelConfig()) == 98


def test_silence_is_finite():
    ex = AudioExample("z", "a", waveform=np.zeros(4000))
    feats = featurize(ex, MelConfig(normalize=False))
    assert np.isfinite(feats).all()
    assert np.allclose(feats, np.log(1e-6))
    assert np.isfinite(featurize(ex)).all()


def test_featurize_deterministic():
    ex = synth_toy_corpus(5, 1)[0]
    assert np.array_equal(featurize(ex, TINY_MEL), featurize(ex, TINY_MEL))


def test_featurize_too_short_names_example():
    with pytest.raises(DataError, match="short-one"):
        featurize(AudioExample("short-one", "a", waveform=np.zeros(399)))


def test_featurize_normalized_moments():
    feats = featurize(synth_toy_corpus(1, 1)[0])
    assert abs(feats.mean()) < 1e-4
    assert abs(feats.std() - 1) < 1e-3


# -- batching ---------------------------------------------------------------

def _fake(id_, frames, text="ab", mels=4):
    return AudioExample(id_, text, features=np.ones((mels, frames), dtype=np.float32))


def test_make_batch_pads_with_zeros():
    b = make_batch([_fake("a", 50), _fake("b", 80, "abc")])
    assert tuple(b.features.shape) == (2, 4, 80)
    assert b.feature_lengths.tolist() == [50, 80]
    assert b.label_lengths.tolist() == [2, 3]
    assert torch.all(b.features[0, :, 50:] == 0)
    assert b.label_indices[0, 2] == 0
    assert b.time_mask().sum(1).tolist() == [50, 80]


def test_make_batch_single_and_empty():
    b = make_batch([_fake("a", 7)])
    assert b.feature_lengths.tolist() == [7]
    with pytest.raises(DataError):
        make_batch([])


def test_make_batch_rejects_mixed_mel_bins():
    with pytest.raises(DataError, match="mel"):
        make_batch([_fake("a", 5), _fake("b", 5, mels=6)])


def test_infeasible_examples_flagged():
    b = make_batch([_fake("ok", 10, "ab"), _fake("long", 10, "abcde"), _fake("rep", 10, "aab")])
    # "abcde" needs 5 frames, "aab" needs 4 (repeat forces a blank)
    assert infeasible_examples(b, torch.tensor([5, 4, 3])) == ["long", "rep"]
    assert infeasible_examples(b, torch.tensor([5, 5, 4])) == []


def test_padding_does_not_change_loss(tiny_corpus, tiny_model, alphabet):
    batch = make_batch(tiny_corpus[:4], alphabet)
    out = tiny_model(batch.features, batch.feature_lengths)
    together = ctc_loss(out.log_probs, batch.label_indices, batch.label_lengths,
                        out.out_lengths, reduction="none")
    for i, ex in enumerate(tiny_corpus[:4]):
        one = make_batch([ex], alphabet)
        o = tiny_model(one.features, one.feature_lengths)
        alone = ctc_loss(o.log_probs, one.label_indices, one.label_lengths, o.out_lengths)
        assert float(alone.detach()) == pytest.approx(float(together[i].detach()), rel=1e-5)


# -- toy corpus -------------------------------------------------------------

def test_toy_corpus_deterministic():
    a, b = synth_toy_corpus(7, 10), synth_toy_corpus(7, 10)
    assert len(a) == 10
    assert all(np.array_equal(x.waveform, y.waveform) and x.transcript == y.transcript
               for x, y in zip(a, b))


def test_toy_corpus_seed_changes_audio():
    a, b = synth_toy_corpus(7, 3), synth_toy_corpus(8, 3)
    assert any(not np.array_equal(x.waveform, y.waveform) or x.waveform.shape != y.waveform.shape
               for x, y in zip(a, b))


def test_toy_corpus_singleton_and_invalid():
    assert len(synth_toy_corpus(0, 1)) == 1
    with pytest.raises(DataError):
        synth_toy_corpus(0, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_toy_corpus_roundtrip_and_finite(seed):
    ab = Alphabet()
    for ex in featurize_corpus(synth_toy_corpus(seed, 2), TINY_MEL):
        assert ab.decode(ab.encode(ex.transcript)) == ex.transcript
        assert np.isfinite(ex.features).all()
