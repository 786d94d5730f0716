import math

import numpy as np
import pytest
import torch

from modiff.conditioning import (
    LOG_FLOOR, TextEncoder, Vocabulary, Waveform, encode_text, mel_band_centers, mel_filterbank, mel_spectrogram,
    pad_tokens, project_audio, read_wav, resample, tokenize, write_wav,
)
from modiff.motion import DimensionError


def tone(freq, seconds=1.0, rate=16000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


class TestResample:
    def test_equal_rates(self, rng):
        w = Waveform(rng.standard_normal(100), 16000)
        assert resample(w, 16000).samples.tobytes() == w.samples.tobytes()

    def test_length(self, rng):
        out = resample(Waveform(rng.standard_normal(32000), 32000), 16000)
        assert out.samples.shape == (16000,) and out.sample_rate == 16000

    @pytest.mark.parametrize("n,src,dst", [(44100, 44100, 16000), (1001, 22050, 16000), (777, 8000, 16000)])
    def test_length_formula(self, n, src, dst):
        out = resample(Waveform(np.zeros(n), src), dst)
        assert out.samples.shape[0] == round(n * dst / src)

    def test_sine_48k(self):
        out = resample(tone(100, 1.0, 48000, 1.0), 16000)
        x = out.samples[2000:-2000]
        spec = np.abs(np.fft.rfft(x))
        freqs = np.fft.rfftfreq(x.size, 1 / 16000)
        assert freqs[np.argmax(spec)] == pytest.approx(100, abs=16000 / x.size)
        assert np.sqrt(2 * np.mean(x**2)) == pytest.approx(1.0, rel=0.01)

    def test_invalid(self):
        with pytest.raises(ValueError):
            resample(Waveform(np.zeros(0), 8000), 16000)


class TestWav:
    def test_pcm_roundtrip(self, tmp_path, rng):
        w = Waveform(np.round(rng.uniform(-0.9, 0.9, 500) * 32767) / 32767, 16000)
        write_wav(tmp_path / "a.wav", w)
        back = read_wav(tmp_path / "a.wav")
        np.testing.assert_allclose(back.samples, w.samples * 32767 / 32768, rtol=0, atol=1e-12)
        assert back.sample_rate == 16000

    def test_float_roundtrip(self, tmp_path, rng):
        w = Waveform(rng.uniform(-1, 1, 300).astype(np.float32), 22050)
        write_wav(tmp_path / "f.wav", w, pcm16=False)
        assert read_wav(tmp_path / "f.wav").samples.tobytes() == w.samples.tobytes()

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]), 16000)


class TestMel:
    def test_one_second_32_frames(self):
        assert mel_spectrogram(tone(440)).frames.shape == (32, 80)

    @pytest.mark.parametrize("n", [1, 511, 512, 5000, 16001])
    def test_frame_count(self, n):
        assert mel_spectrogram(Waveform(np.zeros(n), 16000)).n_frames == 1 + n // 512

    def test_silence_floor(self):
        m = mel_spectrogram(Waveform(np.zeros(16000), 16000)).frames
        assert np.all(m == math.log(LOG_FLOOR))

    def test_tone_band(self):
        m = mel_spectrogram(tone(1000)).frames
        nearest = int(np.argmin(np.abs(mel_band_centers(80, 0, 8000) - 1000)))
        assert np.all(np.argmax(m, axis=1) == nearest)

    def test_filterbank_peaks(self):
        fb = mel_filterbank(16000, 1024, 80, 0, 8000)
        assert fb.shape == (80, 513)
        assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0 + 1e-12)
        assert np.all(fb.sum(axis=1) > 0)

    def test_nyquist_checked(self):
        with pytest.raises(ValueError):
            mel_spectrogram(Waveform(np.zeros(100), 8000), fmax=8000)


class TestProjection:
    def test_identity(self, rng):
        mel = rng.standard_normal((5, 80))
        c = project_audio(mel, torch.eye(80, dtype=torch.float64), torch.zeros(80, dtype=torch.float64))
        np.testing.assert_array_equal(c.rows.numpy(), mel)
        assert c.modality == "audio"

    def test_zero_mel(self, rng):
        b = torch.tensor(rng.standard_normal(6))
        c = project_audio(np.zeros((4, 80)), torch.tensor(rng.standard_normal((80, 6))), b)
        np.testing.assert_array_equal(c.rows.numpy(), np.broadcast_to(b.numpy(), (4, 6)))

    def test_matmul(self, rng):
        mel, w, b = rng.standard_normal((3, 80)), rng.standard_normal((80, 5)), rng.standard_normal(5)
        c = project_audio(mel, torch.tensor(w), torch.tensor(b)).rows.numpy()
        for i in range(3):
            for j in range(5):
                assert c[i, j] == pytest.approx(sum(mel[i, k] * w[k, j] for k in range(80)) + b[j], rel=1e-10)

    def test_band_mismatch(self):
        with pytest.raises(DimensionError):
            project_audio(np.zeros((3, 40)), torch.zeros(80, 4), torch.zeros(4))


class TestText:
    def setup_method(self):
        torch.manual_seed(0)
        self.vocab = Vocabulary.build(["a figure waves left arm", "a figure steps right arm"])
        self.enc = TextEncoder(len(self.vocab), 16, 8, heads=2)

    def test_tokenize(self):
        assert tokenize("A Figure, waves-LEFT arm!") == ["a", "figure", "waves", "left", "arm"]

    def test_identical(self):
        ids = self.vocab.encode("a figure waves left arm")
        a = encode_text(ids, self.enc).rows
        b = encode_text(ids, self.enc).rows
        assert torch.equal(a, b) and a.shape == (5, 8)

    def test_single_token(self):
        assert encode_text([3], self.enc).rows.shape == (1, 8)

    def test_order_matters(self):
        ids = self.vocab.encode("waves left")
        a = encode_text(ids, self.enc).rows
        b = encode_text(ids[::-1], self.enc).rows
        assert not torch.allclose(a, b.flip(0))

    def test_unknown_ids_map_to_unk(self):
        a = encode_text([3, 1], self.enc).rows
        b = encode_text([3, 999], self.enc).rows
        assert torch.equal(a, b)
        assert self.vocab.encode("dances") == [1]

    def test_vocab_roundtrip(self, tmp_path):
        self.vocab.save(tmp_path / "v.tsv")
        back = Vocabulary.load(tmp_path / "v.tsv")
        assert back.to_list() == self.vocab.to_list()
        assert Vocabulary.from_list(back.to_list()).stoi == self.vocab.stoi

    def test_bad_vocab_file(self, tmp_path):
        (tmp_path / "v.tsv").write_text("0\t<pad>\n2\tx\n")
        with pytest.raises(ValueError):
            Vocabulary.load(tmp_path / "v.tsv")

    def test_pad_tokens(self):
        assert pad_tokens([[3, 4, 5], [6]]).tolist() == [[3, 4, 5], [6, 0, 0]]

    def test_empty(self):
        with pytest.raises(ValueError):
            encode_text([], self.enc)
