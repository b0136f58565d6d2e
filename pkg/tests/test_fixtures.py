import os

import pytest

import dsp
from dataset import parse_manifest, resolve_audio_path
from fixtures import CAPTIONS, DURATION_S, LABELS, make_entry, make_fixtures, render_event
from numerics import SeededRng


class TestMakeFixtures:
    def test_counts_per_split(self, corpus):
        assert sorted(corpus) == ["test", "train", "valid"]
        assert [len(parse_manifest(corpus[s])) for s in ("train", "valid", "test")] == [4, 2, 2]

    def test_entries_are_consistent(self, corpus):
        for path in corpus.values():
            for entry in parse_manifest(path):
                audio = dsp.read_wav(resolve_audio_path(path, entry.audio_path))
                assert audio.size == int(round(DURATION_S * dsp.SAMPLE_RATE))
                labels = {event.label for event in entry.events}
                assert len(labels) == 1
                assert entry.caption in CAPTIONS[labels.pop()]

    def test_deterministic(self, tmp_path):
        a = make_fixtures(str(tmp_path / "a"), seed=5, counts={"train": 2})
        b = make_fixtures(str(tmp_path / "b"), seed=5, counts={"train": 2})
        with open(a["train"], "rb") as fa, open(b["train"], "rb") as fb:
            assert fa.read() == fb.read()
        wav = os.path.join("audio", "train_001.wav")
        with open(tmp_path / "a" / wav, "rb") as fa, open(tmp_path / "b" / wav, "rb") as fb:
            assert fa.read() == fb.read()


class TestMakeEntry:
    @pytest.mark.parametrize("label", LABELS)
    def test_events_ordered_and_inside(self, label):
        audio, events = make_entry(label, SeededRng(3))
        assert 1 <= len(events) <= 2
        assert abs(audio).max() <= 1.0
        previous_end = 0.0
        for event in events:
            assert event["label"] == label
            assert previous_end <= event["start_s"] < event["end_s"] <= DURATION_S
            previous_end = event["end_s"]

    @pytest.mark.parametrize("label", LABELS)
    def test_render_is_peak_limited(self, label):
        assert abs(render_event(label, 8000, dsp.SAMPLE_RATE, SeededRng(0))).max() <= 0.9 + 1e-12
