"""
From a waveform to a normalized log-mel matrix
===============================================

Generate one synthetic utterance, take two disjoint 2 s views of it,
distort each view independently and turn both into features.
"""
import tempfile

import numpy as np

from sslsv.audio_io import Waveform, sample_disjoint_pair
from sslsv.augment import AugmentPolicy, NoiseCorpus, RirCorpus, apply_policy, power
from sslsv.features import extract_features, log_mel
from sslsv.synth import make_corpus, speaker_profile, synth_utterance

# a 5 s utterance from speaker 0 of corpus seed 7
rng = np.random.default_rng(0)
speech = Waveform(synth_utterance(speaker_profile(7, 0), rng, 5.0))
print("duration", speech.duration, "s, peak", np.abs(speech.samples).max())

# two views that never overlap
view_a, view_b = sample_disjoint_pair(speech, 32000, rng)

# augmentation sources: the synthetic corpus ships babble, music, colored noise and RIRs
root = tempfile.mkdtemp()
corpus = make_corpus(root, speakers=2, utts_per_speaker=1, test_utts_per_speaker=2, n_trials=2, n_noise=3, n_rirs=3)
policy = AugmentPolicy(NoiseCorpus.from_directory(corpus.noise_dir), RirCorpus.from_directory(corpus.rir_dir),
                       p_noise=1.0, p_reverb=1.0)

trace = {}
noisy = apply_policy(view_a, policy, rng, trace)
added = trace["gain"] * trace["noise"]
print("category:", trace["category"], "requested SNR %.2f dB" % trace["snr_db"],
      "measured %.2f dB" % (10 * np.log10(power(view_a.samples) / power(added))))

# log-mel before instance normalization: 198 frames x 40 bins for 2 s
raw = log_mel(noisy)
print("log-mel shape", raw.values.shape, "range", raw.values.min().round(2), raw.values.max().round(2))

# after per-bin mean/variance normalization every bin is centered with unit std
feats = extract_features(noisy)
print("per-bin mean ~0:", np.abs(feats.mean(axis=0)).max() < 1e-6,
      "per-bin std ~1:", np.abs(feats.std(axis=0) - 1).max() < 1e-3)
