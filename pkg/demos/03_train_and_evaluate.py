"""
Training a speaker encoder without labels, then using a few labels
==================================================================

A short VICReg run on a small synthetic corpus, scored on held-out
trials, followed by a linear probe and a fine-tune with 50% of the labels.
Runs in about a minute; the acceptance suite uses the full 10-speaker
corpus and longer training.
"""
import tempfile

import numpy as np

from sslsv.audio_io import load_wav
from sslsv.eval import extract_embedding, fine_tune, linear_probe, run_trials
from sslsv.nn import Model
from sslsv.synth import make_corpus
from sslsv.trainer import TrainConfig, apply_overrides, build_policy, fit

root = tempfile.mkdtemp()
corpus = make_corpus(root, speakers=8, utts_per_speaker=12, test_utts_per_speaker=3, n_trials=100)
print(f"{len(corpus.train)} training utterances, {len(corpus.trials)} trials")

cfg = apply_overrides(TrainConfig(), {
    "batch_size": "16", "epochs": "25", "model.proj_dim": "64", "n_crops": "3",
    "augment.noise_dir": str(corpus.noise_dir), "augment.rir_dir": str(corpus.rir_dir),
})

# untrained baseline
_, before = run_trials(Model(cfg.model), corpus.trials, n_crops=3)
print(f"random encoder: EER {before.eer:.1f}%")

result = fit(corpus.train, cfg, trials=corpus.trials)
for row in result.metrics:
    print(f"epoch {row['epoch']}: loss {row['loss']:.3f}  emb_std {row['emb_std']:.3f}  EER {row['eval_eer']:.1f}%")

# verification uses the encoder output Y, averaged over evenly spaced crops
model = result.best
reps = np.stack([extract_embedding(model, load_wav(corpus.train.resolve(e)), 3) for e in corpus.train])
labels = [e.speaker_id for e in corpus.train]
probe = linear_probe(reps, labels, fraction=0.5)
print(f"linear probe on 50% of labels: training accuracy {probe.accuracy:.2f}")

tuned = fine_tune(model, corpus.train, 0.5, epochs=60, batch_size=16, policy=build_policy(cfg.augment))
_, after = run_trials(tuned, corpus.trials, n_crops=3)
print(f"fine-tuned with 50% of labels: EER {after.eer:.1f}%")
