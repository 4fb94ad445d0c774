"""Context-codebook demo.

Trains a small vector-quantized autoencoder on synthetic scenes and shows how
the discrete codebook organizes traffic context: per-entry usage, how pure
each entry is with respect to the maneuver classes, and the classifier's
training accuracy.
"""

import numpy as np

from cvmd.evaluation import entropy_report
from cvmd.scenario import CLASS_NAMES, SynthConfig, synth_generate
from cvmd.vqvae import (
    VqVaeHyperParams,
    assign_all,
    classify,
    encode,
    train_vqvae,
)


def main():
    split = synth_generate(SynthConfig(samples_per_class=20), seed=0)
    hp = VqVaeHyperParams(codebook_size=30, latent_dim=64, epochs=1200,
                          learning_rate=1e-3, lam=10.0)
    print(f"training codebook of {hp.codebook_size} entries on "
          f"{len(split.train)} samples ...")
    model, log = train_vqvae(split, hp, seed=0)
    print(f"loss: {log[0]:.3f} -> {log[-1]:.3f} over {len(log)} epochs")

    correct = sum(
        int(np.argmax(classify(model, encode(model, s.observation))))
        == s.maneuver_class
        for s in split.train
    )
    print(f"classifier training accuracy: {correct / len(split.train):.2f}")

    assignments = assign_all(model, split.train)
    labels = [s.maneuver_class for s in split.train]
    rep = entropy_report(assignments, labels, hp.codebook_size)
    print(f"\nused entries: {rep.used_entries}/{hp.codebook_size}   "
          f"average class entropy: {rep.average_entropy:.3f} bits")
    print("entry  " + "  ".join(f"{n:>4}" for n in CLASS_NAMES) + "  entropy")
    for q, h in sorted(rep.entropy_per_condition.items()):
        row = rep.counts[q - 1]
        print(f"{q:5d}  " + "  ".join(f"{int(c):4d}" for c in row)
              + f"  {h:.3f}")


if __name__ == "__main__":
    main()
