#!/usr/bin/env python3
"""
Example usage of skelseg

Generates a small synthetic skeleton corpus, trains the hierarchical
spatiotemporal quantization model on it for a few epochs, segments every
sequence and scores the result against the generator's ground truth.
"""

import logging
import sys
import tempfile
import time
from pathlib import Path

from skelseg import SynthConfig, Trainer, TrainConfig, evaluate, load_manifest, predict_labels, synth_generate
from skelseg.checkpoint import load_checkpoint, save_checkpoint
from skelseg.errors import SkelsegError
from skelseg.metrics import write_predictions
from skelseg.plotting import plot_dataset

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)


def run(workdir: Path, epochs: int = 20):
    print("Unsupervised skeleton action segmentation")
    print("=" * 60)

    # 1. Synthetic corpus: 4 motion classes, 10 sequences
    manifest_path = workdir / "data" / "manifest.json"
    synth_generate(manifest_path.parent, SynthConfig(classes=4, sequences=10, seed=0))
    manifest = load_manifest(manifest_path)
    sequences = list(manifest.sequences())
    frames = sum(s.num_frames for s in sequences)
    print(f"Corpus: {len(sequences)} sequences, {frames} frames, K={manifest.k_gt}, "
          f"V={manifest.v} joints in {manifest.c}-D")

    # 2. Train a reduced model
    config = TrainConfig.from_dict({
        "epochs": epochs,
        "encoder": {"hidden": 32, "latent": 16},
        "temporal_decoder": {"hidden": [64, 32]},
    })
    trainer = Trainer(config)
    state = trainer.init_state(manifest.c, manifest.v, manifest.k_gt)
    print(f"Codebook sizes (finest first): {state.config.hvq.level_sizes}")

    start_time = time.time()
    history = trainer.fit(state, sequences)
    print(f"✅ Trained {state.step} steps in {time.time() - start_time:.1f} seconds")
    print(f"   first step: {history[0]}")
    print(f"   last step:  {history[-1]}")

    # 3. Checkpoint round trip
    ckpt = workdir / "model.ckpt"
    save_checkpoint(state, ckpt)
    state = load_checkpoint(ckpt)

    # 4. Segment and evaluate
    pred_dir = workdir / "pred"
    pred_dir.mkdir(exist_ok=True)
    predictions = {}
    for seq in sequences:
        predictions[seq.sequence_id] = predict_labels(seq, state, trainer)
        write_predictions(pred_dir, seq.sequence_id, predictions[seq.sequence_id])

    report = evaluate(manifest, predictions)
    print("\nEvaluation")
    print("-" * 60)
    print(report.summary())
    print(f"Segments per video: ground truth {report.segments_gt:.1f}, predicted {report.segments_pred:.1f}")
    print(f"Cluster -> class mapping: {report.mapping}")

    written = plot_dataset(manifest, predictions, workdir / "plots")
    print(f"\nWrote {len(written)} figures and tables to {workdir / 'plots'}")
    return report


def main():
    """Usage: example.py [epochs] [output directory (kept); default is a temporary one]"""
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    try:
        if len(sys.argv) > 2:
            out = Path(sys.argv[2])
            out.mkdir(parents=True, exist_ok=True)
            run(out, epochs)
        else:
            with tempfile.TemporaryDirectory(prefix="skelseg_") as tmp:
                run(Path(tmp), epochs)
    except SkelsegError as e:
        logging.getLogger(__name__).error(f"Example failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
