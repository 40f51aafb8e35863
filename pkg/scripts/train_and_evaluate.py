"""Train on a synthetic corpus and report zero-shot accuracy on held-out images.

    python scripts/train_and_evaluate.py --seed 0 --out model.vlxm
"""
import argparse
import time

import numpy as np

from vlx.data import build_prompt_sets, generate_dataset, label_prompt_sets
from vlx.model import DualEncoderModel, ModelConfig, classify_batch, save_model, train_contrastive


def accuracy(model, samples, prompt_sets) -> float:
    x = np.stack([s.image.pixels for s in samples])
    y = np.array([s.class_id for s in samples])
    return float((classify_batch(model, x, prompt_sets).argmax(axis=1) == y).mean())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--held-out", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--lr", type=float, default=0.003)
    ap.add_argument("--weight-decay", type=float, default=0.1)
    ap.add_argument("--init-temperature", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    train, vocab = generate_dataset(args.n, seed=args.seed)
    test, _ = generate_dataset(args.held_out, seed=args.seed + 10_000)
    cfg = ModelConfig(vocab=vocab, init_temperature=args.init_temperature, seed=args.seed,
                      pixel_mean=float(np.mean([s.image.pixels.mean() for s in train])))
    model = DualEncoderModel(cfg)
    prompts, labels = build_prompt_sets(seed=args.seed), label_prompt_sets()

    def report(epoch, loss):
        if epoch % 5 == 4 or epoch == args.epochs - 1:
            print(f"epoch {epoch:2d} loss {loss:.4f} tau {model.temperature:.3f} "
                  f"held-out {accuracy(model, test, prompts):.3f} "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)

    t0 = time.perf_counter()
    train_contrastive(model, train, args.epochs, args.batch, args.lr, args.seed,
                      weight_decay=args.weight_decay, progress=report)
    elapsed = time.perf_counter() - t0
    print(f"prompt sets {accuracy(model, test, prompts):.3f}  "
          f"bare labels {accuracy(model, test, labels):.3f}  train time {elapsed:.1f}s")
    if args.out:
        save_model(model, args.out)


if __name__ == "__main__":
    main()
