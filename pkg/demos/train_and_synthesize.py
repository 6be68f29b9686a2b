"""Synthesize a paragraph with a trained model and compare it to the oracle.

Pass a checkpoint written by ``camlm train`` (the default recipe takes about
half an hour on one core). Without one, the script trains a short run
instead. A few hundred steps only learn the first sentence, whose state is
always zero, so later sentences come out shifted. That gap is what the
memory has to close.

    python demos/train_and_synthesize.py --ckpt model.ckpt
    python demos/train_and_synthesize.py --steps 400
"""
import argparse

import numpy as np

from camlm.config import RunConfig
from camlm.corpus import oracle_speech
from camlm.pipeline import synthesize_paragraph
from camlm.train import evaluate, load_training_checkpoint, train, validation_data


def short_run(steps: int):
    cfg = RunConfig(steps=steps, curriculum_steps=steps // 2, eval_interval=max(steps // 4, 1),
                    val_size=50, train_size=4000).validate()
    print(f"training {steps} steps ({cfg.curriculum_steps} on the curriculum)")
    result = train(cfg, callback=lambda r: r.get("event") == "eval" and print(
        f"  step {r['step']:5d}  val loss {r['val_loss']:.3f}  accuracy {r['token_accuracy']:.3f}"))
    return cfg, result.models


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ckpt", help="checkpoint from `camlm train`")
    parser.add_argument("--steps", type=int, default=400, help="length of the fallback training run")
    args = parser.parse_args()

    if args.ckpt:
        cfg, models, _ = load_training_checkpoint(args.ckpt)
    else:
        cfg, models = short_run(args.steps)

    val = validation_data(cfg)
    report = evaluate(models, val)
    print("first-token accuracy per sentence:", np.round(report["first_token_accuracy"], 2))

    sample = val[0]
    speech, cost = synthesize_paragraph(sample.texts, sample.x_vec, models, np.random.default_rng(0),
                                        temperature=0.0)
    corpus = cfg.corpus_config()
    print(f"\nspeaker {sample.speaker}, greedy synthesis vs oracle:")
    for n, (text, out) in enumerate(zip(sample.texts, speech), start=1):
        ref = oracle_speech(sample, n, corpus)
        marks = "".join("." if a == b else "x" for a, b in zip(ref, out)).ljust(len(ref), "x")
        print(f"  {n}: text {text}\n     got  {out}\n     want {ref}  [{marks}]")
    print(f"memory prefix per sentence: {cost.prefix_lens}")


if __name__ == "__main__":
    main()
