"""Train the toy byte model, then decode with two runtime (g, s) settings.

    python scripts/train_toy.py [--steps 200] [--mode full|partial] [--prompt "The "]
"""
import argparse

from cca_attention.config import bundled_corpus
from cca_attention.model import ModelConfig, generate, model_init, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.3)
    ap.add_argument("--mode", choices=["full", "partial"], default="full")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompt", default="The ")
    ap.add_argument("--n-new", type=int, default=120)
    args = ap.parse_args()

    params = model_init(ModelConfig(seed=args.seed))
    log = train(params, bundled_corpus(), args.steps, args.lr, args.mode, seed=args.seed,
                log_every=max(1, args.steps // 10))
    print(f"loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}")
    prompt = list(args.prompt.encode())
    for g, s in ((2, 16), (8, 32)):
        text = bytes(generate(params, prompt, args.n_new, g, s)).decode("utf-8", "replace")
        print(f"--- g={g} s={s}\n{text}")


if __name__ == "__main__":
    main()
