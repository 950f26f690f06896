"""Regenerate the bundled training corpus (src/cca_attention/data/corpus.txt).

The text is produced by a small seeded phrase grammar, so it is original,
free of any license, and byte-for-byte reproducible.

    python scripts/make_corpus.py [--bytes 100000] [--seed 1]
"""
import argparse
from pathlib import Path

from cca_attention.numerics import XorShift64Star

NAMES = ["Ada", "Tomas", "Mira", "the old keeper", "the miller", "Jonah", "the captain",
         "Elsa", "the young clerk", "Bram", "the fisherman", "Nell", "the weaver"]
PLACES = ["the harbor", "the mill", "the valley", "the north road", "the market", "the lighthouse",
          "the orchard", "the river bend", "the old bridge", "the station", "the quiet square",
          "the hill above the town", "the long field"]
THINGS = ["a lantern", "the ledger", "a small boat", "the bread", "a letter", "the key",
          "the map", "a basket of apples", "the broken clock", "a coil of rope", "the nets",
          "a blue coat", "the last of the wine", "a sealed box"]
ADJ = ["cold", "grey", "bright", "heavy", "quiet", "narrow", "warm", "strange", "patient",
       "tired", "careful", "early", "distant", "slow"]
WEATHER = ["The wind came down from the hills", "Rain fell on the roofs all night",
           "The fog lay thick over the water", "The morning was clear and still",
           "Snow had covered the road", "A warm light settled on the town"]
VERBS_T = ["carried", "found", "opened", "mended", "sold", "counted", "hid", "lost",
           "watched", "cleaned", "wrapped", "returned"]
VERBS_I = ["waited", "walked on", "listened", "slept", "worked until dark", "laughed",
           "stood still", "turned back", "kept silent", "hurried home"]
ADV = ["slowly", "at once", "without a word", "before dawn", "once more", "with care",
       "in the evening", "for a long time", "as usual", "again"]
CONNECT = ["and then", "but", "so", "because", "while", "after that"]
SAYINGS = ["We will need more light before the winter.",
           "The road is longer than it looks.",
           "Nobody remembers who built the bridge.",
           "Bring the boat in before the tide turns.",
           "I counted them twice and still one is missing.",
           "There is bread on the table and tea in the pot.",
           "Tomorrow the market opens early.",
           "Keep the lantern lit until I come back."]


class Grammar:
    def __init__(self, seed):
        self.rng = XorShift64Star(seed)

    def pick(self, xs):
        return xs[self.rng.next_u64() % len(xs)]

    def chance(self, num, den):
        return self.rng.next_u64() % den < num

    def clause(self):
        who = self.pick(NAMES)
        if self.chance(1, 2):
            s = f"{who} {self.pick(VERBS_T)} {self.pick(THINGS)}"
        else:
            s = f"{who} {self.pick(VERBS_I)}"
        if self.chance(1, 2):
            s += f" near {self.pick(PLACES)}"
        if self.chance(1, 3):
            s += f" {self.pick(ADV)}"
        return s

    def sentence(self):
        r = self.rng.next_u64() % 10
        if r < 2:
            s = f"{self.pick(WEATHER)}, and {self.clause()}"
        elif r < 4:
            s = f"{self.clause()}, {self.pick(CONNECT)} {self.clause()}"
        elif r < 5:
            return f'"{self.pick(SAYINGS)}" said {self.pick(NAMES)}.'
        elif r < 6:
            s = f"It was a {self.pick(ADJ)} day at {self.pick(PLACES)}"
        else:
            s = self.clause()
        return s[0].upper() + s[1:] + "."

    def paragraph(self):
        n = 3 + self.rng.next_u64() % 5
        return " ".join(self.sentence() for _ in range(n))


def make_corpus(n_bytes: int, seed: int) -> str:
    g = Grammar(seed)
    parts, size = [], 0
    while size < n_bytes:
        p = g.paragraph() + "\n\n"
        parts.append(p)
        size += len(p)
    return "".join(parts)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bytes", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                         / "src" / "cca_attention" / "data" / "corpus.txt"))
    args = ap.parse_args()
    text = make_corpus(args.bytes, args.seed)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {len(text.encode())} bytes to {args.out}")


if __name__ == "__main__":
    main()
