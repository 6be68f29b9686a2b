"""Compare how much history each context strategy feeds the LM per sentence.

The memory approach always pays the same fixed prefix, the full-prompt
approach pays for whatever the previous sentence happened to contain.

    python demos/context_cost.py
"""
from camlm.cli import cost_rows, table
from camlm.corpus import CorpusConfig, make_dataset
from camlm.lm import LmConfig
from camlm.pipeline import STRATEGIES, context_cost


def main():
    paragraph = make_dataset(CorpusConfig(sentences_per_paragraph=6), 1, seed=5)[0]
    print("sentence lengths (text, speech):",
          [(len(t), len(s)) for t, s in zip(paragraph.texts, paragraph.speeches)])
    for label, cfg in (("both memories, L=32", LmConfig(n_slots=32)),
                       ("speech memory removed", LmConfig(n_slots=32, use_mem_s=False))):
        reports = [context_cost(s, paragraph, cfg) for s in STRATEGIES]
        print(f"\n{label}")
        print(table(cost_rows(reports), ["strategy", "num", "prefix_len", "per_sentence", "total_prefix"]))


if __name__ == "__main__":
    main()
