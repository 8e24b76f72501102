"""Regenerates toy.conllu: 50 projective sentences from a tiny grammar."""

import random

NOUNS = ["dog", "cat", "bird", "farmer", "child", "river", "house", "garden", "teacher", "apple", "boat", "song"]
VERBS = ["sees", "likes", "finds", "watches", "follows", "paints", "carries", "hears"]
INTRANS = ["sleeps", "runs", "waits", "sings"]
ADJS = ["small", "old", "red", "quiet", "happy", "tall"]
DETS = ["the", "a", "every", "this"]
PREPS = ["near", "with", "under", "behind"]
ADVS = ["slowly", "often", "today"]


def noun_phrase(rng, depth):
    words = [(rng.choice(DETS), "DET", "DT", "det")]
    for _ in range(rng.choice([0, 0, 1, 1, 2])):
        words.append((rng.choice(ADJS), "ADJ", "JJ", "amod"))
    head = len(words)
    words.append((rng.choice(NOUNS), "NOUN", "NN", None))
    arcs = [(i, head) for i in range(head)]
    if depth < 1 and rng.random() < 0.25:
        pp, pp_arcs, pp_head = prep_phrase(rng, depth + 1)
        off = len(words)
        words += pp
        arcs += [(d + off, h + off) for d, h in pp_arcs]
        arcs.append((pp_head + off, head))
        words[pp_head + off] = words[pp_head + off][:3] + ("nmod",)
    return words, arcs, head


def prep_phrase(rng, depth):
    np_words, np_arcs, np_head = noun_phrase(rng, depth)
    words = [(rng.choice(PREPS), "ADP", "IN", "case")] + np_words
    arcs = [(d + 1, h + 1) for d, h in np_arcs] + [(0, np_head + 1)]
    return words, arcs, np_head + 1


def sentence(rng):
    words, arcs, subj = noun_phrase(rng, 0)
    words[subj] = words[subj][:3] + ("nsubj",)
    verb = len(words)
    transitive = rng.random() < 0.7
    words.append((rng.choice(VERBS if transitive else INTRANS), "VERB", "VBZ", "root"))
    arcs.append((subj, verb))
    parts = []
    if transitive:
        parts.append(("obj", noun_phrase(rng, 0)))
    if rng.random() < 0.35:
        parts.append(("obl", prep_phrase(rng, 0)))
    for label, (p_words, p_arcs, p_head) in parts:
        off = len(words)
        words += p_words
        arcs += [(d + off, h + off) for d, h in p_arcs]
        arcs.append((p_head + off, verb))
        words[p_head + off] = words[p_head + off][:3] + (label,)
    if rng.random() < 0.3:
        arcs.append((len(words), verb))
        words.append((rng.choice(ADVS), "ADV", "RB", "advmod"))
    arcs.append((len(words), verb))
    words.append((".", "PUNCT", ".", "punct"))
    heads = [0] * len(words)
    for d, h in arcs:
        heads[d] = h + 1
    return words, heads


def main():
    rng = random.Random(7)
    out = []
    for idx in range(50):
        words, heads = sentence(rng)
        out.append(f"# sent_id = toy-{idx + 1:02d}")
        out.append("# text = " + " ".join(w[0] for w in words))
        for i, ((form, upos, xpos, label), head) in enumerate(zip(words, heads)):
            out.append(f"{i + 1}\t{form}\t{form}\t{upos}\t{xpos}\t_\t{head}\t{label}\t_\t_")
        out.append("")
    with open("toy.conllu", "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


if __name__ == "__main__":
    main()
