"""
Code utilization: binary versus vector-quantized tokenizers
===========================================================

Both tokenizers cut a 32x32 image into 4x4 patches and give every patch
one of 256 codes. The binary autoencoder gets its code from 8 independent
bits; the VQ tokenizer snaps each patch latent to its nearest codebook row.
We count how many of the 256 codes each one actually uses on the toy corpus
and how far the code histogram is from uniform.

Takes three to four minutes on one CPU core.
"""

import numpy as np

from elmlab.analysis import ngram_kl
from elmlab.data import CorpusSpec, generate_corpus, stack
from elmlab.tokenizer import TokenizerConfig, code_utilization, tokenize_dataset, train_tokenizer

corpus = generate_corpus(CorpusSpec())
images, labels = stack(corpus)
print("corpus:", images.shape, "classes", len(np.unique(labels)))

for kind in ("bae", "vq"):
    ckpt = train_tokenizer(images, TokenizerConfig(kind=kind))
    tokens = tokenize_dataset(corpus, ckpt)
    usage = code_utilization(tokens, 256)
    print(f"{kind}: {usage.distinct}/256 codes used, unigram KL to uniform {ngram_kl(tokens, 1, 256):.3f} nats, "
          f"bigram KL {ngram_kl(tokens, 2, 256):.3f}")
    # the five most frequent codes and their share of all tokens
    top = np.argsort(usage.counts)[::-1][:5]
    print("   most frequent:", [(int(c), round(float(usage.counts[c] / usage.total), 3)) for c in top])
