"""Special token ids shared by corpus generation, models, and decoding."""

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
N_SPECIALS = 4


def content_ids(vocab_size):
    """Ids available for actual symbols (everything past the specials)."""
    return range(N_SPECIALS, vocab_size)
