"""Global-local text image translation: geometry, prompting, metrics and curation."""

from ._glotran import (
    BoundingBox,
    SliceGroup,
    bleu,
    build_prompt,
    count_visual_tokens,
    cross_attend,
    curate_corpus,
    fuse_recognition,
    merge_regions,
    ngram_cosine,
    order_regions,
    proximity_bucket,
    render_corpus,
    render_planted_corpus,
    train_reference,
    translate_corpus,
)

__all__ = [
    "BoundingBox",
    "SliceGroup",
    "bleu",
    "build_prompt",
    "count_visual_tokens",
    "cross_attend",
    "curate_corpus",
    "fuse_recognition",
    "merge_regions",
    "ngram_cosine",
    "order_regions",
    "proximity_bucket",
    "render_corpus",
    "render_planted_corpus",
    "train_reference",
    "translate_corpus",
]
